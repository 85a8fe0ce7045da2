//! Forward filtering and backward retrofiltering of measurement records.
//!
//! Trajectories live on the `n + 1` grid points `t_k = k dt` of an
//! `n`-sample record. The filtered state at `t_k` has seen samples
//! `0..k`; the retrofiltered effect at `t_k` has seen samples `k..n`.
//! Covariances are evaluated from the closed forms in [`crate::model`], so
//! only the means depend on the record.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EffectiveParams, GaussianState};
use crate::simulate::MeasurementRecord;

/// Convergence tolerance of the long-time-limit filter, relative to steady state.
pub const LTL_CONVERGENCE_TOL: f64 = 1e-3;
/// Number of preceding records the long-time-limit filter expects.
pub const DEFAULT_WARMUP_RECORDS: usize = 3;
/// Retrofilter means are reported only where `w` exceeds this fraction of `w_ss`.
pub const MIN_RELATIVE_PRECISION: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrajectoryKind {
    Filtered,
    Retrofiltered,
    #[serde(rename = "LTL")]
    Ltl,
    #[serde(rename = "SmoothedLTL")]
    SmoothedLtl,
    SmoothedTrue,
    SmoothedCustom,
    ClassicalSmoothed,
    True,
}

impl TrajectoryKind {
    pub fn label(&self) -> &'static str {
        match self {
            TrajectoryKind::Filtered => "Filtered",
            TrajectoryKind::Retrofiltered => "Retrofiltered",
            TrajectoryKind::Ltl => "LTL",
            TrajectoryKind::SmoothedLtl => "SmoothedLTL",
            TrajectoryKind::SmoothedTrue => "SmoothedTrue",
            TrajectoryKind::SmoothedCustom => "SmoothedCustom",
            TrajectoryKind::ClassicalSmoothed => "ClassicalSmoothed",
            TrajectoryKind::True => "True",
        }
    }
}

impl std::fmt::Display for TrajectoryKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Sequence of isotropic Gaussian states `N(means[k], variances[k]·I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub kind: TrajectoryKind,
    pub times: Vec<f64>,
    pub means: Vec<[f64; 2]>,
    pub variances: Vec<f64>,
    pub physical: bool,
    pub converged: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, k: usize) -> GaussianState {
        GaussianState::isotropic(self.means[k], self.variances[k], self.physical)
    }

    /// Same samples, relabelled.
    pub fn with_kind(mut self, kind: TrajectoryKind) -> Self {
        self.kind = kind;
        self
    }

    /// The hidden true-state mean as a trajectory with unit variance.
    pub fn true_state(times: Vec<f64>, means: Vec<[f64; 2]>) -> Self {
        let n = times.len();
        Trajectory {
            kind: TrajectoryKind::True,
            times,
            means,
            variances: vec![1.0; n],
            physical: true,
            converged: true,
        }
    }
}

/// Retrofiltered effect in information form: precision `w = 1/v_R` and
/// information vector `z = w⟨x⟩_R`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectState {
    pub w: f64,
    pub z: [f64; 2],
}

impl EffectState {
    pub const UNINFORMATIVE: EffectState = EffectState { w: 0.0, z: [0.0, 0.0] };

    pub fn mean(&self) -> Option<[f64; 2]> {
        (self.w > 0.0).then(|| [self.z[0] / self.w, self.z[1] / self.w])
    }

    pub fn variance(&self) -> Option<f64> {
        (self.w > 0.0).then(|| 1.0 / self.w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectTrajectory {
    pub times: Vec<f64>,
    pub precision: Vec<f64>,
    pub info: Vec<[f64; 2]>,
    /// Threshold below which `precision` is treated as uninformative.
    pub min_precision: f64,
}

impl EffectTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn effect(&self, k: usize) -> EffectState {
        EffectState {
            w: self.precision[k],
            z: self.info[k],
        }
    }

    /// Retrofiltered mean where the effect is informative.
    pub fn mean(&self, k: usize) -> Option<[f64; 2]> {
        let w = self.precision[k];
        (w > self.min_precision).then(|| [self.info[k][0] / w, self.info[k][1] / w])
    }
}

fn check_record(rec: &MeasurementRecord, ep: &EffectiveParams) -> Result<()> {
    if (rec.dt - ep.dt).abs() > 1e-9 * ep.dt {
        return Err(Error::Precondition(format!(
            "record dt {} differs from model dt {}",
            rec.dt, ep.dt
        )));
    }
    if (rec.eta_effective - ep.eta).abs() > 1e-9 {
        return Err(Error::Precondition(format!(
            "record efficiency {} differs from model efficiency {}",
            rec.eta_effective, ep.eta
        )));
    }
    if rec.i1.len() != rec.i2.len() {
        return Err(Error::Precondition("quadrature lengths differ".into()));
    }
    Ok(())
}

fn isotropic_variance(init: &GaussianState) -> Result<f64> {
    let m = init.cov.0;
    if m[0][1] != 0.0 || m[1][0] != 0.0 || m[0][0] != m[1][1] {
        return Err(Error::Precondition(
            "filter initial covariance must be a multiple of the identity".into(),
        ));
    }
    if !init.physical || m[0][0] < 1.0 - 1e-9 {
        return Err(Error::Precondition(format!(
            "filter initial state must be physical, got variance {}",
            m[0][0]
        )));
    }
    Ok(m[0][0])
}

/// Filters a record starting from `init` at its first sample.
pub fn run_filter(rec: &MeasurementRecord, ep: &EffectiveParams, init: &GaussianState) -> Result<Trajectory> {
    run_filter_scaled_gain(rec, ep, init, 1.0)
}

/// [`run_filter`] with the measurement gain multiplied by `gain_scale`.
///
/// Only `gain_scale = 1` is optimal; other values exist to probe that.
pub fn run_filter_scaled_gain(
    rec: &MeasurementRecord,
    ep: &EffectiveParams,
    init: &GaussianState,
    gain_scale: f64,
) -> Result<Trajectory> {
    check_record(rec, ep)?;
    let v0 = isotropic_variance(init)?;
    filter_over(&[rec], ep, init.mean, v0, gain_scale, 0)
}

/// Runs the filter across `records` back to back and keeps the grid of the
/// last one.
fn filter_over(
    records: &[&MeasurementRecord],
    ep: &EffectiveParams,
    mean0: [f64; 2],
    v0: f64,
    gain_scale: f64,
    keep_from: usize,
) -> Result<Trajectory> {
    let r = ep.filter_riccati();
    let dt = ep.dt;
    let c = ep.coupling();
    let decay = (-0.5 * ep.gamma * dt).exp();
    let mut m = mean0;
    let mut step = 0usize;
    let total: usize = records.iter().map(|r| r.len()).sum();
    let keep_len = total - keep_from + 1;
    let mut times = Vec::with_capacity(keep_len);
    let mut means = Vec::with_capacity(keep_len);
    let mut variances = Vec::with_capacity(keep_len);
    let t_offset = keep_from as f64 * dt;

    let mut push = |step: usize, m: [f64; 2], v: f64| {
        if step >= keep_from {
            times.push(step as f64 * dt - t_offset);
            means.push(m);
            variances.push(v);
        }
    };

    let mut v = r.forward(0.0, v0);
    push(0, m, v);
    for (ri, rec) in records.iter().enumerate() {
        for k in 0..rec.len() {
            let (a, b) = (rec.i1[k], rec.i2[k]);
            if !a.is_finite() || !b.is_finite() {
                let sample = if ri + 1 == records.len() { k } else { step };
                return Err(Error::NonFinite {
                    module: "estimate",
                    sample,
                });
            }
            let gain = gain_scale * c * v;
            m[0] = decay * m[0] + gain * (a - c * m[0]) * dt;
            m[1] = decay * m[1] + gain * (b - c * m[1]) * dt;
            step += 1;
            v = r.forward(step as f64 * dt, v0);
            push(step, m, v);
        }
    }
    if !(m[0].is_finite() && m[1].is_finite()) {
        return Err(Error::Numerical {
            module: "estimate",
            detail: "filter mean diverged".into(),
        });
    }
    Ok(Trajectory {
        kind: TrajectoryKind::Filtered,
        times,
        means,
        variances,
        physical: true,
        converged: true,
    })
}

/// Long-time-limit filter: starts from the unconditional state at the
/// beginning of `warmup` and reports only the grid of `target`.
///
/// The result is flagged not converged when the variance at the start of the
/// target exceeds steady state by more than [`LTL_CONVERGENCE_TOL`].
pub fn run_ltl_filter(warmup: &[MeasurementRecord], target: &MeasurementRecord, ep: &EffectiveParams) -> Result<Trajectory> {
    for rec in warmup.iter().chain(std::iter::once(target)) {
        check_record(rec, ep)?;
    }
    if warmup.len() < DEFAULT_WARMUP_RECORDS {
        log::warn!(
            "long-time-limit filter given {} warm-up records, expected at least {DEFAULT_WARMUP_RECORDS}",
            warmup.len()
        );
    }
    let keep_from: usize = warmup.iter().map(|r| r.len()).sum();
    let mut records: Vec<&MeasurementRecord> = warmup.iter().collect();
    records.push(target);
    let init = crate::model::unconditional_state(ep);
    let mut traj = filter_over(&records, ep, init.mean, init.cov.0[0][0], 1.0, keep_from)?;
    let v_ss = crate::model::v_filter_ss(ep);
    traj.converged = traj.variances[0] - v_ss <= LTL_CONVERGENCE_TOL * v_ss;
    if !traj.converged {
        log::warn!(
            "long-time-limit filter not converged: v(t0) = {:.6}, steady state {:.6}",
            traj.variances[0],
            v_ss
        );
    }
    traj.kind = TrajectoryKind::Ltl;
    Ok(traj)
}

/// Retrofilters a record backwards from an uninformative final effect.
pub fn run_retrofilter(rec: &MeasurementRecord, ep: &EffectiveParams) -> Result<EffectTrajectory> {
    check_record(rec, ep)?;
    let r = ep.filter_riccati();
    let n = rec.len();
    let dt = ep.dt;
    let c = ep.coupling();
    let n_tot = ep.n_tot();
    let rate = 0.5 * ep.gamma;
    let precision: Vec<f64> = (0..=n).map(|k| r.backward_precision((n - k) as f64 * dt)).collect();
    let mut info = vec![[0.0; 2]; n + 1];
    let mut z = [0.0; 2];
    for k in (0..n).rev() {
        let (a, b) = (rec.i1[k], rec.i2[k]);
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite {
                module: "estimate",
                sample: k,
            });
        }
        let decay = (-(rate + 2.0 * ep.gamma * n_tot * precision[k + 1]) * dt).exp();
        z[0] = decay * z[0] + c * a * dt;
        z[1] = decay * z[1] + c * b * dt;
        info[k] = z;
    }
    let w_ss = r.backward_steady_precision();
    Ok(EffectTrajectory {
        times: (0..=n).map(|k| k as f64 * dt).collect(),
        precision,
        info,
        min_precision: MIN_RELATIVE_PRECISION * w_ss,
    })
}
