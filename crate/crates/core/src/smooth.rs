//! Smoothed quantum states for a Gaussian target and the classical smoother.
//!
//! With target covariance `v_tar`, filtered state `(F, v_F)` and effect
//! `(w, Z)`, the smoothed state is
//!
//! ```text
//! v_S − v_tar = [ (v_F − v_tar)⁻¹ + (v_R + v_tar)⁻¹ ]⁻¹
//! ⟨x⟩_S       = (v_S − v_tar) [ (v_F − v_tar)⁻¹ F + (v_R + v_tar)⁻¹ R ]
//! ```
//!
//! evaluated here in terms of `δ = v_F − v_tar` and `w = 1/v_R`, so neither
//! an uninformative effect nor a converged filter needs a special division.
//! `v_tar = 0` is the classical smoother applied to the Wigner function.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{EffectTrajectory, Trajectory, TrajectoryKind};
use crate::linalg::Mat2;
use crate::model::{v_filter_ss, EffectiveParams, GaussianState};

/// Relative band around the target in which smoothing returns the filtered state.
pub const TARGET_EPS: f64 = 1e-9;
/// Slack allowed below the uncertainty bound by [`check_physicality`].
pub const PHYSICALITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Ltl,
    TrueState,
    Classical,
    Custom,
}

/// Gaussian target the smoother estimates, identified by its covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub kind: TargetKind,
    pub v_tar: f64,
}

impl TargetSpec {
    /// The long-time-limit filtered state; `ep` fixes its covariance.
    pub fn ltl(ep: &EffectiveParams) -> Self {
        TargetSpec {
            kind: TargetKind::Ltl,
            v_tar: v_filter_ss(ep),
        }
    }

    pub fn true_state() -> Self {
        TargetSpec {
            kind: TargetKind::TrueState,
            v_tar: 1.0,
        }
    }

    pub fn classical() -> Self {
        TargetSpec {
            kind: TargetKind::Classical,
            v_tar: 0.0,
        }
    }

    pub fn custom(v_tar: f64) -> Result<Self> {
        if !(v_tar >= 0.0 && v_tar.is_finite()) {
            return Err(Error::Precondition(format!("target variance must be >= 0, got {v_tar}")));
        }
        Ok(TargetSpec {
            kind: TargetKind::Custom,
            v_tar,
        })
    }

    pub fn output_kind(&self) -> TrajectoryKind {
        match self.kind {
            TargetKind::Ltl => TrajectoryKind::SmoothedLtl,
            TargetKind::TrueState => TrajectoryKind::SmoothedTrue,
            TargetKind::Classical => TrajectoryKind::ClassicalSmoothed,
            TargetKind::Custom => TrajectoryKind::SmoothedCustom,
        }
    }
}

/// Pointwise smoothed variance and the weights of the filtered mean and
/// the effect's information vector: `mean = a F + b Z`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Combination {
    pub variance: f64,
    pub filtered_weight: f64,
    pub info_weight: f64,
}

/// Combines one filtered variance with one effect precision.
///
/// Returns `None` where `v_F − v_tar` is negative beyond tolerance.
pub fn combine(v_f: f64, w: f64, v_tar: f64) -> Option<Combination> {
    let delta = v_f - v_tar;
    let eps = TARGET_EPS * v_tar;
    if delta.abs() <= eps {
        return Some(Combination {
            variance: v_f,
            filtered_weight: 1.0,
            info_weight: 0.0,
        });
    }
    if delta < 0.0 {
        return None;
    }
    let omega = 1.0 + v_tar * w;
    let denom = delta * w + omega;
    Some(Combination {
        variance: v_tar + delta * omega / denom,
        filtered_weight: omega / denom,
        info_weight: delta / denom,
    })
}

fn check_aligned(filt: &Trajectory, retro: &EffectTrajectory) -> Result<()> {
    if filt.len() != retro.len() {
        return Err(Error::Precondition(format!(
            "filtered ({}) and retrofiltered ({}) trajectories differ in length",
            filt.len(),
            retro.len()
        )));
    }
    let scale = filt.times.last().copied().unwrap_or(0.0).abs().max(1e-300);
    if let Some(k) = filt
        .times
        .iter()
        .zip(&retro.times)
        .position(|(a, b)| (a - b).abs() > 1e-9 * scale)
    {
        return Err(Error::Precondition(format!("time grids differ at sample {k}")));
    }
    Ok(())
}

/// Smoothed trajectory for an arbitrary target.
pub fn smooth_general(filt: &Trajectory, retro: &EffectTrajectory, tgt: &TargetSpec) -> Result<Trajectory> {
    check_aligned(filt, retro)?;
    let n = filt.len();
    let mut means = Vec::with_capacity(n);
    let mut variances = Vec::with_capacity(n);
    let mut physical = tgt.kind != TargetKind::Classical;
    for k in 0..n {
        let v_f = filt.variances[k];
        let w = retro.precision[k];
        let comb = combine(v_f, w, tgt.v_tar).ok_or_else(|| Error::Singular {
            module: "smooth",
            sample: k,
            detail: format!("filtered variance {v_f} below target variance {}", tgt.v_tar),
        })?;
        let (f, z) = (filt.means[k], retro.info[k]);
        means.push([
            comb.filtered_weight * f[0] + comb.info_weight * z[0],
            comb.filtered_weight * f[1] + comb.info_weight * z[1],
        ]);
        variances.push(comb.variance);
        physical &= comb.variance >= 1.0 - PHYSICALITY_TOL;
    }
    Ok(Trajectory {
        kind: tgt.output_kind(),
        times: filt.times.clone(),
        means,
        variances,
        physical,
        converged: filt.converged,
    })
}

/// Classical fixed-interval smoother: outputs may violate the uncertainty bound.
pub fn smooth_classical(filt: &Trajectory, retro: &EffectTrajectory) -> Result<Trajectory> {
    smooth_general(filt, retro, &TargetSpec::classical())
}

/// Schrödinger-Heisenberg bound for one mode: `V > 0` and `det V ≥ 1`.
pub fn check_physicality(s: &GaussianState) -> bool {
    let v = s.cov;
    v.is_symmetric(1e-12 * v.trace().abs().max(1.0))
        && v.0[0][0] > 0.0
        && v.det() > 0.0
        && v.det().sqrt() >= 1.0 - PHYSICALITY_TOL
}

/// Coefficient relating the classical and quantum smoothed means,
/// `⟨x⟩_cS − ⟨x⟩_S = z (⟨x⟩_R − ⟨x⟩_F)`, written as `z = w u`.
///
/// Returns `(z, u)`; `u` stays finite where `w = 0`.
pub fn z_factor_at(v_f: f64, w: f64, v_tar: f64) -> (f64, f64) {
    let classical = v_f / (1.0 + v_f * w);
    let quantum_excess = match combine(v_f, w, v_tar) {
        Some(c) => c.variance - v_tar,
        None => f64::NAN,
    };
    let u = classical - quantum_excess / (1.0 + v_tar * w);
    (w * u, u)
}

/// Steady-state `z` for a target.
pub fn z_factor(ep: &EffectiveParams, tgt: &TargetSpec) -> f64 {
    let w = ep.filter_riccati().backward_steady_precision();
    z_factor_at(v_filter_ss(ep), w, tgt.v_tar).0
}

/// Steady-state smoothed variance for a target.
pub fn v_smoothed_ss(ep: &EffectiveParams, tgt: &TargetSpec) -> Result<f64> {
    let w = ep.filter_riccati().backward_steady_precision();
    combine(v_filter_ss(ep), w, tgt.v_tar)
        .map(|c| c.variance)
        .ok_or_else(|| Error::Precondition("target variance exceeds the filtered variance".into()))
}

/// Full 2×2 smoothing of one filtered state with an effect of precision
/// matrix `w` and information vector `z`.
///
/// The isotropic path above is what the pipeline uses; this one treats
/// general covariances and requires `V_F − V_tar` to be invertible.
pub fn smooth_gaussian(filtered: &GaussianState, w: Mat2, z: [f64; 2], v_tar: Mat2) -> Result<GaussianState> {
    let singular = |what: &str| Error::Singular {
        module: "smooth",
        sample: 0,
        detail: format!("{what} is not invertible"),
    };
    let delta_inv = (filtered.cov - v_tar).inverse().ok_or_else(|| singular("V_F - V_tar"))?;
    // (V_R + V_tar)⁻¹ = (I + W V_tar)⁻¹ W
    let left = (Mat2::IDENTITY + w * v_tar).inverse().ok_or_else(|| singular("I + W V_tar"))?;
    let precision = delta_inv + left * w;
    let excess = precision.inverse().ok_or_else(|| singular("smoothed precision"))?;
    let fz = delta_inv.apply(filtered.mean);
    let rz = left.apply(z);
    let mean = excess.apply([fz[0] + rz[0], fz[1] + rz[1]]);
    let cov = excess + v_tar;
    let mut out = GaussianState {
        mean,
        cov,
        physical: false,
    };
    out.physical = check_physicality(&out);
    Ok(out)
}
