//! Ensemble statistics and distances between Gaussian states.
//!
//! Reductions over records go through mergeable accumulators with
//! compensated sums. Callers that split an ensemble into fixed chunks and
//! merge the partial results in chunk order get bit-identical output for
//! any degree of parallelism.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimate::{EffectTrajectory, Trajectory, TrajectoryKind};
use crate::linalg::vsub;
use crate::model::{v_filter, w_retro, EffectiveParams, GaussianState};
use crate::smooth::{combine, z_factor_at, TargetSpec};

/// Default VACF decorrelation threshold.
pub const DEFAULT_VACF_THRESHOLD: f64 = 1.0 / std::f64::consts::E;

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &CompensatedSum) {
        self.add(other.sum);
        self.add(other.comp);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Per-time sums of `x`, `y` and `x·y` for both quadratures.
#[derive(Debug, Clone, PartialEq)]
pub struct PairAccumulator {
    n: usize,
    sx: Vec<CompensatedSum>,
    sy: Vec<CompensatedSum>,
    sxy: Vec<CompensatedSum>,
}

impl PairAccumulator {
    pub fn new(len: usize) -> Self {
        PairAccumulator {
            n: 0,
            sx: vec![CompensatedSum::default(); 2 * len],
            sy: vec![CompensatedSum::default(); 2 * len],
            sxy: vec![CompensatedSum::default(); 2 * len],
        }
    }

    pub fn len(&self) -> usize {
        self.sx.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.sx.is_empty()
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn push(&mut self, x: &[[f64; 2]], y: &[[f64; 2]]) {
        debug_assert!(x.len() >= self.len() && y.len() >= self.len());
        for k in 0..self.len() {
            for j in 0..2 {
                let i = 2 * k + j;
                self.sx[i].add(x[k][j]);
                self.sy[i].add(y[k][j]);
                self.sxy[i].add(x[k][j] * y[k][j]);
            }
        }
        self.n += 1;
    }

    pub fn push_variance(&mut self, x: &[[f64; 2]]) {
        self.push(x, x);
    }

    pub fn merge(&mut self, other: &PairAccumulator) {
        assert_eq!(self.len(), other.len());
        for i in 0..self.sx.len() {
            self.sx[i].merge(&other.sx[i]);
            self.sy[i].merge(&other.sy[i]);
            self.sxy[i].merge(&other.sxy[i]);
        }
        self.n += other.n;
    }

    /// Unbiased covariance per time, pooled over the two quadratures.
    pub fn pooled_covariance(&self) -> Vec<f64> {
        let n = self.n as f64;
        (0..self.len())
            .map(|k| {
                if self.n < 2 {
                    return f64::NAN;
                }
                let mut ss = 0.0;
                for j in 0..2 {
                    let i = 2 * k + j;
                    ss += self.sxy[i].value() - self.sx[i].value() * self.sy[i].value() / n;
                }
                ss / (2.0 * (n - 1.0))
            })
            .collect()
    }
}

/// Per-time mean and standard error of a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarAccumulator {
    n: usize,
    s: Vec<CompensatedSum>,
    ss: Vec<CompensatedSum>,
}

impl ScalarAccumulator {
    pub fn new(len: usize) -> Self {
        ScalarAccumulator {
            n: 0,
            s: vec![CompensatedSum::default(); len],
            ss: vec![CompensatedSum::default(); len],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        for (k, &v) in x.iter().enumerate().take(self.s.len()) {
            self.s[k].add(v);
            self.ss[k].add(v * v);
        }
        self.n += 1;
    }

    pub fn merge(&mut self, other: &ScalarAccumulator) {
        for k in 0..self.s.len() {
            self.s[k].merge(&other.s[k]);
            self.ss[k].merge(&other.ss[k]);
        }
        self.n += other.n;
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.s.iter().map(|s| s.value() / n).collect()
    }

    /// Standard error of the mean.
    pub fn sem(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.s
            .iter()
            .zip(&self.ss)
            .map(|(s, ss)| {
                let var = (ss.value() - s.value() * s.value() / n) / (n - 1.0);
                (var.max(0.0) / n).sqrt()
            })
            .collect()
    }
}

/// Biased autocorrelation of forward-difference velocities, summed over
/// quadratures and records.
#[derive(Debug, Clone, PartialEq)]
pub struct VacfAccumulator {
    sums: Vec<CompensatedSum>,
    series: usize,
}

impl VacfAccumulator {
    pub fn new(max_lag: usize) -> Self {
        VacfAccumulator {
            sums: vec![CompensatedSum::default(); max_lag + 1],
            series: 0,
        }
    }

    pub fn max_lag(&self) -> usize {
        self.sums.len() - 1
    }

    pub fn push(&mut self, means: &[[f64; 2]], dt: f64) -> Result<()> {
        let m = means.len().saturating_sub(1);
        if m <= self.max_lag() {
            return Err(Error::Precondition(format!(
                "trajectory of {} points too short for lag {}",
                means.len(),
                self.max_lag()
            )));
        }
        for j in 0..2 {
            let vel: Vec<f64> = means.windows(2).map(|p| (p[1][j] - p[0][j]) / dt).collect();
            for (lag, sum) in self.sums.iter_mut().enumerate() {
                let mut acc = CompensatedSum::default();
                for i in 0..m - lag {
                    acc.add(vel[i] * vel[i + lag]);
                }
                sum.add(acc.value() / m as f64);
            }
            self.series += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &VacfAccumulator) {
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            a.merge(b);
        }
        self.series += other.series;
    }

    /// Autocorrelation normalised to one at lag zero.
    pub fn normalized(&self) -> Vec<f64> {
        let zero = self.sums[0].value();
        self.sums.iter().map(|s| s.value() / zero).collect()
    }
}

/// Tr[(ρ_a − ρ_b)²] for two single-mode Gaussian states.
pub fn gaussian_hs_sq(a: &GaussianState, b: &GaussianState) -> Result<f64> {
    let sum = a.cov + b.cov;
    let det = sum.det();
    let inv = sum.inverse().filter(|_| det > 0.0).ok_or_else(|| Error::Numerical {
        module: "metrics",
        detail: "sum of covariances is singular".into(),
    })?;
    let r = vsub(a.mean, b.mean);
    let overlap = 2.0 * (-0.5 * inv.quad(r)).exp() / det.sqrt();
    Ok(a.purity() + b.purity() - 2.0 * overlap)
}

/// Ensemble-averaged squared HS distance of an estimator from its target,
/// `1/v_tar − 1/v_est`.
pub fn hs_avg_theory(v_tar: f64, v_est: f64) -> f64 {
    1.0 / v_tar - 1.0 / v_est
}

/// Averaged squared HS distance of the classical smoother from a target, at
/// one time given `v_F`, the effect precision `w` and `v_tar > 0`.
pub fn hs_avg_theory_classical_at(v_f: f64, w: f64, v_tar: f64) -> f64 {
    let v_cs = v_f / (1.0 + v_f * w);
    let v_s = combine(v_f, w, v_tar).map_or(f64::NAN, |c| c.variance);
    let (z, u) = z_factor_at(v_f, w, v_tar);
    1.0 / v_cs + 1.0 / v_tar - 4.0 / ((v_s + v_cs) + z * z * v_f + w * u * u)
}

/// Steady-state value of [`hs_avg_theory_classical_at`].
pub fn hs_avg_theory_classical(ep: &EffectiveParams, tgt: &TargetSpec) -> f64 {
    let w = ep.filter_riccati().backward_steady_precision();
    hs_avg_theory_classical_at(crate::model::v_filter_ss(ep), w, tgt.v_tar)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EstimatorKind {
    Filtered,
    Smoothed,
    Classical,
}

/// Standard deviation of one quadrature of `⟨x⟩_est − ⟨x⟩_tar`.
pub fn std_delta_theory_at(kind: EstimatorKind, v_f: f64, w: f64, v_tar: f64) -> Result<f64> {
    let v_s = || combine(v_f, w, v_tar).map(|c| c.variance);
    let var = match kind {
        EstimatorKind::Filtered => Some(v_f - v_tar),
        EstimatorKind::Smoothed => v_s().map(|v| v - v_tar),
        EstimatorKind::Classical => v_s().map(|v| {
            let (z, u) = z_factor_at(v_f, w, v_tar);
            v - v_tar + z * z * v_f + w * u * u
        }),
    };
    match var {
        Some(v) if v >= -1e-12 * v_tar.max(1.0) => Ok(v.max(0.0).sqrt()),
        _ => Err(Error::Precondition(format!(
            "target variance {v_tar} exceeds the {kind:?} variance"
        ))),
    }
}

/// [`std_delta_theory_at`] at time `t` of a record of the configured duration.
pub fn std_delta_theory(ep: &EffectiveParams, kind: EstimatorKind, tgt: &TargetSpec, t: f64) -> Result<f64> {
    let v_f = v_filter(t, ep)?;
    let w = w_retro(t, ep.record_duration, ep)?;
    std_delta_theory_at(kind, v_f, w, tgt.v_tar)
}

/// How ensemble members are correlated with each other.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum RecordCorrelation {
    /// Independently generated members.
    Independent,
    /// Consecutive windows of one stream; the state decays at `gamma/2`.
    Contiguous { gamma: f64, record_duration: f64 },
}

/// Effective number of independent records.
pub fn n_eff(n_records: usize, corr: RecordCorrelation) -> f64 {
    let n = n_records as f64;
    match corr {
        RecordCorrelation::Independent => n,
        RecordCorrelation::Contiguous { gamma, record_duration } => {
            let r = (-gamma * record_duration).exp();
            n / (1.0 + 2.0 * correlation_sum(n_records, r))
        }
    }
}

/// `Σ_{k=1}^{N−1} (1 − k/N) r^k` in closed form.
fn correlation_sum(n_records: usize, r: f64) -> f64 {
    let n = n_records as f64;
    if n_records < 2 {
        return 0.0;
    }
    if 1.0 - r < 1e-9 {
        return 0.5 * (n - 1.0);
    }
    let q = 1.0 - r;
    r / q - r * (1.0 - r.powf(n)) / (n * q * q)
}

/// Standard error of a variance estimate `value` from `n_eff` samples.
pub fn sev(value: f64, n_eff: f64) -> f64 {
    (4.0 / (2.0 * n_eff)).sqrt() * value.abs()
}

/// Ensemble variance against its prediction at every grid time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsistencySeries {
    pub kind: TrajectoryKind,
    pub times: Vec<f64>,
    pub var_ens: Vec<f64>,
    pub theory: Vec<f64>,
    pub sev: Vec<f64>,
    pub n_records: usize,
    pub n_eff: f64,
}

impl ConsistencySeries {
    /// Builds the comparison from a variance accumulator. Samples whose
    /// prediction is NaN are excluded from the summary counts.
    pub fn from_parts(
        kind: TrajectoryKind,
        times: Vec<f64>,
        var_ens: Vec<f64>,
        theory: Vec<f64>,
        n_records: usize,
        corr: RecordCorrelation,
    ) -> Self {
        let ne = n_eff(n_records, corr);
        // both quadratures are independent samples of the same variance
        let sev = var_ens.iter().map(|&v| sev(v, 2.0 * ne)).collect();
        ConsistencySeries {
            kind,
            times,
            var_ens,
            theory,
            sev,
            n_records,
            n_eff: ne,
        }
    }

    pub fn z_scores(&self) -> Vec<f64> {
        self.var_ens
            .iter()
            .zip(&self.theory)
            .zip(&self.sev)
            .map(|((v, t), s)| {
                if v.is_nan() || t.is_nan() {
                    f64::NAN
                } else if *s > 0.0 {
                    (v - t) / s
                } else if v == t {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .collect()
    }

    /// Indices whose deviation exceeds `m` standard errors.
    pub fn outside(&self, m: f64) -> Vec<usize> {
        self.z_scores()
            .iter()
            .enumerate()
            .filter(|(k, z)| !self.theory[*k].is_nan() && z.abs() > m)
            .map(|(k, _)| k)
            .collect()
    }

    pub fn consistent(&self) -> bool {
        self.outside(3.0).is_empty()
    }
}

fn uniform_len<'a, I: Iterator<Item = &'a Vec<f64>>>(mut times: I) -> Result<usize> {
    let first = times.next().ok_or_else(|| Error::Precondition("empty ensemble".into()))?;
    if times.any(|t| t.len() != first.len()) {
        return Err(Error::Precondition("trajectories differ in length".into()));
    }
    Ok(first.len())
}

/// Checks `Var_ens[⟨X_j⟩_C(t)] = σ²_uncon − v_C(t)` for one conditioning type.
pub fn consistency_check(trajs: &[Trajectory], sigma2_uncon: f64, corr: RecordCorrelation) -> Result<ConsistencySeries> {
    if trajs.len() < 2 {
        return Err(Error::Precondition("consistency check needs at least two records".into()));
    }
    let len = uniform_len(trajs.iter().map(|t| &t.times))?;
    let mut acc = PairAccumulator::new(len);
    for t in trajs {
        acc.push_variance(&t.means);
    }
    let theory = trajs[0].variances.iter().map(|v| sigma2_uncon - v).collect();
    Ok(ConsistencySeries::from_parts(
        trajs[0].kind,
        trajs[0].times.clone(),
        acc.pooled_covariance(),
        theory,
        trajs.len(),
        corr,
    ))
}

/// Retrofiltered means of one effect trajectory, with NaN where uninformative.
pub fn retro_means(e: &EffectTrajectory) -> Vec<[f64; 2]> {
    (0..e.len()).map(|k| e.mean(k).unwrap_or([f64::NAN; 2])).collect()
}

/// Checks `Var_ens[⟨X_j⟩_R(t)] = σ²_uncon + v_R(t)` where the effect is informative.
pub fn retro_consistency_check(
    effects: &[EffectTrajectory],
    sigma2_uncon: f64,
    corr: RecordCorrelation,
) -> Result<ConsistencySeries> {
    if effects.len() < 2 {
        return Err(Error::Precondition("consistency check needs at least two records".into()));
    }
    let len = uniform_len(effects.iter().map(|t| &t.times))?;
    let mut acc = PairAccumulator::new(len);
    for e in effects {
        acc.push_variance(&retro_means(e));
    }
    let e0 = &effects[0];
    let theory = (0..len)
        .map(|k| match e0.mean(k) {
            Some(_) => sigma2_uncon + 1.0 / e0.precision[k],
            None => f64::NAN,
        })
        .collect();
    Ok(ConsistencySeries::from_parts(
        TrajectoryKind::Retrofiltered,
        e0.times.clone(),
        acc.pooled_covariance(),
        theory,
        effects.len(),
        corr,
    ))
}

/// Mean squared HS distance between paired target and estimator states.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HsSeries {
    pub target: TrajectoryKind,
    pub estimator: TrajectoryKind,
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub sem: Vec<f64>,
    pub theory: Vec<f64>,
}

/// Per-time squared HS distances for one record.
pub fn hs_pointwise(target: &Trajectory, est: &Trajectory) -> Result<Vec<f64>> {
    if target.len() != est.len() {
        return Err(Error::Precondition("target and estimate differ in length".into()));
    }
    (0..target.len())
        .map(|k| gaussian_hs_sq(&target.state(k), &est.state(k)))
        .collect()
}

/// Empirical averaged HS distance over an ensemble of (target, estimate) pairs.
pub fn hs_empirical(targets: &[Trajectory], ests: &[Trajectory]) -> Result<HsSeries> {
    if targets.len() != ests.len() || targets.len() < 2 {
        return Err(Error::Precondition("need at least two paired records".into()));
    }
    let len = uniform_len(targets.iter().chain(ests).map(|t| &t.times))?;
    let mut acc = ScalarAccumulator::new(len);
    for (t, e) in targets.iter().zip(ests) {
        acc.push(&hs_pointwise(t, e)?);
    }
    let (t0, e0) = (&targets[0], &ests[0]);
    let theory = (0..len)
        .map(|k| hs_avg_theory(t0.variances[k], e0.variances[k]))
        .collect();
    Ok(HsSeries {
        target: t0.kind,
        estimator: e0.kind,
        times: t0.times.clone(),
        mean: acc.mean(),
        sem: acc.sem(),
        theory,
    })
}

/// Empirical spread of `δ = ⟨x⟩_est − ⟨x⟩_tar`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaSeries {
    pub target: TrajectoryKind,
    pub estimator: TrajectoryKind,
    pub times: Vec<f64>,
    pub std: Vec<f64>,
    /// `Std/√(2 N_eff)`.
    pub se: Vec<f64>,
}

pub fn deltas(target: &Trajectory, est: &Trajectory) -> Vec<[f64; 2]> {
    target.means.iter().zip(&est.means).map(|(t, e)| vsub(*e, *t)).collect()
}

pub fn std_delta_empirical(targets: &[Trajectory], ests: &[Trajectory], corr: RecordCorrelation) -> Result<DeltaSeries> {
    if targets.len() != ests.len() || targets.len() < 2 {
        return Err(Error::Precondition("need at least two paired records".into()));
    }
    let len = uniform_len(targets.iter().chain(ests).map(|t| &t.times))?;
    let mut acc = PairAccumulator::new(len);
    for (t, e) in targets.iter().zip(ests) {
        acc.push_variance(&deltas(t, e));
    }
    let ne = n_eff(targets.len(), corr);
    let std: Vec<f64> = acc.pooled_covariance().iter().map(|v| v.max(0.0).sqrt()).collect();
    let se = std.iter().map(|s| s / (2.0 * ne).sqrt()).collect();
    Ok(DeltaSeries {
        target: targets[0].kind,
        estimator: ests[0].kind,
        times: targets[0].times.clone(),
        std,
        se,
    })
}

/// Normalised velocity autocorrelation of one conditioning type.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VacfSeries {
    pub kind: TrajectoryKind,
    pub values: Vec<f64>,
    pub decorrelation_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VacfResult {
    pub lags: Vec<f64>,
    pub threshold: f64,
    pub series: Vec<VacfSeries>,
}

impl VacfResult {
    pub fn get(&self, kind: TrajectoryKind) -> Option<&VacfSeries> {
        self.series.iter().find(|s| s.kind == kind)
    }
}

/// First time the normalised VACF drops below `threshold`, linearly
/// interpolated between lags.
pub fn decorrelation_time(values: &[f64], dt: f64, threshold: f64) -> Option<f64> {
    let k = values.iter().position(|&v| v < threshold)?;
    if k == 0 {
        return Some(0.0);
    }
    let (a, b) = (values[k - 1], values[k]);
    Some(dt * ((k - 1) as f64 + (a - threshold) / (a - b)))
}

pub fn vacf_series(kind: TrajectoryKind, acc: &VacfAccumulator, dt: f64, threshold: f64) -> VacfSeries {
    let values = acc.normalized();
    let decorrelation_time = decorrelation_time(&values, dt, threshold);
    VacfSeries {
        kind,
        values,
        decorrelation_time,
    }
}

/// VACF of an ensemble of trajectories of one kind with uniform `dt`.
pub fn vacf(trajs: &[Trajectory], max_lag: usize, threshold: f64) -> Result<VacfSeries> {
    let first = trajs.first().ok_or_else(|| Error::Precondition("empty ensemble".into()))?;
    let dt = uniform_dt(&first.times)?;
    let mut acc = VacfAccumulator::new(max_lag);
    for t in trajs {
        acc.push(&t.means, dt)?;
    }
    Ok(vacf_series(first.kind, &acc, dt, threshold))
}

fn uniform_dt(times: &[f64]) -> Result<f64> {
    if times.len() < 2 {
        return Err(Error::Precondition("trajectory too short for a VACF".into()));
    }
    let dt = times[1] - times[0];
    if times.windows(2).any(|w| ((w[1] - w[0]) - dt).abs() > 1e-9 * dt) {
        return Err(Error::Precondition("VACF needs a uniform time step".into()));
    }
    Ok(dt)
}

/// Everything the analysis stage reports about an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleStats {
    pub n_records: usize,
    pub n_eff: f64,
    pub sigma2_uncon: f64,
    pub consistency: Vec<ConsistencySeries>,
    pub hs: Vec<HsSeries>,
    pub deltas: Vec<DeltaSeries>,
}
