//! Physical parameters, system matrices and closed-form covariance dynamics.
//!
//! All quadratures are in zero-point units: the ground state has variance 1
//! and every covariance in this system is isotropic, `V = v I`.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat2;

/// Largest exponent evaluated before a closed form is replaced by its limit.
const MAX_EXPONENT: f64 = 700.0;

/// Parameters of the monitored resonator as characterised in the lab.
///
/// Rates are angular (rad/s). `gamma_fb` is the feedback-broadened linewidth;
/// when present the working parameters are obtained by [`effective_params`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    pub gamma: f64,
    pub gamma_fb: Option<f64>,
    pub n_th: f64,
    pub coop: f64,
    pub eta: f64,
    pub omega: f64,
    pub record_duration: f64,
    pub dt: f64,
}

impl PhysicalParams {
    /// The cryogenic membrane device used as the default working point:
    /// Γ/2π = 11.5 mHz, Γ_fb/2π = 85 Hz, n_th = 2.45e5, 𝒞 = 3.16e4, η = 0.38,
    /// Ω/2π = 1.04 MHz, 750 μs records sampled every 1 μs.
    pub fn reference() -> Self {
        PhysicalParams {
            gamma: TAU * 11.5e-3,
            gamma_fb: Some(TAU * 85.0),
            n_th: 2.45e5,
            coop: 3.16e4,
            eta: 0.38,
            omega: TAU * 1.04e6,
            record_duration: 750e-6,
            dt: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if let Some(fb) = self.gamma_fb {
            if !(fb >= self.gamma && fb.is_finite()) {
                return bad(format!("gamma_fb ({fb}) must be >= gamma ({})", self.gamma));
            }
        }
        if !(self.n_th >= 0.0 && self.n_th.is_finite()) {
            return bad(format!("n_th must be >= 0, got {}", self.n_th));
        }
        if !(self.coop >= 0.0 && self.coop.is_finite()) {
            return bad(format!("cooperativity must be >= 0, got {}", self.coop));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad(format!("eta must lie in (0, 1], got {}", self.eta));
        }
        if !(self.dt > 0.0 && self.dt < self.record_duration) {
            return bad(format!(
                "need 0 < dt < record duration, got dt = {}, duration = {}",
                self.dt, self.record_duration
            ));
        }
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return bad(format!("omega must be >= 0, got {}", self.omega));
        }
        Ok(())
    }
}

/// Working parameters after the feedback substitution.
///
/// The optical and thermal decoherence rates `gamma·coop` and `gamma·n_th`
/// are those of the underlying [`PhysicalParams`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveParams {
    pub gamma: f64,
    pub n_th: f64,
    pub coop: f64,
    pub eta: f64,
    pub omega: f64,
    pub record_duration: f64,
    pub dt: f64,
}

impl EffectiveParams {
    /// Total phonon occupancy 𝒞 + n_th + 1/2.
    pub fn n_tot(&self) -> f64 {
        self.coop + self.n_th + 0.5
    }

    /// Unconditional quadrature variance 2 n_tot.
    pub fn sigma2_uncon(&self) -> f64 {
        2.0 * self.n_tot()
    }

    /// Measurement rate 2ηΓ𝒞 (rad/s).
    pub fn meas_rate(&self) -> f64 {
        2.0 * self.eta * self.gamma * self.coop
    }

    /// Record coupling √(2ηΓ𝒞): the current is `coupling·⟨X⟩ + noise`.
    pub fn coupling(&self) -> f64 {
        self.meas_rate().sqrt()
    }

    /// Optical decoherence rate Γ𝒞 (rad/s).
    pub fn gamma_opt(&self) -> f64 {
        self.gamma * self.coop
    }

    /// Thermal decoherence rate Γ n_th (rad/s).
    pub fn gamma_th(&self) -> f64 {
        self.gamma * self.n_th
    }

    /// Same system observed with a different detection efficiency.
    pub fn with_eta(&self, eta: f64) -> Result<Self> {
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(Error::InvalidParams(format!("eta must lie in (0, 1], got {eta}")));
        }
        Ok(EffectiveParams { eta, ..*self })
    }

    pub fn with_record_duration(&self, record_duration: f64) -> Result<Self> {
        if !(record_duration > self.dt) {
            return Err(Error::InvalidParams(format!(
                "record duration {record_duration} must exceed dt {}",
                self.dt
            )));
        }
        Ok(EffectiveParams {
            record_duration,
            ..*self
        })
    }

    /// Number of samples in one record.
    pub fn samples_per_record(&self) -> usize {
        (self.record_duration / self.dt).round() as usize
    }

    pub(crate) fn filter_riccati(&self) -> Riccati {
        Riccati::new(self.gamma, self.n_tot(), self.eta * self.coop)
    }

    pub(crate) fn true_riccati(&self) -> Riccati {
        Riccati::new(self.gamma, self.n_tot(), self.coop + self.n_th)
    }
}

/// Applies the feedback substitution Γ → Γ_fb, n_th → n_th Γ/Γ_fb, 𝒞 → 𝒞 Γ/Γ_fb.
pub fn effective_params(p: &PhysicalParams) -> Result<EffectiveParams> {
    p.validate()?;
    let (gamma, n_th, coop) = match p.gamma_fb {
        Some(fb) => {
            let ratio = p.gamma / fb;
            (fb, p.n_th * ratio, p.coop * ratio)
        }
        None => (p.gamma, p.n_th, p.coop),
    };
    Ok(EffectiveParams {
        gamma,
        n_th,
        coop,
        eta: p.eta,
        omega: p.omega,
        record_duration: p.record_duration,
        dt: p.dt,
    })
}

/// Drift, measurement, diffusion and cross-correlation matrices of the
/// interaction-frame model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemMatrices {
    pub drift: Mat2,
    pub measurement: Mat2,
    pub diffusion: Mat2,
    pub cross: Mat2,
}

pub fn system_matrices(ep: &EffectiveParams) -> SystemMatrices {
    SystemMatrices {
        drift: Mat2::scalar(-0.5 * ep.gamma),
        measurement: Mat2::scalar(ep.coupling()),
        diffusion: Mat2::scalar(2.0 * ep.gamma * ep.n_tot()),
        cross: Mat2::ZERO,
    }
}

/// Gaussian state of one mode: quadrature means and symmetric covariance.
///
/// `physical` is false for the outputs of the classical smoother, which are
/// Gaussians on phase space but not necessarily quantum states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianState {
    pub mean: [f64; 2],
    pub cov: Mat2,
    pub physical: bool,
}

impl GaussianState {
    pub fn isotropic(mean: [f64; 2], v: f64, physical: bool) -> Self {
        GaussianState {
            mean,
            cov: Mat2::scalar(v),
            physical,
        }
    }

    /// Purity 1/√det V.
    pub fn purity(&self) -> f64 {
        1.0 / self.cov.det().sqrt()
    }
}

pub fn unconditional_state(ep: &EffectiveParams) -> GaussianState {
    GaussianState::isotropic([0.0, 0.0], ep.sigma2_uncon(), true)
}

/// Scalar Riccati equation `v̇ = −Γv + 2Γ n_tot − 2Γ k v²`.
///
/// `k = η𝒞` gives the filter, `k = 𝒞 + n_th` the full heterodyne
/// unravelling. Read backwards in time with precision `w = 1/v` it also gives
/// the retrofilter.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Riccati {
    gamma: f64,
    n_tot: f64,
    k: f64,
    root: f64,
}

impl Riccati {
    pub(crate) fn new(gamma: f64, n_tot: f64, k: f64) -> Self {
        Riccati {
            gamma,
            n_tot,
            k,
            root: (1.0 + 16.0 * k * n_tot).sqrt(),
        }
    }

    /// Relaxation rate Γ√(1 + 16 k n_tot).
    pub(crate) fn rate(&self) -> f64 {
        self.gamma * self.root
    }

    /// Stable fixed point (√(1+16 k n_tot) − 1)/(4k), written so k → 0 is exact.
    pub(crate) fn steady_state(&self) -> f64 {
        4.0 * self.n_tot / (self.root + 1.0)
    }

    /// Fixed point of the backward equation (√(1+16 k n_tot) + 1)/(4k) as a precision.
    pub(crate) fn backward_steady_precision(&self) -> f64 {
        4.0 * self.k / (self.root + 1.0)
    }

    pub(crate) fn rhs(&self, v: f64) -> f64 {
        self.gamma * (-v + 2.0 * self.n_tot - 2.0 * self.k * v * v)
    }

    /// Forward solution from `v(0) = v0`.
    pub(crate) fn forward(&self, t: f64, v0: f64) -> f64 {
        let v_ss = self.steady_state();
        let x = self.rate() * t;
        if x > MAX_EXPONENT {
            return v_ss;
        }
        let delta0 = v0 - v_ss;
        let a = 2.0 * self.k / self.root;
        let ad = a * delta0;
        v_ss + delta0 / ((1.0 + ad) * x.exp() - ad)
    }

    /// Backward precision a time `tau` before an uninformative final condition.
    pub(crate) fn backward_precision(&self, tau: f64) -> f64 {
        let x = self.rate() * tau;
        if x > MAX_EXPONENT {
            return self.backward_steady_precision();
        }
        let a = 2.0 * self.k / self.root;
        let e = x.exp_m1();
        a * e / (1.0 + e * (self.root + 1.0) / (2.0 * self.root))
    }
}

/// Filtered variance at time `t` after starting from the unconditional state.
pub fn v_filter(t: f64, ep: &EffectiveParams) -> Result<f64> {
    if t.is_nan() || t < 0.0 {
        return Err(Error::Precondition(format!("v_filter needs t >= 0, got {t}")));
    }
    Ok(ep.filter_riccati().forward(t, ep.sigma2_uncon()))
}

/// Filtered variance at time `t` after starting from an arbitrary variance.
pub fn v_filter_from(t: f64, v0: f64, ep: &EffectiveParams) -> Result<f64> {
    if t.is_nan() || t < 0.0 || !(v0 > 0.0) {
        return Err(Error::Precondition(format!(
            "v_filter_from needs t >= 0 and v0 > 0, got t = {t}, v0 = {v0}"
        )));
    }
    Ok(ep.filter_riccati().forward(t, v0))
}

pub fn v_filter_ss(ep: &EffectiveParams) -> f64 {
    ep.filter_riccati().steady_state()
}

/// Retrofilter precision `w = 1/v_R` at time `t` in a record ending at `duration`.
///
/// Returns 0 at `t = duration` (uninformative effect).
pub fn w_retro(t: f64, duration: f64, ep: &EffectiveParams) -> Result<f64> {
    if t.is_nan() || t < 0.0 || t > duration {
        return Err(Error::TimeOutOfRange { t, duration });
    }
    Ok(ep.filter_riccati().backward_precision(duration - t))
}

/// Retrofilter variance, `None` where the effect is uninformative.
pub fn v_retro(t: f64, duration: f64, ep: &EffectiveParams) -> Result<Option<f64>> {
    let w = w_retro(t, duration, ep)?;
    Ok((w > 0.0).then(|| 1.0 / w))
}

/// Steady-state retrofilter variance; infinite when nothing is measured.
pub fn v_retro_ss(ep: &EffectiveParams) -> f64 {
    1.0 / ep.filter_riccati().backward_steady_precision()
}

/// Steady state of the full-heterodyne (true state) Riccati equation: a
/// displaced ground state.
pub fn v_true_ss(_ep: &EffectiveParams) -> f64 {
    1.0
}

/// Right-hand side of `v̇_T = −Γv_T + 2Γn_tot − 2Γ(𝒞 + n_th)v_T²`.
pub fn true_riccati_rhs(v: f64, ep: &EffectiveParams) -> f64 {
    ep.true_riccati().rhs(v)
}

/// True-state variance at `t` after starting from the unconditional state.
pub fn v_true(t: f64, ep: &EffectiveParams) -> Result<f64> {
    if t.is_nan() || t < 0.0 {
        return Err(Error::Precondition(format!("v_true needs t >= 0, got {t}")));
    }
    Ok(ep.true_riccati().forward(t, ep.sigma2_uncon()))
}

/// Large-cooperativity approximations of the steady-state variances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SteadyStateApprox {
    pub v_filter: f64,
    pub v_smoothed_true: f64,
    pub v_classical: f64,
    /// Whether the classical smoother is predicted to dip below the ground state.
    pub shup_violation: bool,
}

pub fn ss_approximations(ep: &EffectiveParams) -> SteadyStateApprox {
    let ec = ep.eta * ep.coop;
    if ec <= 0.5 {
        log::warn!("steady-state approximations assume eta*C >> 1/2 (eta*C = {ec:.3})");
    }
    let ratio = (ep.n_tot() / ec).sqrt();
    SteadyStateApprox {
        v_filter: ratio,
        v_smoothed_true: 1.0 + 0.5 * (ratio - 1.0 / ratio),
        v_classical: 0.5 * ratio,
        shup_violation: shup_violation_predicted(ep.eta, ep.coop, ep.n_th),
    }
}

/// `η > 1/4` and `𝒞/n_th > 1/(4η − 1)`.
pub fn shup_violation_predicted(eta: f64, coop: f64, n_th: f64) -> bool {
    eta > 0.25 && coop > n_th / (4.0 * eta - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn reference() -> EffectiveParams {
        effective_params(&PhysicalParams::reference()).unwrap()
    }

    fn rk4<F: Fn(f64) -> f64>(f: F, y0: f64, t: f64, steps: usize) -> f64 {
        let h = t / steps as f64;
        let mut y = y0;
        for _ in 0..steps {
            let k1 = f(y);
            let k2 = f(y + 0.5 * h * k1);
            let k3 = f(y + 0.5 * h * k2);
            let k4 = f(y + h * k3);
            y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        y
    }

    #[test]
    fn feedback_substitution_at_reference_point() {
        let ep = reference();
        assert_relative_eq!(ep.n_th, 33.147, max_relative = 1e-4);
        assert_relative_eq!(ep.coop, 4.2753, max_relative = 1e-4);
        assert_relative_eq!(ep.n_tot(), 37.922, max_relative = 1e-4);
        let p = PhysicalParams::reference();
        assert_relative_eq!(p.coop / p.n_th, ep.coop / ep.n_th, max_relative = 1e-12);
        assert_relative_eq!(ep.gamma_opt(), p.gamma * p.coop, max_relative = 1e-12);
        assert_relative_eq!(ep.gamma_th(), p.gamma * p.n_th, max_relative = 1e-12);
    }

    #[test]
    fn no_feedback_is_identity() {
        let mut p = PhysicalParams::reference();
        p.gamma_fb = None;
        let ep = effective_params(&p).unwrap();
        assert_eq!((ep.gamma, ep.n_th, ep.coop), (p.gamma, p.n_th, p.coop));
        p.gamma_fb = Some(p.gamma);
        let ep = effective_params(&p).unwrap();
        assert_eq!((ep.gamma, ep.n_th, ep.coop), (p.gamma, p.n_th, p.coop));
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = PhysicalParams::reference();
        p.eta = 0.0;
        assert!(effective_params(&p).is_err());
        let mut p = PhysicalParams::reference();
        p.gamma_fb = Some(p.gamma / 2.0);
        assert!(effective_params(&p).is_err());
        let mut p = PhysicalParams::reference();
        p.dt = p.record_duration;
        assert!(effective_params(&p).is_err());
    }

    #[test]
    fn system_matrices_by_hand() {
        let ep = reference();
        let m = system_matrices(&ep);
        assert_relative_eq!(m.drift.0[0][0], -267.04, max_relative = 1e-4);
        assert_relative_eq!(m.diffusion.0[1][1], 4.0506e4, max_relative = 1e-3);
        assert_relative_eq!(m.measurement.0[0][0], 41.66, max_relative = 1e-3);
        assert_eq!(m.cross, Mat2::ZERO);
        assert_eq!(m.drift.0[0][1], 0.0);

        let mut p = PhysicalParams::reference();
        p.coop = 0.0;
        let m = system_matrices(&effective_params(&p).unwrap());
        assert_eq!(m.measurement, Mat2::ZERO);
    }

    #[test]
    fn unconditional_variance() {
        assert_relative_eq!(unconditional_state(&reference()).cov.0[0][0], 75.845, max_relative = 1e-4);
        let mut p = PhysicalParams::reference();
        p.coop = 0.0;
        p.n_th = 0.0;
        let s = unconditional_state(&effective_params(&p).unwrap());
        assert_eq!(s.cov, Mat2::IDENTITY);
        assert_eq!(s.mean, [0.0, 0.0]);
    }

    #[test]
    fn filter_variance_endpoints() {
        let ep = reference();
        assert_relative_eq!(v_filter(0.0, &ep).unwrap(), ep.sigma2_uncon(), max_relative = 1e-14);
        assert_relative_eq!(v_filter_ss(&ep), 4.6800, max_relative = 1e-4);
        assert_eq!(v_filter(1.0, &ep).unwrap(), v_filter_ss(&ep));
        assert!(v_filter(-1e-9, &ep).is_err());
        // fixed point of the Riccati equation
        assert!(ep.filter_riccati().rhs(v_filter_ss(&ep)).abs() < 1e-9);
        // large-cooperativity approximation within 4 %
        let approx = ss_approximations(&ep).v_filter;
        assert_relative_eq!(approx, 4.832, max_relative = 1e-3);
        assert!((approx - v_filter_ss(&ep)) / v_filter_ss(&ep) < 0.04);
    }

    #[test]
    fn no_measurement_limits() {
        let mut p = PhysicalParams::reference();
        p.coop = 0.0;
        let ep = effective_params(&p).unwrap();
        assert_eq!(v_filter_ss(&ep), ep.sigma2_uncon());
        assert_relative_eq!(v_filter(1e-3, &ep).unwrap(), ep.sigma2_uncon(), max_relative = 1e-14);
        assert_eq!(w_retro(0.0, 1e-3, &ep).unwrap(), 0.0);
        assert!(v_retro_ss(&ep).is_infinite());
    }

    #[test]
    fn filter_variance_matches_riccati_integration() {
        let ep = reference();
        let r = ep.filter_riccati();
        for &t in &[1e-6, 2e-5, 1e-4, 3e-4, 7.5e-4] {
            let numeric = rk4(|v| r.rhs(v), ep.sigma2_uncon(), t, 20_000);
            assert_relative_eq!(v_filter(t, &ep).unwrap(), numeric, max_relative = 1e-9);
        }
    }

    #[test]
    fn retro_precision_matches_backward_integration() {
        let ep = reference();
        let (g, n, k) = (ep.gamma, ep.n_tot(), ep.eta * ep.coop);
        let rhs = |w: f64| -g * w - 2.0 * g * n * w * w + 2.0 * g * k;
        let duration = ep.record_duration;
        for &t in &[0.0, 3e-4, 7.0e-4, 7.49e-4] {
            let numeric = rk4(rhs, 0.0, duration - t, 20_000);
            assert_relative_eq!(w_retro(t, duration, &ep).unwrap(), numeric, max_relative = 1e-9);
        }
        // from a huge but finite final variance in covariance form
        let vrhs = |v: f64| g * v + 2.0 * g * n - 2.0 * g * k * v * v;
        let v_num = rk4(vrhs, 1e5, 4e-4, 400_000);
        let v_closed = v_retro(duration - 4e-4, duration, &ep).unwrap().unwrap();
        assert_relative_eq!(v_closed, v_num, max_relative = 1e-5);
    }

    #[test]
    fn retro_variance_endpoints() {
        let ep = reference();
        let d = ep.record_duration;
        assert_eq!(w_retro(d, d, &ep).unwrap(), 0.0);
        assert!(v_retro(d, d, &ep).unwrap().is_none());
        assert!(w_retro(d * 1.0001, d, &ep).is_err());
        assert_relative_eq!(v_retro(0.0, d, &ep).unwrap().unwrap(), 4.98776, max_relative = 1e-5);
        assert_relative_eq!(v_retro_ss(&ep), 4.98773, max_relative = 1e-5);
        let gap = v_retro_ss(&ep) - v_filter_ss(&ep);
        assert_relative_eq!(gap, 1.0 / (2.0 * ep.eta * ep.coop), max_relative = 1e-12);
        assert_relative_eq!(gap, 0.3078, max_relative = 1e-3);
        assert_eq!(w_retro(0.0, 10.0, &ep).unwrap(), 1.0 / v_retro_ss(&ep));
    }

    #[test]
    fn true_state_is_displaced_ground_state() {
        let ep = reference();
        assert_eq!(v_true_ss(&ep), 1.0);
        assert!(true_riccati_rhs(1.0, &ep).abs() < 1e-9);
        assert_relative_eq!(ep.true_riccati().steady_state(), 1.0, max_relative = 1e-12);
        assert_relative_eq!(v_true(0.0, &ep).unwrap(), ep.sigma2_uncon(), max_relative = 1e-14);
        let r = ep.true_riccati();
        let t = 5.0 / r.rate();
        let numeric = rk4(|v| r.rhs(v), ep.sigma2_uncon(), t, 50_000);
        assert_relative_eq!(v_true(t, &ep).unwrap(), numeric, max_relative = 1e-8);
        // relaxes at least as fast as Γ√(1 + 16(𝒞 + n_th) n_tot)
        let excess0 = ep.sigma2_uncon() - 1.0;
        assert!(v_true(t, &ep).unwrap() - 1.0 <= excess0 * (-5.0f64).exp());
    }

    #[test]
    fn steady_state_approximations_and_predicate() {
        let ep = reference();
        let a = ss_approximations(&ep);
        assert!(!a.shup_violation);
        assert!(ep.eta > 0.25);
        assert_relative_eq!(ep.coop / ep.n_th, 0.129, max_relative = 1e-2);
        assert_relative_eq!(1.0 / (4.0 * ep.eta - 1.0), 1.923, max_relative = 1e-3);
        assert_relative_eq!(a.v_classical, 2.4157, max_relative = 1e-4);
        let diff = a.v_smoothed_true - a.v_classical;
        assert!(diff > 0.0);
        assert_relative_eq!(diff, 1.0 - 1.0 / (2.0 * a.v_filter), max_relative = 1e-12);
        assert!(shup_violation_predicted(0.5, 3.0e4, 1.0e4));
        assert!(!shup_violation_predicted(0.25, 1e9, 1.0));
    }

    #[test]
    fn forward_solution_is_monotone() {
        let ep = reference();
        let mut prev = f64::INFINITY;
        for i in 0..2000 {
            let v = v_filter(i as f64 * 1e-6, &ep).unwrap();
            assert!(v <= prev);
            prev = v;
        }
        let rate = ep.filter_riccati().rate();
        assert!((v_filter(20.0 / rate, &ep).unwrap() - v_filter_ss(&ep)).abs() < 1e-7);
    }
}
