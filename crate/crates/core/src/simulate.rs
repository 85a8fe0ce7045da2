//! Synthetic measurement records for the monitored oscillator.
//!
//! Two generators are provided. [`simulate_true_and_record`] integrates the
//! mean of the full-heterodyne true state, a coherent state with unit
//! variance kicked by the observed and unobserved baths, and emits the record
//! seen by the observer. [`simulate_surrogate_record`] drives a classical
//! Ornstein-Uhlenbeck process with the unconditional diffusion instead; its
//! records have the same statistics but no true state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::RawTrace;
use crate::model::EffectiveParams;

/// Largest accepted `dt` times the fastest relaxation rate of the true state.
pub const MAX_STIFFNESS: f64 = 0.1;

/// Sampled quadrature currents in shot-noise units.
///
/// Sample `k` is the current averaged over `[k dt, (k+1) dt)`, so its noise
/// part has variance `1/dt`; `i dt` is the corresponding Wiener increment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub dt: f64,
    pub i1: Vec<f64>,
    pub i2: Vec<f64>,
    pub eta_effective: f64,
    pub seed: u64,
}

impl MeasurementRecord {
    pub fn new(dt: f64, i1: Vec<f64>, i2: Vec<f64>, eta_effective: f64, seed: u64) -> Result<Self> {
        let rec = MeasurementRecord {
            dt,
            i1,
            i2,
            eta_effective,
            seed,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Precondition(format!("record dt must be positive, got {}", self.dt)));
        }
        if self.i1.len() != self.i2.len() {
            return Err(Error::Precondition(format!(
                "quadrature lengths differ: {} vs {}",
                self.i1.len(),
                self.i2.len()
            )));
        }
        if let Some(k) = self.first_non_finite() {
            return Err(Error::NonFinite {
                module: "record",
                sample: k,
            });
        }
        Ok(())
    }

    pub(crate) fn first_non_finite(&self) -> Option<usize> {
        self.i1
            .iter()
            .zip(&self.i2)
            .position(|(a, b)| !a.is_finite() || !b.is_finite())
    }

    pub fn len(&self) -> usize {
        self.i1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.i1.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 * self.dt
    }

    /// Start time of every sample.
    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| k as f64 * self.dt).collect()
    }

    /// Samples `[start, end)` as a new record.
    pub fn slice(&self, start: usize, end: usize) -> MeasurementRecord {
        MeasurementRecord {
            dt: self.dt,
            i1: self.i1[start..end].to_vec(),
            i2: self.i2[start..end].to_vec(),
            eta_effective: self.eta_effective,
            seed: self.seed,
        }
    }

    /// Splits into consecutive windows of `len` samples, dropping any remainder.
    pub fn chunks(&self, len: usize) -> Vec<MeasurementRecord> {
        (0..self.len() / len)
            .map(|c| self.slice(c * len, (c + 1) * len))
            .collect()
    }
}

/// A record together with the hidden true-state mean.
///
/// `times` and `true_mean` live on the `n + 1` grid points bracketing the
/// `n` record samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthBundle {
    pub times: Vec<f64>,
    pub true_mean: Vec<[f64; 2]>,
    pub record: MeasurementRecord,
}

impl TruthBundle {
    /// Grid points `[start, end]` and the samples between them.
    pub fn slice(&self, start: usize, end: usize) -> TruthBundle {
        let t0 = self.times[start];
        TruthBundle {
            times: self.times[start..=end].iter().map(|t| t - t0).collect(),
            true_mean: self.true_mean[start..=end].to_vec(),
            record: self.record.slice(start, end),
        }
    }
}

/// Which process generates the record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    TrueState,
    Surrogate,
}

/// Seed of ensemble member `index`, derived from `base_seed` by a counter.
pub fn member_seed(base_seed: u64, index: u64) -> u64 {
    splitmix64(base_seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[inline]
pub(crate) fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn sample_count(ep: &EffectiveParams, duration: f64) -> Result<usize> {
    if !(duration >= ep.dt * (1.0 - 1e-9)) {
        return Err(Error::Precondition(format!(
            "duration {duration} is shorter than dt {}",
            ep.dt
        )));
    }
    Ok((duration / ep.dt).round() as usize)
}

fn check_step(ep: &EffectiveParams) -> Result<()> {
    let stiffness = ep.dt * ep.true_riccati().rate();
    if stiffness > MAX_STIFFNESS {
        return Err(Error::StepTooLarge {
            stiffness,
            limit: MAX_STIFFNESS,
        });
    }
    Ok(())
}

/// Integrates the true-state mean and the observer's record over `duration`.
///
/// The mean starts from the stationary distribution `N(0, (2 n_tot − 1) I)`,
/// so every grid point has the unconditional marginal.
pub fn simulate_true_and_record(ep: &EffectiveParams, duration: f64, seed: u64) -> Result<TruthBundle> {
    check_step(ep)?;
    let n = sample_count(ep, duration)?;
    let mut rng = rng_from_seed(seed);
    let dt = ep.dt;
    let sqdt = dt.sqrt();
    let decay = (-0.5 * ep.gamma * dt).exp();
    let c = ep.coupling();
    let unobserved_opt = (2.0 * (1.0 - ep.eta) * ep.gamma * ep.coop).sqrt();
    let thermal = (2.0 * ep.gamma * ep.n_th).sqrt();
    let spread = (ep.sigma2_uncon() - 1.0).sqrt();

    let mut x = [spread * normal(&mut rng), spread * normal(&mut rng)];
    let mut true_mean = Vec::with_capacity(n + 1);
    let mut i1 = Vec::with_capacity(n);
    let mut i2 = Vec::with_capacity(n);
    true_mean.push(x);
    for _ in 0..n {
        let mut current = [0.0; 2];
        for (j, xj) in x.iter_mut().enumerate() {
            let dw_obs = sqdt * normal(&mut rng);
            let dw_opt = sqdt * normal(&mut rng);
            let dw_th = sqdt * normal(&mut rng);
            current[j] = c * *xj + dw_obs / dt;
            *xj = decay * *xj + c * dw_obs + unobserved_opt * dw_opt + thermal * dw_th;
        }
        i1.push(current[0]);
        i2.push(current[1]);
        true_mean.push(x);
    }
    Ok(TruthBundle {
        times: (0..=n).map(|k| k as f64 * dt).collect(),
        true_mean,
        record: MeasurementRecord {
            dt,
            i1,
            i2,
            eta_effective: ep.eta,
            seed,
        },
    })
}

/// Classical surrogate: `dx = A x dt + √D dW`, `I dt = C x dt + dW'`.
///
/// Returns the hidden process on the `n + 1` grid points and the record.
pub fn simulate_surrogate_record(
    ep: &EffectiveParams,
    duration: f64,
    seed: u64,
) -> Result<(Vec<[f64; 2]>, MeasurementRecord)> {
    check_step(ep)?;
    let n = sample_count(ep, duration)?;
    let mut rng = rng_from_seed(seed);
    let dt = ep.dt;
    let decay = (-0.5 * ep.gamma * dt).exp();
    // exact discretisation of the Ornstein-Uhlenbeck step
    let step_sd = (ep.sigma2_uncon() * (1.0 - decay * decay)).sqrt();
    let c = ep.coupling();
    let noise_sd = 1.0 / dt.sqrt();
    let spread = ep.sigma2_uncon().sqrt();

    let mut x = [spread * normal(&mut rng), spread * normal(&mut rng)];
    let mut hidden = Vec::with_capacity(n + 1);
    let mut i1 = Vec::with_capacity(n);
    let mut i2 = Vec::with_capacity(n);
    hidden.push(x);
    for _ in 0..n {
        let mut current = [0.0; 2];
        for (j, xj) in x.iter_mut().enumerate() {
            current[j] = c * *xj + noise_sd * normal(&mut rng);
            *xj = decay * *xj + step_sd * normal(&mut rng);
        }
        i1.push(current[0]);
        i2.push(current[1]);
        hidden.push(x);
    }
    let record = MeasurementRecord {
        dt,
        i1,
        i2,
        eta_effective: ep.eta,
        seed,
    };
    Ok((hidden, record))
}

/// Generates `n_records` independent members of `duration` each.
///
/// The surrogate's hidden process is returned in the `true_mean` slot. Output
/// order and content depend only on `base_seed`, not on the thread count.
pub fn ensemble(
    generator: Generator,
    ep: &EffectiveParams,
    duration: f64,
    n_records: usize,
    base_seed: u64,
) -> Result<Vec<TruthBundle>> {
    (0..n_records)
        .into_par_iter()
        .map(|k| {
            let seed = member_seed(base_seed, k as u64);
            match generator {
                Generator::TrueState => simulate_true_and_record(ep, duration, seed),
                Generator::Surrogate => {
                    let (hidden, record) = simulate_surrogate_record(ep, duration, seed)?;
                    Ok(TruthBundle {
                        times: (0..=record.len()).map(|i| i as f64 * ep.dt).collect(),
                        true_mean: hidden,
                        record,
                    })
                }
            }
        })
        .collect()
}

/// Modulates a record onto a carrier at `omega` (rad/s), sampled at `fs` Hz.
///
/// Each quadrature sample is held for `fs·dt` carrier samples and the raw
/// signal is `I₁√2 cos ωt + I₂√2 sin ωt`, so mixing with `√2 cos`, `√2 sin`
/// and low-pass filtering returns the record at unit gain. With
/// `shot_noise_seed` set, white noise of per-sample variance `fs` (unit
/// spectral density) is added.
pub fn synthesize_raw(
    record: &MeasurementRecord,
    omega: f64,
    fs: f64,
    shot_noise_seed: Option<u64>,
) -> Result<RawTrace> {
    let carrier_hz = omega / std::f64::consts::TAU;
    if !(fs > 4.0 * carrier_hz) {
        return Err(Error::Precondition(format!(
            "sample rate {fs} Hz must exceed four times the carrier {carrier_hz} Hz"
        )));
    }
    let hold = crate::ingest::decimation_ratio(fs, record.dt)?;
    let mut rng = shot_noise_seed.map(rng_from_seed);
    let noise_sd = fs.sqrt();
    let n = record.len() * hold;
    let mut samples = Vec::with_capacity(n);
    let sqrt2 = std::f64::consts::SQRT_2;
    for m in 0..n {
        let k = m / hold;
        let phase = omega * (m as f64 / fs);
        let (s, c) = phase.sin_cos();
        let mut v = sqrt2 * (record.i1[k] * c + record.i2[k] * s);
        if let Some(rng) = rng.as_mut() {
            v += noise_sd * normal(rng);
        }
        samples.push(v);
    }
    Ok(RawTrace {
        fs,
        samples,
        shot_level: shot_noise_seed.map(|_| fs),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{effective_params, PhysicalParams};

    fn reference() -> EffectiveParams {
        effective_params(&PhysicalParams::reference()).unwrap()
    }

    #[test]
    fn member_seeds_are_distinct_and_stable() {
        let seeds: Vec<u64> = (0..1000).map(|k| member_seed(7, k)).collect();
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), seeds.len());
        assert_eq!(member_seed(7, 3), seeds[3]);
        assert_ne!(member_seed(8, 3), seeds[3]);
    }

    #[test]
    fn reference_step_is_accepted_and_coarse_step_refused() {
        let ep = reference();
        assert!(simulate_true_and_record(&ep, 1e-5, 1).is_ok());
        let stiff = ep.dt * ep.true_riccati().rate();
        assert!((stiff - 0.08).abs() < 0.01);
        let coarse = EffectiveParams { dt: 5e-6, ..ep };
        assert!(matches!(
            simulate_true_and_record(&coarse, 1e-4, 1),
            Err(Error::StepTooLarge { .. })
        ));
    }

    #[test]
    fn shapes_and_determinism() {
        let ep = reference();
        let a = simulate_true_and_record(&ep, 750e-6, 42).unwrap();
        let b = simulate_true_and_record(&ep, 750e-6, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.record.len(), 750);
        assert_eq!(a.true_mean.len(), 751);
        assert_eq!(a.times.len(), 751);
        let c = simulate_true_and_record(&ep, 750e-6, 43).unwrap();
        assert_ne!(a.record.i1, c.record.i1);
        assert!(a.record.validate().is_ok());
    }

    #[test]
    fn no_coupling_gives_white_record() {
        let mut p = PhysicalParams::reference();
        p.coop = 0.0;
        let ep = effective_params(&p).unwrap();
        let (_, rec) = simulate_surrogate_record(&ep, 0.2, 5).unwrap();
        let n = rec.len() as f64;
        let var = rec.i1.iter().map(|v| v * v).sum::<f64>() / n;
        assert!((var * ep.dt - 1.0).abs() < 4.0 * (2.0 / n).sqrt());
    }

    #[test]
    fn degenerate_ground_state_case() {
        let mut p = PhysicalParams::reference();
        p.coop = 0.0;
        p.n_th = 0.0;
        p.eta = 1.0;
        let ep = effective_params(&p).unwrap();
        let b = simulate_true_and_record(&ep, 1e-3, 9).unwrap();
        // the unconditional state is the ground state, so the true mean never moves
        assert!(b.true_mean.iter().all(|m| m[0] == 0.0 && m[1] == 0.0));
    }

    #[test]
    fn chunks_drop_remainder() {
        let rec = MeasurementRecord::new(1.0, vec![0.0; 25], vec![0.0; 25], 1.0, 0).unwrap();
        let parts = rec.chunks(10);
        assert_eq!(parts.len(), 2);
        assert!(parts.iter().all(|p| p.len() == 10));
    }

    #[test]
    fn validation_reports_first_bad_sample() {
        let mut i1 = vec![0.0; 10];
        i1[6] = f64::NAN;
        let err = MeasurementRecord::new(1.0, i1, vec![0.0; 10], 1.0, 0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { sample: 6, .. }));
        assert!(MeasurementRecord::new(1.0, vec![0.0; 3], vec![0.0; 4], 1.0, 0).is_err());
    }

    #[test]
    fn synthesized_constant_is_a_cosine() {
        let rec = MeasurementRecord::new(1e-6, vec![2.0; 4], vec![0.0; 4], 1.0, 0).unwrap();
        let omega = std::f64::consts::TAU * 1.0e6;
        let raw = synthesize_raw(&rec, omega, 5e6, None).unwrap();
        assert_eq!(raw.samples.len(), 20);
        for (m, v) in raw.samples.iter().enumerate() {
            let expect = 2.0 * std::f64::consts::SQRT_2 * (omega * m as f64 / 5e6).cos();
            assert!((v - expect).abs() < 1e-12);
        }
        assert!(synthesize_raw(&rec, omega, 3e6, None).is_err());
    }
}
