//! From carrier-band photocurrent to quadrature records.
//!
//! A raw trace is normalised to the shot-noise floor, mixed down with
//! `√2 cos ωt` and `√2 sin ωt`, low-passed by a causal Butterworth filter and
//! stride-decimated to the record step. The record is then cut into analysis
//! windows after discarding the filter start-up. Noise injection degrades a
//! record to a lower effective detection efficiency.

mod butterworth;

pub use butterworth::Butterworth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulate::{normal, rng_from_seed, MeasurementRecord};

/// Default 3-dB bandwidth of the demodulation low-pass, in Hz.
pub const DEFAULT_BANDWIDTH_HZ: f64 = 56.5e3;
/// Default Butterworth order.
pub const DEFAULT_ORDER: usize = 4;
/// Default prefix dropped before segmenting: ten 400 μs filter transients.
pub const DEFAULT_DISCARD_S: f64 = 4e-3;
/// Smallest carrier-to-bandwidth ratio accepted by [`demodulate`].
pub const MIN_CARRIER_TO_BANDWIDTH: f64 = 5.0;

/// Uniformly sampled raw photocurrent.
///
/// `shot_level` is the per-sample variance of the shot-noise floor when known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTrace {
    pub fs: f64,
    pub samples: Vec<f64>,
    pub shot_level: Option<f64>,
}

/// Demodulation settings. Frequencies in Hz except `omega` (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemodConfig {
    pub omega: f64,
    pub bandwidth: f64,
    pub order: usize,
    pub dt: f64,
    pub eta: f64,
}

impl DemodConfig {
    pub fn new(omega: f64, dt: f64, eta: f64) -> Self {
        DemodConfig {
            omega,
            bandwidth: DEFAULT_BANDWIDTH_HZ,
            order: DEFAULT_ORDER,
            dt,
            eta,
        }
    }
}

/// Integer number of raw samples per record sample.
pub fn decimation_ratio(fs: f64, dt: f64) -> Result<usize> {
    let ratio = fs * dt;
    let rounded = ratio.round();
    if rounded < 1.0 || (ratio - rounded).abs() > 1e-6 * rounded {
        return Err(Error::Precondition(format!(
            "fs·dt = {ratio} must be a positive integer"
        )));
    }
    Ok(rounded as usize)
}

/// Rescales so the shot-noise floor has per-sample variance `fs`.
pub fn normalize_shot_noise(raw: &RawTrace, shot_level: f64) -> Result<RawTrace> {
    if !(shot_level > 0.0 && shot_level.is_finite()) {
        return Err(Error::Precondition(format!(
            "shot level must be positive, got {shot_level}"
        )));
    }
    let scale = (raw.fs / shot_level).sqrt();
    Ok(RawTrace {
        fs: raw.fs,
        samples: raw.samples.iter().map(|v| v * scale).collect(),
        shot_level: Some(raw.fs),
    })
}

/// Recovers the quadrature currents from a raw trace.
pub fn demodulate(raw: &RawTrace, cfg: &DemodConfig) -> Result<MeasurementRecord> {
    let carrier_hz = cfg.omega / std::f64::consts::TAU;
    if !(raw.fs > 4.0 * carrier_hz) {
        return Err(Error::Precondition(format!(
            "sample rate {} Hz must exceed four times the carrier {carrier_hz} Hz",
            raw.fs
        )));
    }
    if !(carrier_hz >= MIN_CARRIER_TO_BANDWIDTH * cfg.bandwidth) {
        return Err(Error::Precondition(format!(
            "carrier {carrier_hz} Hz must be at least {MIN_CARRIER_TO_BANDWIDTH} times the bandwidth {} Hz",
            cfg.bandwidth
        )));
    }
    let stride = decimation_ratio(raw.fs, cfg.dt)?;
    if stride > 1 && cfg.bandwidth > 0.5 / cfg.dt {
        return Err(Error::Precondition(format!(
            "bandwidth {} Hz exceeds the record Nyquist frequency {} Hz",
            cfg.bandwidth,
            0.5 / cfg.dt
        )));
    }
    if let Some(k) = raw.samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            module: "ingest",
            sample: k,
        });
    }
    let mut lp1 = Butterworth::new(cfg.order, cfg.bandwidth, raw.fs)?;
    let mut lp2 = lp1.clone();
    let sqrt2 = std::f64::consts::SQRT_2;
    let n = raw.samples.len() / stride;
    let mut i1 = Vec::with_capacity(n);
    let mut i2 = Vec::with_capacity(n);
    for (m, &x) in raw.samples.iter().take(n * stride).enumerate() {
        let (s, c) = (cfg.omega * (m as f64 / raw.fs)).sin_cos();
        let y1 = lp1.process(sqrt2 * c * x);
        let y2 = lp2.process(sqrt2 * s * x);
        // keep the last raw sample of each hold interval
        if (m + 1) % stride == 0 {
            i1.push(y1);
            i2.push(y2);
        }
    }
    Ok(MeasurementRecord {
        dt: cfg.dt,
        i1,
        i2,
        eta_effective: cfg.eta,
        seed: 0,
    })
}

/// Drops `discard` seconds and cuts the rest into windows of `record_len` seconds.
pub fn segment(rec: &MeasurementRecord, discard: f64, record_len: f64) -> Result<Vec<MeasurementRecord>> {
    if !(discard >= 0.0) || !(record_len >= rec.dt) {
        return Err(Error::Precondition(format!(
            "need discard >= 0 and record length >= dt, got {discard} and {record_len}"
        )));
    }
    let skip = (discard / rec.dt).round() as usize;
    let len = (record_len / rec.dt).round() as usize;
    if rec.len() < skip + len {
        log::warn!(
            "record of {} samples too short for a {len}-sample window after discarding {skip}",
            rec.len()
        );
        return Ok(Vec::new());
    }
    Ok(rec.slice(skip, rec.len()).chunks(len))
}

/// Adds white noise so the record corresponds to efficiency `eta_new`.
///
/// The added noise has per-sample variance `σ²/dt` with
/// `σ² = eta_old/eta_new − 1`, and the sum is divided by `√(1 + σ²)` to
/// restore a unit noise floor.
pub fn inject_noise(rec: &MeasurementRecord, eta_old: f64, eta_new: f64, seed: u64) -> Result<MeasurementRecord> {
    if !(eta_new > 0.0 && eta_new <= eta_old && eta_old <= 1.0) {
        return Err(Error::Precondition(format!(
            "noise injection needs 0 < eta_new <= eta_old <= 1, got {eta_new} and {eta_old}"
        )));
    }
    if (rec.eta_effective - eta_old).abs() > 1e-9 {
        log::warn!(
            "record carries eta = {}, injecting as if it were {eta_old}",
            rec.eta_effective
        );
    }
    let var = eta_old / eta_new - 1.0;
    if var == 0.0 {
        return Ok(MeasurementRecord {
            eta_effective: eta_new,
            ..rec.clone()
        });
    }
    let sd = (var / rec.dt).sqrt();
    let renorm = 1.0 / (1.0 + var).sqrt();
    let mut rng = rng_from_seed(seed);
    let mut add = |x: &f64| renorm * (x + sd * normal(&mut rng));
    let i1: Vec<f64> = rec.i1.iter().map(&mut add).collect();
    let i2: Vec<f64> = rec.i2.iter().map(&mut add).collect();
    Ok(MeasurementRecord {
        dt: rec.dt,
        i1,
        i2,
        eta_effective: eta_new,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    const OMEGA: f64 = TAU * 1.04e6;

    fn tone(a: f64, b: f64, n: usize, fs: f64) -> RawTrace {
        let sqrt2 = std::f64::consts::SQRT_2;
        RawTrace {
            fs,
            samples: (0..n)
                .map(|m| {
                    let (s, c) = (OMEGA * m as f64 / fs).sin_cos();
                    sqrt2 * (a * c + b * s)
                })
                .collect(),
            shot_level: None,
        }
    }

    #[test]
    fn pure_tone_demodulates_to_its_quadratures() {
        let raw = tone(3.0, -1.5, 5 * 1000, 5e6);
        let rec = demodulate(&raw, &DemodConfig::new(OMEGA, 1e-6, 1.0)).unwrap();
        assert_eq!(rec.len(), 1000);
        for k in 500..1000 {
            assert!((rec.i1[k] - 3.0).abs() < 1e-3, "{}", rec.i1[k]);
            assert!((rec.i2[k] + 1.5).abs() < 1e-3);
        }
    }

    #[test]
    fn preconditions() {
        let raw = tone(1.0, 0.0, 100, 5e6);
        let mut cfg = DemodConfig::new(OMEGA, 1e-6, 1.0);
        cfg.bandwidth = 300e3;
        assert!(demodulate(&raw, &cfg).is_err());
        let slow = RawTrace { fs: 4e6, ..raw.clone() };
        assert!(demodulate(&slow, &DemodConfig::new(OMEGA, 1e-6, 1.0)).is_err());
        assert!(demodulate(&raw, &DemodConfig::new(OMEGA, 1.1e-6, 1.0)).is_err());
    }

    #[test]
    fn demodulation_is_linear() {
        let n = 5 * 400;
        let x: Vec<f64> = (0..n).map(|m| ((m * 37) % 101) as f64 - 50.0).collect();
        let y: Vec<f64> = (0..n).map(|m| ((m * 13) % 29) as f64).collect();
        let cfg = DemodConfig::new(OMEGA, 1e-6, 1.0);
        let mk = |v: Vec<f64>| RawTrace { fs: 5e6, samples: v, shot_level: None };
        let dx = demodulate(&mk(x.clone()), &cfg).unwrap();
        let dy = demodulate(&mk(y.clone()), &cfg).unwrap();
        let comb: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        let dc = demodulate(&mk(comb), &cfg).unwrap();
        for k in 0..dc.len() {
            let expect = 2.0 * dx.i1[k] - 0.5 * dy.i1[k];
            assert!((dc.i1[k] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn normalisation_absorbs_scale() {
        let raw = RawTrace { fs: 10.0, samples: vec![1.0, -2.0, 3.0], shot_level: None };
        let same = normalize_shot_noise(&raw, 10.0).unwrap();
        assert_eq!(same.samples, raw.samples);
        let scaled = RawTrace { samples: raw.samples.iter().map(|v| 7.0 * v).collect(), ..raw.clone() };
        let a = normalize_shot_noise(&scaled, 490.0).unwrap();
        for (u, v) in a.samples.iter().zip(&same.samples) {
            assert!((u - v).abs() < 1e-12);
        }
        assert!(normalize_shot_noise(&raw, 0.0).is_err());
    }

    #[test]
    fn segmentation_counts_and_contiguity() {
        let n = 4000 + 2500;
        let i1: Vec<f64> = (0..n).map(|k| k as f64).collect();
        let rec = MeasurementRecord::new(1e-6, i1, vec![0.0; n], 0.38, 0).unwrap();
        let parts = segment(&rec, 4e-3, 1e-3).unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].i1[0], 4000.0);
        assert_eq!(parts[1].i1[0], parts[0].i1[999] + 1.0);
        assert!(segment(&rec, 6e-3, 1e-3).unwrap().is_empty());
    }

    #[test]
    fn injection_identity_and_refusal() {
        let rec = MeasurementRecord::new(1e-6, vec![1.0; 10], vec![2.0; 10], 0.38, 0).unwrap();
        let same = inject_noise(&rec, 0.38, 0.38, 1).unwrap();
        assert_eq!(same.i1, rec.i1);
        assert_eq!(same.eta_effective, 0.38);
        assert!(inject_noise(&rec, 0.38, 0.5, 1).is_err());
        let out = inject_noise(&rec, 0.38, 0.10, 1).unwrap();
        assert_eq!(out.eta_effective, 0.10);
    }

    #[test]
    fn injected_floor_stays_at_unit_density() {
        let n = 200_000;
        let mut rng = rng_from_seed(3);
        let white: Vec<f64> = (0..n).map(|_| normal(&mut rng) * 1e3).collect();
        let rec = MeasurementRecord::new(1e-6, white.clone(), white, 0.38, 0).unwrap();
        let out = inject_noise(&rec, 0.38, 0.10, 11).unwrap();
        let var = out.i1.iter().map(|v| v * v).sum::<f64>() / n as f64;
        assert!((var * 1e-6 - 1.0).abs() < 0.02);
    }
}
