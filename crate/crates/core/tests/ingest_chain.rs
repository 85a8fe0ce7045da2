use qtraj::estimate::run_filter;
use qtraj::ingest::{demodulate, inject_noise, normalize_shot_noise, segment, Butterworth, DemodConfig};
use qtraj::metrics::{self, RecordCorrelation};
use qtraj::model::{effective_params, unconditional_state};
use qtraj::simulate::{self, member_seed, synthesize_raw, Generator};
use qtraj::{MeasurementRecord, PhysicalParams, RawTrace};

const FS: f64 = 5e6;

fn silent_record(n: usize) -> MeasurementRecord {
    MeasurementRecord::new(1e-6, vec![0.0; n], vec![0.0; n], 0.38, 0).unwrap()
}

#[test]
fn demodulated_shot_noise_matches_filter_bandwidth() {
    let p = PhysicalParams::reference();
    let raw = synthesize_raw(&silent_record(40_000), p.omega, FS, Some(3)).unwrap();
    let cfg = DemodConfig::new(p.omega, p.dt, p.eta);
    let out = demodulate(&raw, &cfg).unwrap();
    let skip = 400;
    let var = out.i1[skip..].iter().chain(&out.i2[skip..]).map(|x| x * x).sum::<f64>()
        / (2 * (out.len() - skip)) as f64;
    let bw = Butterworth::new(cfg.order, cfg.bandwidth, FS).unwrap();
    let expected = 2.0 * bw.analog_noise_bandwidth();
    assert!((var / expected - 1.0).abs() < 0.05, "variance {var} vs {expected}");
}

/// Two-sided periodogram averaged over segments and the given bins.
fn mean_periodogram(x: &[f64], fs: f64, seg: usize, bins: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for chunk in x.chunks_exact(seg) {
        for &b in bins {
            let w = std::f64::consts::TAU * b as f64 / seg as f64;
            let (mut re, mut im) = (0.0, 0.0);
            for (n, v) in chunk.iter().enumerate() {
                let (s, c) = (w * n as f64).sin_cos();
                re += v * c;
                im -= v * s;
            }
            total += (re * re + im * im) / (seg as f64 * fs);
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn normalised_floor_has_unit_density() {
    let p = PhysicalParams::reference();
    let raw = synthesize_raw(&silent_record(50_000), p.omega, FS, Some(8)).unwrap();
    let scaled = RawTrace {
        fs: raw.fs,
        samples: raw.samples.iter().map(|v| 3.7 * v).collect(),
        shot_level: None,
    };
    let norm = normalize_shot_noise(&scaled, 3.7 * 3.7 * FS).unwrap();
    // bins between 0.1 and 0.4 of the sample rate, away from the carrier at 0.208
    let bins: Vec<usize> = (0..40).map(|i| 100 + 7 * i).filter(|b| (*b as i64 - 208).abs() > 20).collect();
    let psd = mean_periodogram(&norm.samples, FS, 1000, &bins);
    assert!((psd - 1.0).abs() < 0.05, "floor {psd}");
}

#[test]
fn impulse_response_vanishes_within_400_us() {
    for order in [2, 4, 6] {
        let bw = Butterworth::new(order, 56.5e3, FS).unwrap();
        let h = bw.impulse_response(5000);
        let peak = h.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let tail = h[2000..].iter().fold(0.0f64, |a, x| a.max(x.abs()));
        assert!(tail < 1e-3 * peak, "order {order}");
    }
}

#[test]
fn injected_records_filter_at_the_lower_efficiency() {
    let ep = effective_params(&PhysicalParams::reference()).unwrap();
    let low = ep.with_eta(0.1).unwrap();
    let n = 800;
    let bundles = simulate::ensemble(Generator::TrueState, &ep, 1e-3, n, 12).unwrap();
    let trajs: Vec<_> = bundles
        .iter()
        .enumerate()
        .map(|(k, b)| {
            let rec = inject_noise(&b.record, 0.38, 0.1, member_seed(77, k as u64)).unwrap();
            run_filter(&rec, &low, &unconditional_state(&low)).unwrap()
        })
        .collect();
    assert!((trajs[0].variances[1000] - 8.853).abs() < 0.01);
    let c = metrics::consistency_check(&trajs, low.sigma2_uncon(), RecordCorrelation::Independent).unwrap();
    let z = c.z_scores();
    for k in [100, 500, 1000] {
        assert!(z[k].abs() < 3.5, "index {k}: z = {}", z[k]);
    }
}

#[test]
fn raw_stream_segments_into_consecutive_records() {
    let p = PhysicalParams::reference();
    let rec = simulate::simulate_true_and_record(&effective_params(&p).unwrap(), 6e-3, 4).unwrap().record;
    let raw = synthesize_raw(&rec, p.omega, FS, None).unwrap();
    let out = demodulate(&raw, &DemodConfig::new(p.omega, p.dt, p.eta)).unwrap();
    assert_eq!(out.len(), rec.len());
    let segs = segment(&out, 4e-3, 750e-6).unwrap();
    assert_eq!(segs.len(), 2);
    assert_eq!(segs[0].i1[..], out.i1[4000..4750]);
    assert_eq!(segs[1].i2[..], out.i2[4750..5500]);
    assert!(segment(&out, 5.5e-3, 750e-6).unwrap().is_empty());
}
