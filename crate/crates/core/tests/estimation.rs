use qtraj::estimate::{run_filter, run_filter_scaled_gain};
use qtraj::metrics::{self, EstimatorKind, RecordCorrelation};
use qtraj::model::{self, effective_params, unconditional_state};
use qtraj::pipeline::{Engine, EnsembleAccumulator, RunConfig};
use qtraj::simulate::{self, member_seed, Generator};
use qtraj::smooth::TargetSpec;
use qtraj::{EffectiveParams, PhysicalParams, TrajectoryKind};

fn reference() -> EffectiveParams {
    effective_params(&PhysicalParams::reference()).unwrap()
}

#[test]
fn innovations_are_white_with_unit_variance() {
    let ep = reference();
    let bundle = simulate::simulate_true_and_record(&ep, 0.05, 17).unwrap();
    let rec = &bundle.record;
    let f = run_filter(rec, &ep, &unconditional_state(&ep)).unwrap();
    let c = ep.coupling();
    let sq = ep.dt.sqrt();
    let nu: Vec<f64> = (0..rec.len())
        .flat_map(|k| [(rec.i1[k] - c * f.means[k][0]) * sq, (rec.i2[k] - c * f.means[k][1]) * sq])
        .collect();
    let n = nu.len() as f64;
    let var = nu.iter().map(|x| x * x).sum::<f64>() / n;
    assert!((var - 1.0).abs() < 0.03, "innovation variance {var}");
    // same-quadrature lags are two entries apart in the interleaved sequence
    for lag in 1..=5 {
        let r: f64 = nu.iter().zip(&nu[2 * lag..]).map(|(a, b)| a * b).sum::<f64>() / n;
        assert!(r.abs() < 4.0 / n.sqrt(), "lag {lag}: {r}");
    }
}

#[test]
fn generators_give_the_same_filter_statistics() {
    let ep = reference();
    let n = 600;
    let mut z_end = Vec::new();
    for generator in [Generator::TrueState, Generator::Surrogate] {
        let bundles = simulate::ensemble(generator, &ep, ep.record_duration, n, 99).unwrap();
        let trajs: Vec<_> = bundles
            .iter()
            .map(|b| run_filter(&b.record, &ep, &unconditional_state(&ep)).unwrap())
            .collect();
        let c = metrics::consistency_check(&trajs, ep.sigma2_uncon(), RecordCorrelation::Independent).unwrap();
        let z = c.z_scores();
        for k in [100, 375, 750] {
            assert!(z[k].abs() < 3.5, "{generator:?} t index {k}: z = {}", z[k]);
        }
        z_end.push(c.var_ens[750]);
    }
    let sev = metrics::sev(z_end[0], 2.0 * n as f64);
    assert!((z_end[0] - z_end[1]).abs() < 4.0 * sev);
}

#[test]
fn optimal_gain_minimises_error_against_true_state() {
    let ep = reference();
    let scales = [0.5, 1.0, 2.0];
    let mut mse = [0.0; 3];
    for k in 0..150 {
        let b = simulate::simulate_true_and_record(&ep, ep.record_duration, member_seed(5, k)).unwrap();
        for (i, s) in scales.iter().enumerate() {
            let f = run_filter_scaled_gain(&b.record, &ep, &unconditional_state(&ep), *s).unwrap();
            for j in 300..=750 {
                let d = [f.means[j][0] - b.true_mean[j][0], f.means[j][1] - b.true_mean[j][1]];
                mse[i] += d[0] * d[0] + d[1] * d[1];
            }
        }
    }
    assert!(mse[1] < mse[0] && mse[1] < mse[2], "{mse:?}");
}

fn small_engine(n: usize, warmup: usize, seed: u64) -> Engine {
    let mut cfg = RunConfig::reference(n, seed);
    cfg.ensemble.warmup_records = warmup;
    Engine::new(&cfg).unwrap()
}

#[test]
fn about_one_third_of_variance_estimates_fall_outside_one_error_bar() {
    let (ensembles, size, probe) = (200, 50, 375);
    let engine = small_engine(ensembles * size, 0, 31);
    let mut outside = 0;
    for e in 0..ensembles {
        let mut pair = metrics::PairAccumulator::new(751);
        let mut v_s = 0.0;
        for k in e * size..(e + 1) * size {
            let m = engine.member(k).unwrap();
            v_s = m.smoothed[1].variances[probe];
            pair.push_variance(&m.smoothed[1].means);
        }
        let var = pair.pooled_covariance()[probe];
        let theory = engine.ep.sigma2_uncon() - v_s;
        let sev = metrics::sev(var, 2.0 * size as f64);
        outside += usize::from((var - theory).abs() > sev);
    }
    let frac = outside as f64 / ensembles as f64;
    assert!((0.22..=0.42).contains(&frac), "fraction outside 1 SEV = {frac}");
}

#[test]
fn classical_and_std_delta_statistics_match_theory() {
    let engine = small_engine(2000, 3, 4242);
    let acc = engine
        .reduce(2000, || EnsembleAccumulator::new(751, 0), |acc, m| acc.push(&engine, &m, false))
        .unwrap();
    let report = acc.finish(&engine, RecordCorrelation::Independent, 0.3).unwrap();
    let mid = 375;
    for target in [TrajectoryKind::True, TrajectoryKind::Ltl] {
        let quantum = if target == TrajectoryKind::True { TrajectoryKind::SmoothedTrue } else { TrajectoryKind::SmoothedLtl };
        let cs = report.hs(target, TrajectoryKind::ClassicalSmoothed).unwrap();
        let qs = report.hs(target, quantum).unwrap();
        assert!((cs.mean[mid] - cs.theory[mid]).abs() < 3.0 * cs.sem[mid], "{target}: classical HS");
        assert!(cs.theory[mid] > qs.theory[mid]);
        for (d, th) in report.stats.deltas.iter().zip(&report.delta_theory) {
            for k in [0, 200, mid, 600] {
                assert!((d.std[k] - th[k]).abs() < 3.0 * d.se[k] + 1e-12, "{}|{} at {k}", d.estimator, d.target);
            }
        }
    }
}

#[test]
fn smoothing_error_never_exceeds_filtering_or_classical() {
    let ep = reference();
    let duration = ep.record_duration;
    for tgt in [TargetSpec::ltl(&ep), TargetSpec::true_state()] {
        for i in 0..=150 {
            let t = duration * i as f64 / 150.0;
            let s = metrics::std_delta_theory(&ep, EstimatorKind::Smoothed, &tgt, t).unwrap();
            let f = metrics::std_delta_theory(&ep, EstimatorKind::Filtered, &tgt, t).unwrap();
            let c = metrics::std_delta_theory(&ep, EstimatorKind::Classical, &tgt, t).unwrap();
            assert!(s <= f + 1e-12 && s <= c + 1e-12, "t = {t}: S {s} F {f} C {c}");
        }
    }
    assert!(model::v_filter_ss(&ep) > 1.0);
}
