use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use qtraj::estimate::{run_filter, run_ltl_filter, run_retrofilter};
use qtraj::ingest::{demodulate, DemodConfig};
use qtraj::model::unconditional_state;
use qtraj::pipeline::{Engine, EnsembleAccumulator, RunConfig};
use qtraj::simulate::{simulate_true_and_record, synthesize_raw};
use qtraj::smooth::{smooth_general, TargetSpec};
use qtraj::PhysicalParams;
use qtraj_bench::{record, reference};

fn estimators(c: &mut Criterion) {
    let ep = reference();
    let rec = record(&ep, 1);
    let warmup: Vec<_> = (2..5).map(|s| record(&ep, s)).collect();
    let init = unconditional_state(&ep);
    let filt = run_filter(&rec, &ep, &init).unwrap();
    let retro = run_retrofilter(&rec, &ep).unwrap();
    let tgt = TargetSpec::ltl(&ep);

    c.bench_function("filter_750us", |b| b.iter(|| run_filter(black_box(&rec), &ep, &init).unwrap()));
    c.bench_function("ltl_filter_4x750us", |b| {
        b.iter(|| run_ltl_filter(black_box(&warmup), black_box(&rec), &ep).unwrap())
    });
    c.bench_function("retrofilter_750us", |b| b.iter(|| run_retrofilter(black_box(&rec), &ep).unwrap()));
    c.bench_function("smooth_750us", |b| {
        b.iter(|| smooth_general(black_box(&filt), black_box(&retro), &tgt).unwrap())
    });
}

fn generation(c: &mut Criterion) {
    let ep = reference();
    let mut seed = 0u64;
    c.bench_function("simulate_750us", |b| {
        b.iter(|| {
            seed += 1;
            simulate_true_and_record(&ep, ep.record_duration, seed).unwrap()
        })
    });
}

fn ingest(c: &mut Criterion) {
    let p = PhysicalParams::reference();
    let ep = reference();
    let rec = record(&ep, 9);
    let raw = synthesize_raw(&rec, p.omega, 5e6, Some(3)).unwrap();
    let cfg = DemodConfig::new(p.omega, p.dt, p.eta);
    c.bench_function("demodulate_750us_at_5MHz", |b| b.iter(|| demodulate(black_box(&raw), &cfg).unwrap()));
}

fn ensemble(c: &mut Criterion) {
    let engine = Engine::new(&RunConfig::reference(64, 7)).unwrap();
    let mut group = c.benchmark_group("ensemble");
    group.sample_size(10);
    group.bench_function("analyse_64_members", |b| {
        b.iter(|| {
            engine
                .reduce(64, || EnsembleAccumulator::new(751, 50), |acc, m| acc.push(&engine, &m, true))
                .unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, estimators, generation, ingest, ensemble);
criterion_main!(benches);
