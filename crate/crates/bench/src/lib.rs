//! Shared fixtures for the benchmarks.

use qtraj::model::effective_params;
use qtraj::simulate::simulate_true_and_record;
use qtraj::{EffectiveParams, MeasurementRecord, PhysicalParams};

pub fn reference() -> EffectiveParams {
    effective_params(&PhysicalParams::reference()).expect("reference parameters are valid")
}

/// One reference-length record from the true-state generator.
pub fn record(ep: &EffectiveParams, seed: u64) -> MeasurementRecord {
    simulate_true_and_record(ep, ep.record_duration, seed)
        .expect("reference step is stable")
        .record
}
