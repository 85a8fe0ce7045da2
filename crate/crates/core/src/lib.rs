//! State estimation for a continuously monitored mechanical oscillator.
//!
//! The oscillator is a linear-Gaussian quantum system observed by
//! heterodyne detection of both quadratures. Given measurement records it
//! computes filtered states (past data), retrofiltered effects (future
//! data) and smoothed states that combine the two for a chosen Gaussian
//! target, together with the classical smoother for comparison.
//!
//! * [`model`]: parameters, system matrices and the closed-form covariances.
//! * [`simulate`]: synthetic records with a hidden true state.
//! * [`estimate`]: filter and retrofilter recursions for the means.
//! * [`smooth`]: quantum and classical smoothing.
//! * [`metrics`]: ensemble consistency, Hilbert-Schmidt distances, VACF.
//! * [`ingest`]: demodulation of raw carrier traces and noise injection.
//! * [`pipeline`]: config-driven runs used by the command-line tool.
//! * [`validation`]: the acceptance checks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimate;
pub mod ingest;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod simulate;
pub mod smooth;
pub mod validation;

pub use error::{Error, Result};
pub use estimate::{EffectState, EffectTrajectory, Trajectory, TrajectoryKind};
pub use ingest::RawTrace;
pub use linalg::Mat2;
pub use metrics::{EnsembleStats, VacfResult};
pub use model::{EffectiveParams, GaussianState, PhysicalParams, SystemMatrices};
pub use simulate::{MeasurementRecord, TruthBundle};
pub use smooth::{TargetKind, TargetSpec};
