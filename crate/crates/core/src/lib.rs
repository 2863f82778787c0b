//! Student-modeling core for data-driven tutor redesign.
//!
//! Everything in this crate is a pure function of its inputs and builds on
//! `core` + `alloc` only, so it can be embedded anywhere. File formats, the
//! command line and any parallel drivers live in the `redesign` crate.
//!
//! The pipeline, bottom-up:
//!
//! - [`logstore`]: transactions and the first-attempt student-step roll-up.
//! - [`kcmodel`]: Q-matrices, split/merge refinements, AIC model comparison.
//! - [`afm`]: Additive Factors Model fitting and end-of-practice knowledge.
//! - [`bkt`]: Bayesian Knowledge Tracing updates, tracing and grid fitting.
//! - [`learncurve`]: empirical and predicted learning curves, KC screening.
//! - [`policysim`]: adaptive problem selection and mastered-step skipping
//!   simulated against synthetic students.
//! - [`procmetrics`]: time-on-task, productivity, practice allocation and
//!   knowledge summaries.
//! - [`synth`]: seeded generators for synthetic logs used by tests and fixtures.
#![no_std]

extern crate alloc;

pub mod afm;
pub mod bkt;
pub mod kcmodel;
pub mod learncurve;
mod linalg;
pub mod logstore;
mod math;
pub mod policysim;
pub mod procmetrics;
pub mod stats;
pub mod synth;

pub use afm::{AfmConfig, AfmError, AfmFit, KnowledgeEstimate};
pub use bkt::{BktCaps, BktError, BktFitConfig, BktParams, MasteryState, Observation};
pub use kcmodel::{KcModel, KcModelError, ModelComparison, SplitRule};
pub use learncurve::{CurvePoint, FlagConfig, KcFlag};
pub use logstore::{
    Outcome, RollupDiagnostics, StepKey, StudentStepRecord, StudentStepTable, Transaction,
};
pub use policysim::{PolicyConfig, ProblemPool, Selection, SimReport, SyntheticStudent};
pub use procmetrics::{AllocationRow, TimeBreakdown};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Default mastery threshold used for skipping, selection and knowledge counts.
pub const DEFAULT_MASTERY_THRESHOLD: f64 = 0.95;
/// Default threshold above which further practice counts as overpractice.
pub const DEFAULT_OVERPRACTICE_THRESHOLD: f64 = 0.80;
/// Default inactivity gap, in seconds, above which time is idle.
pub const DEFAULT_IDLE_THRESHOLD_SECS: f64 = 120.0;
