//! Simulation and estimation for longitudinal outcomes recorded under an
//! informative visit process.
//!
//! The crate generates panels whose visit times depend on treatment, on a
//! shared frailty, or on previous outcomes, and fits five competing models
//! to them:
//!
//! | label | estimator | module |
//! |-------|-----------|--------|
//! | A | joint Weibull-frailty / linear mixed model | [`jointfit`] |
//! | B | random-intercept LMM adjusted for the centred visit count | [`lmm`] |
//! | C | random-intercept LMM adjusted for the cumulative visit count | [`lmm`] |
//! | D | random-intercept LMM ignoring the visit process | [`lmm`] |
//! | E | inverse-intensity-of-visiting weighted GEE | [`iivw`] |
//!
//! [`harness`] runs Monte Carlo studies over these and summarises bias,
//! coverage and their Monte Carlo standard errors.

// Numerical kernels index several parallel arrays at once, and negated
// comparisons are how NaN inputs get rejected.
#![allow(
    clippy::needless_range_loop,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::type_complexity
)]

pub mod config;
pub mod dgm;
pub mod domain;
pub mod harness;
pub mod iivw;
pub mod io;
pub mod jointfit;
pub mod lmm;
pub mod optim;
pub mod quadrature;
pub mod rng;
pub mod survfit;

pub use dgm::{simulate, Family, ScenarioConfig, Truth};
pub use domain::{
    build_panel, FitResult, GapRecord, ModelLabel, PanelDataset, ParamEstimate, Subject,
};
pub use harness::{
    fit_model, run_study, summarize, EstimatesTable, FitOptions, PerformanceTable, StudyConfig,
};
pub use rng::DatasetSeed;

/// Crate version, recorded in output manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
