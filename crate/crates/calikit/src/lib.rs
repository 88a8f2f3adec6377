//! Trainable kernel calibration metrics for probabilistic forecasters.
//!
//! `calikit` treats calibration as conditional distribution matching: a
//! forecaster is calibrated when a chosen forecast variable and target
//! variable agree in distribution given a conditioning variable. The
//! discrepancy between the two sides is measured with a kernel maximum mean
//! discrepancy (MMD), estimated without bias by a U-statistic that is
//! differentiable in the model parameters, so the same quantity serves both
//! as an evaluation metric and as a training-time regularizer.
//!
//! The crate is organized bottom-up:
//!
//! * [`diffcore`] — a small reverse-mode autodiff tape over dense `f64`
//!   arrays, plus Adam and a finite-difference gradient checker.
//! * [`kernels`] — declarative kernel specifications (RBF, linear, moment,
//!   min, tanh-threshold, delta, scaled, product) with closed-form input
//!   gradients and Gram/PSD utilities.
//! * [`forecast`] — Gaussian and categorical neural forecasters with NLL,
//!   cdf/inverse-cdf, and reparameterized sampling.
//! * [`caltasks`] — the calibration notions (quantile, decision, group,
//!   individual, ... ) as (target, forecast, conditioning) constructions
//!   bound to a default kernel.
//! * [`mmd`] — the unbiased MMD² estimators (sampled for regression,
//!   analytically marginalized for classification), the combined training
//!   objective, and population oracles used by the tests.
//! * [`metrics`] — held-out evaluation: QCE, ECE, DCE, LCE, KCE, accuracy,
//!   entropy, NLL.
//! * [`recal`] — post-hoc recalibration: isotonic quantile maps and
//!   temperature scaling.
//! * [`data`] — CSV ingestion, standardization, deterministic splits, and
//!   synthetic generators with known ground truth.
//! * [`config`] / [`runner`] — the configuration-driven experiment harness
//!   behind the `calikit` CLI.
//!
//! # Quick example
//!
//! Estimate how far a forecaster's samples are from the observed labels
//! under a moment kernel (which compares the first two moments):
//!
//! ```
//! use calikit::kernels::KernelSpec;
//! use calikit::mmd::population_mmd_oracle;
//!
//! // Two point masses: P = δ_1, Q = δ_0.
//! let p = [(vec![1.0], 1.0)];
//! let q = [(vec![0.0], 1.0)];
//! let mmd2 = population_mmd_oracle(&p, &q, &KernelSpec::Moment).unwrap();
//! // (E_P[Y] - E_Q[Y])^2 + (E_P[Y^2] - E_Q[Y^2])^2 = 1 + 1
//! assert!((mmd2 - 2.0).abs() < 1e-12);
//! ```

pub mod caltasks;
pub mod config;
pub mod data;
pub mod diffcore;
pub mod forecast;
pub mod kernels;
pub mod metrics;
pub mod mmd;
pub mod numeric;
pub mod recal;
pub mod runner;

// pub use config::ExperimentConfig;
pub use kernels::KernelSpec;
