//! Learning stochastic data-augmentation policies by bilevel optimization.
//!
//! The search alternates lower-level training of a small classifier with
//! upper-level updates of a factorized augmentation policy. Upper-level
//! gradients come from a score-function (REINFORCE) estimate through a
//! one-step unrolled model, and policy updates are anchored to the policy
//! at the start of each round by a KL penalty. Each round restarts the
//! model from a pretrained checkpoint.
//!
//! Module map:
//!
//! * [`raster`]: images and the pool of elementary transforms.
//! * [`policy`]: sampling, exact log-density, scores, KL anchoring.
//! * [`predictor`]: differentiable classifiers and SGD with momentum.
//! * [`hypergrad`]: inner gradient, virtual step and the outer estimate.
//! * [`search`]: pretraining, rounds, ablation modes and traces.
//! * [`data`]: datasets, splits, the binary format, synthetic tasks.
//! * [`eval`]: retraining under a policy and confidence intervals.
//! * [`report`]: CSV/SVG rendering of traces and policies.
//! * [`par`]: data-parallel helpers with a sequential fallback.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod hypergrad;
pub mod par;
pub mod policy;
pub mod predictor;
pub mod raster;
pub mod report;
pub mod search;
pub(crate) mod stats;

pub use error::{Error, Result};
