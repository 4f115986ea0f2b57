//! Directional gradient projection (DiGraP) for robust fine-tuning.
//!
//! The crate is organised bottom-up:
//!
//! - [`paramspace`]: per-layer parameter groups, the pre-trained snapshot and
//!   the vector algebra shared by every optimizer.
//! - [`models`]: small differentiable classifiers with exact backprop.
//! - [`optim`]: Adam, SGD, the L2-SP gradient and learning-rate schedules.
//! - [`projection`]: conflict-aware gradient projection with a trainable,
//!   per-layer projection strength, driven by a hypergradient inside Adam.
//! - [`baselines`]: linear probing, LP-FT, WiSE-FT, fixed/full projection and
//!   a magnitude-ball projection.
//! - [`shiftlab`]: synthetic pretrain / ID / OOD dataset factory.
//! - [`metrics`]: accuracy, relative deltas, Mahalanobis shift scores and
//!   projection-strength traces.
//! - [`harness`]: config parsing, experiment orchestration and result files.

// `!(x > 0.0)` style checks are deliberate: they reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod paramspace;
pub mod projection;
pub mod rng;
pub mod shiftlab;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use paramspace::{GradSet, ParamGroup, ParamSpace, ReferenceMode};
