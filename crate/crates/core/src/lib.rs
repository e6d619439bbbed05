//! Node classification with propagated uncertainty.
//!
//! A GraphSAGE-style network is trained on a graph whose links carry
//! existence probabilities. At inference, Gaussian feature noise is pushed
//! through every layer as per-node `(mean, variance)` pairs, and Monte-Carlo
//! dropout adds the spread across weight realisations. A sampling oracle
//! provides ground truth for the propagated moments on small fixtures.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adf;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod train;
pub mod uq;

/// Stream ids for [`linalg::RngStream`]. Every consumer of randomness owns
/// one id, so results do not depend on the order in which parts run.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const TRAIN_DROPOUT: u64 = 3;
    pub const SPLIT: u64 = 4;
    pub const SYNTHETIC: u64 = 5;
    pub const NOISE: u64 = 6;
    pub const FIXTURE: u64 = 7;
    /// MC sample `t` uses `MC_BASE + t`.
    pub const MC_BASE: u64 = 1 << 32;
    /// Oracle draw `s` uses `ORACLE_BASE + s`.
    pub const ORACLE_BASE: u64 = 1 << 40;
}

pub use adf::{adf_forward, AdfOutput, MomentMatrix};
pub use error::{Error, Result};
pub use graph::{DatasetManifest, Graph, NoiseSpec, Splits, SyntheticSpec};
pub use linalg::{DenseMatrix, RngStream};
pub use model::{full_forward, Architecture, DropoutMasks, ModelParams};
pub use oracle::{oracle_moments, OracleEstimate};
pub use train::{train, TrainConfig};
pub use uq::{evaluate, run_mc_ensemble, total_variance, McEnsemble, UqReport};
