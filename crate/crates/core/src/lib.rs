//! Decoupled and improved KL divergence losses.
//!
//! The crate provides:
//!
//! - [`numerics`]: stable softmax / log-softmax and pair-weight kernels;
//! - [`losses`]: KL, weighted MSE, soft cross-entropy, the decoupled family
//!   (DKL, DKL-KD, IKL, IKL-KD) and Jensen-Shannon, all with analytic
//!   gradients;
//! - [`class_stats`]: per-class mean probabilities, class-wise weights and
//!   boundary margins;
//! - [`gradcheck`]: finite-difference and cross-formula oracles;
//! - [`model`], [`data`], [`trainers`]: a small MLP, synthetic data and the
//!   distillation / adversarial training loops that host the losses.

pub mod alloc_probe;
pub mod class_stats;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod trainers;

pub use class_stats::ClassStatsTable;
pub use error::{Error, Result};
pub use losses::{
    dkl_family, jsd_forward_backward, kl_backward, kl_forward, soft_ce, wmse_dense,
    wmse_efficient, GradFlow, LogitsBatch, LossConfig, LossOutput, WeightSource, WmseKernel,
};
pub use numerics::{log_softmax, outer_weight, pairwise_diff, softmax, PairDiffMatrix, ProbVector};
