//! Density-map object counting with stacked fully-convolutional networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: rank-4 tensors and the differentiable layers (conv, ReLU,
//!   max-pool, transposed conv) with hand-written backward passes.
//! - [`density`]: ground-truth density maps from dot annotations.
//! - [`net`]: the base model, feature conversion blocks and the K-stage stack.
//! - [`loss`]: pixel L2 loss, grid loss and the deeply-supervised objective.
//! - [`metrics`]: MAE, rooted MSE, GAME and the local/global error bound.
//! - [`train`]: SGD with momentum, augmentation, duplication init, training loop.
//! - [`data`]: PGM/CSV persistence, dataset index and a synthetic scene generator.
//! - [`gradcheck`]: finite-difference verification of every backward pass.

pub mod data;
pub mod density;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
