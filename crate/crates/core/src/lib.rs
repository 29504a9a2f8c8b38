//! Algorithms for training-free acceleration of mixture-of-experts multimodal
//! transformers, operating on routing and attention traces.
//!
//! The crate is `no_std` (it needs `alloc`) and contains only pure numeric
//! code:
//!
//! - [`moe`]: routing logits, softmax probabilities, top-K selection, gate
//!   re-normalization and the expert-mixture forward pass.
//! - [`reduction`]: per-modality expert-activation reduction from a start
//!   layer onward (TopK / RandomK / MinK).
//! - [`pruning`]: sliding-window redundancy scoring, window merging
//!   (mean / MLERP) and exact-count token dropping.
//! - [`theory`]: magnitude stability, the reduced-output angular bound,
//!   routing-similarity profiles and merge-rate feasibility.
//! - [`flops`]: the analytical FLOPs model for pruning, activation reduction
//!   and both combined.
//!
//! IO, trace formats and the command line live in the `routeprune` crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

mod error;
pub mod flops;
pub mod linalg;
pub mod moe;
pub mod pruning;
pub mod reduction;
pub mod theory;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use moe::{
    ExpertBank, GateRow, HiddenState, Modality, ModalityMask, MoeConfig, MoeOutput, RouterWeights,
    RoutingDistribution,
};

/// Round half away from zero for non-negative values, returned as a count.
///
/// Every count derived from a ratio in this crate (`K_v = pK`, `η = βN`,
/// `m = ηγ`) goes through here so the rounding rule is the same everywhere.
pub fn round_half_up(x: f64) -> usize {
    debug_assert!(x >= 0.0);
    libm::floor(x + 0.5) as usize
}
