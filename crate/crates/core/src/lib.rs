//! Core algorithms for studying classifiers under controlled distribution shift.
//!
//! The crate is organized around five building blocks:
//!
//! - [`net`]: a small deterministic differentiable network (dense, conv,
//!   pooling, relu/tanh/softmax) with analytic gradients and a weighted
//!   cross-entropy + feature-quantization objective.
//! - [`balance`]: per-batch confounder balancing. Features are binarized
//!   into treatment indicators and simplex-constrained sample weights are
//!   learned by projected gradient descent so that, for every feature taken
//!   as treatment, the remaining features' weighted means match across the
//!   treated and control groups.
//! - [`metrics`]: the non-i.i.d. index (normalized train/test feature mean
//!   shift), accuracy, and Pearson correlation.
//! - [`data`]: synthetic context-labelled dataset generation and the
//!   construction of biased train/test splits (minimum, proportional,
//!   compositional, combined, adversarial).
//! - [`train`]: the plain SGD baseline and the batch-balancing trainer that
//!   alternates unsupervised weight learning with weighted parameter updates.
//!
//! All numeric work is in `f64`, transcendental functions are routed through
//! `libm`, and every random choice flows from explicit seeds, so identical
//! inputs give bit-identical outputs on any IEEE-754 platform. The crate is
//! `no_std`-compatible (with `alloc`); file formats and the CLI live in the
//! companion `noniid-lab` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod balance;
pub mod data;
pub(crate) mod math;
pub mod metrics;
pub mod net;
pub mod tensor;
pub mod train;

pub use tensor::Tensor;
