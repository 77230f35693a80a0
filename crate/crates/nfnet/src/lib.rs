//! Normalizer-free residual networks with signal propagation
//! instrumentation.
//!
//! The crate builds deep residual networks that keep healthy forward signal
//! statistics without any activation normalization layer, and ships the
//! measurement tools to verify that claim empirically:
//!
//! - [`tensor`]: NHWC tensors, deterministic Gaussian sampling, and the
//!   channel statistics (average channel squared mean / variance) that define
//!   signal propagation plots.
//! - [`ops`]: direct convolution, pooling, batch-statistics normalization,
//!   scaled nonlinearities, squeeze-excite, linear head, He init.
//! - [`ws`]: Scaled Weight Standardization, activation gain estimation
//!   (analytic and Monte Carlo), and the fixed-weight output-moment formulas
//!   behind the mean-shift analysis.
//! - [`blocks`]: normalizer-free residual blocks with the alpha/beta variance
//!   ledger, plus BatchNorm reference blocks in both pre-activation
//!   orderings.
//! - [`models`]: config-driven NF-ResNet / NF-RegNet / BN-ResNet builders.
//! - [`spp`]: signal propagation plot generation (CSV/JSON/SVG) and stage
//!   growth fitting.
//! - [`autodiff`]: reverse-mode gradients for every operator (including
//!   through weight standardization), a finite-difference checker, and a
//!   small training demo.
//! - [`cli`]: the `nfnet` command-line tool.
//!
//! See the `examples/` directory for one runnable example per capability.

pub mod autodiff;
pub mod blocks;
pub mod cli;
pub mod error;
pub mod models;
pub mod ops;
pub mod spp;
pub mod tensor;
pub mod ws;

pub use error::{Error, Result};
pub use tensor::{Dtype, RngStream, Shape, Tensor};
