//! Recurrent all-pairs optical flow with an amorphous (learned, per-level
//! scaled and split) lookup grid and an attention-based feature localizer.
//!
//! Layers, bottom up:
//! - [`tensor`], [`ops`], [`autodiff`], [`gradcheck`]: dense arrays, kernels
//!   and a reverse-mode tape.
//! - [`encoders`], [`correlation`], [`lookup`], [`afl`], [`updater`]: the
//!   flow network.
//! - [`flow`], [`io`], [`metrics`], [`viz`]: flow fields, file formats,
//!   evaluation and visualization.
//! - [`synthetic`], [`train`], [`bench`], [`selftest`]: scene generation,
//!   toy training, micro-benchmarks and the oracle suite registry.

pub mod afl;
pub mod autodiff;
pub mod bench;
pub mod config;
pub mod correlation;
pub mod encoders;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod io;
mod linalg;
pub mod lookup;
pub mod metrics;
pub mod ops;
pub mod oracle;
pub mod params;
pub mod rng;
pub mod selftest;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod updater;
pub mod viz;
pub mod weights;

pub use autodiff::{Gradients, Graph, Var};
pub use config::ModelConfig;
pub use error::{Error, Result};
pub use flow::{FlowField, Resolution};
pub use rng::SplitMix64;
pub use tensor::Tensor;
pub use weights::ModelWeights;
