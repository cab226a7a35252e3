//! Cross-modality (visible/infrared) person matching at desk scale.
//!
//! The crate bundles a small reverse-mode differentiation engine, a two-stream
//! network that fuses shared appearance features with 3D-convolutional
//! relation features, batch-hard metric losses, an identity-balanced batch
//! sampler over synthetic data, and a CMC/mAP retrieval evaluator.
//!
//! Runnable walkthroughs live in `examples/`; `cargo run --example <name>`.

pub mod autograd;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod losses;
mod modality;
pub mod network;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use modality::Modality;
pub use tensor::Tensor;
