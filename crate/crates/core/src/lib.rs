//! Attribution of adversarial examples to the attack that produced them.
//!
//! The crate covers the whole pipeline: a small from-scratch CNN substrate,
//! a victim classifier, five attack algorithms, perturbation fingerprint
//! extractors (JPEG-style transform coding and compressed-sensing LASSO), the
//! attribution classifier with early stopping, and image-quality / label
//! analyses.

pub mod analysis;
pub mod attacks;
pub mod attribution;
pub mod data;
pub mod error;
pub mod fingerprints;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod victim;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Tensor, Tensor32, Tensor64};

pub type Network32 = nn::Network<f32>;
pub type Network64 = nn::Network<f64>;
