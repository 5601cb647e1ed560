//! Gated vision transformer, TopK sparse autoencoder and latent steering on a
//! small reverse-mode tensor library.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`). The
//! pipeline runs in `f32`; the `f64` instantiation exists for gradient checks.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod params;
pub mod sae;
pub mod scalar;
pub mod steering;
pub mod tensor;
pub mod vit;

pub use autograd::{Gradients, Tape, Var};
pub use checkpoint::Container;
pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_coords, GradCheckReport};
pub use params::{Adam, AdamConfig, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type GatedViT32 = vit::GatedViT<f32>;
pub type GatedViT64 = vit::GatedViT<f64>;
pub type Sae32 = sae::Sae<f32>;
pub type Sae64 = sae::Sae<f64>;
