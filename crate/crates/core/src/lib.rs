//! Face de-identification by attribute transfer.
//!
//! A shared encoder maps aligned 64x64 faces to a 16384-dimensional code; one
//! decoder per donor identity renders that code as the donor. Around the
//! model sit landmark alignment ([`facegeom`]), masked blending back into the
//! frame ([`maskblend`]), training ([`trainer`]), evaluation ([`evalkit`])
//! and a synthetic face generator ([`toyfaces`]).

pub mod error;
pub mod evalkit;
pub mod facegeom;
pub mod fatm;
pub mod image;
pub mod maskblend;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod toyfaces;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Fatm = fatm::FatmModel<f32>;
