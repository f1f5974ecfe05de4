//! Attention-based wavelet scattering network for multi-channel imagery.
//!
//! The front-end is a fixed second-order Morlet scattering transform; each
//! input channel then runs its own attention module (channel attention,
//! dilated spatial attention, learnable fusion) before a small task head.
//! Everything is built on an in-crate tape autodiff engine, so the whole
//! network is differentiable down to the input pixels.

pub mod error;
pub mod params;
pub mod tensor;

pub mod attention;
pub mod data;
pub mod explain;
pub mod filterbank;
pub mod model;
pub mod scattering;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{CTensor, DynTensor, Real, Tensor};
