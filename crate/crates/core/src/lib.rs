//! Patch-based denoising diffusion: train and sample images patch by patch
//! with one-hot position conditioning and parameter-free global content
//! pooling, and measure the peak activation memory this saves.

pub mod checkpoint;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod kv;
pub mod memprofile;
pub mod numerics;
pub mod patching;
pub mod sampling;
pub mod schedule;
pub mod training;

pub use error::{Error, Result};

pub type Tensor32 = numerics::Tensor<f32>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Var32 = numerics::Var<f32>;
