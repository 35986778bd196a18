//! Array engine: tensors, reverse-mode gradients, layers, Adam, and
//! allocation accounting.

pub mod adam;
pub mod alloc;
pub mod autograd;
pub mod io;
pub mod ops;
pub mod scalar;
pub mod tensor;

pub use adam::{adam_update, Adam, AdamConfig};
pub use alloc::{scoped_peak, scoped_trace, AllocCounter, AllocEvent};
pub use autograd::{no_grad, topo_order, Var};
pub use ops::AttentionWeights;
pub use scalar::Scalar;
pub use tensor::Tensor;
