//! Dense tensor arithmetic and reverse-mode differentiation.

pub mod kernels;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use ops::{cross_entropy, embedding_lookup, forward_kl, gelu, layer_norm, matmul, softmax};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
