//! Dense numeric kernel: matrices, tape-based reverse-mode gradients,
//! softmax/sigmoid/GRU/batch-norm/dropout, and finite-difference checks.

pub mod check;
pub mod gru;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gru::{gru_cell, GruWeights};
pub use params::{Param, ParamStore};
pub use tape::{row_softmax, sigmoid, BatchNormState, Gradients, Tape, ValueId};
pub use tensor::Tensor2D;
