//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Tensors use batch x channel x height x width layout (rank <= 4). A
//! [`Tape`] records every primitive executed during the forward pass and
//! replays them in reverse in [`Tape::backward`]. The primitive set is
//! deliberately small: enough to express a strided-convolution U-Net and an
//! L1 loss, nothing more.

mod element;
mod error;
mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use element::Element;
pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
