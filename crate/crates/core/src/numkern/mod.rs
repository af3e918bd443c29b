//! Dense tensor kernel with reverse-mode differentiation.

mod gradcheck;
pub mod kernels;
mod lstm;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use lstm::{lstm_cell, lstm_step, CellParams, CellVars};
pub use tape::{Gradients, Tape, Var, BCE_CLAMP};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Matrix product of two `[m×k]`, `[k×n]` tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a), tape.constant(b));
    let c = tape.matmul(va, vb)?;
    Ok(tape.to_tensor(c))
}

/// Max-subtracted softmax of a vector.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 1 {
        return Err(Error::dim("softmax", format!("expected a vector, got {:?}", x.shape())));
    }
    Ok(Tensor::from_parts_unchecked(
        x.shape().to_vec(),
        kernels::softmax(x.data()),
    ))
}
