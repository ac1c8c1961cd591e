//! Dense arithmetic and tape-based reverse-mode differentiation.

mod gradcheck;
mod mlp;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{gradient_check, gradient_check_with, relative_error, ridders, FiniteDiff, GradCheckReport};
pub use mlp::Mlp;
pub use param::{ParamId, ParamStore, Parameter};
pub(crate) use param::round_f32;
pub use tape::{Activation, Counters, Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.matmul(b)
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    x.softmax_rows()
}

/// Layer normalization over the last axis without recording anything.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (xv, g, b) = (
        tape.constant(x.clone())?,
        tape.constant(gain.clone())?,
        tape.constant(bias.clone())?,
    );
    let out = tape.layer_norm(xv, g, b, eps)?;
    Ok(tape.value(out).clone())
}
