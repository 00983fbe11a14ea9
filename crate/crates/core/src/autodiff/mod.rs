//! Dense tensors with a reverse-mode tape.
//!
//! Every op records its inputs on the [`Tape`] as it evaluates, and
//! [`Tape::backward`] walks the record in reverse. The spike node uses the
//! arctan [`Surrogate`] in place of the Heaviside derivative.

pub mod kernels;
mod surrogate;
mod tape;
mod tensor;

pub use surrogate::Surrogate;
pub use tape::{BnMode, RunningStats, Tape, Var};
pub use tensor::Tensor;
