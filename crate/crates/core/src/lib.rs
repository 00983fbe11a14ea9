// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod earlybench;
pub mod error;
pub mod event_io;
pub mod gated_fusion;
pub mod network;
pub mod neurons;
pub mod params;
pub mod preprocess;
pub mod training;

pub use error::{Error, Result};
