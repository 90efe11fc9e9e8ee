// `!(x > y)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod data;
pub mod distributions;
pub mod encoders;
pub mod error;
pub mod nn;
pub mod model;
pub mod ode;
pub mod scfea;
pub mod tensor;
pub mod train;
