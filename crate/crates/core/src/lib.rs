// Negated comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod check;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod paip;
pub mod params;
pub mod prompt;
pub mod raster;
pub mod rng;
pub mod special;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
