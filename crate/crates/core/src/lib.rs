// NaN-rejecting guards are written as `!(x > 0.0)`, and coefficient loops
// index several parallel arrays at once.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod config;
pub mod enkf;
pub mod error;
pub mod experiments;
pub mod rng;
pub mod schrodinger;
pub mod search;
pub mod spectral_model;
pub mod stopping;
pub mod tikhonov;

pub use error::{Error, Result};
