//! Simulator for molecular-communication targeted drug delivery with
//! localization-enabled relaying.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod io;
pub mod particle;
pub mod protocol;
pub mod seed;

pub use error::{Error, Result};
