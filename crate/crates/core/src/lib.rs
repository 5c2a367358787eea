//! Gradient-conditioned learned data assimilation on a synthetic
//! multi-level lat-lon system.

// Negated float comparisons are deliberate: they reject NaN along with
// out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::too_many_arguments)]

pub mod daflow;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod forecast;
pub mod fourdvar;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod losses;
pub mod netcore;
pub mod obsops;
pub mod verify;

pub use error::{Error, Result};
