//! Viscous compressible two-fluid mixtures: algebraic pressure closure, dyadic
//! Besov analysis, linearised symbol analysis, a pseudo-spectral solver and
//! decay diagnostics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod closure;
pub mod config;
pub mod decay;
pub mod grid;
pub mod lpbesov;
pub mod linsys;
pub mod solver;
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
