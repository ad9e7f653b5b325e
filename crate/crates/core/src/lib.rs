//! Sampling-based stochastic model predictive control for a single-track
//! race car: MPPI, Shield-MPPI and belief-space stochastic MPPI, plus the
//! closed-loop simulator and Monte-Carlo experiment harness around them.

// `!(x > 0.0)` checks double as NaN rejection; index loops mirror the matrix math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod belief;
pub mod cli;
pub mod constraints;
pub mod controllers;
pub mod dynamics;
pub mod linalg;
pub mod rng;
pub mod sim;
