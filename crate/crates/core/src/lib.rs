//! Closed-loop LQR control of linear plants with a Kalman filter, a modified
//! sliding innovation filter (MSIF), or a spiking network that performs
//! estimation and control in one recurrent population.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error;
pub mod filters;
pub mod harness;
pub mod network;
pub mod regulator;

pub use error::{Error, Result};
