//! Data-driven predictive control in the coordinates of the LQ factorization
//! of stacked Hankel matrices, with variance-based regularization tuning.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod closed_loop;
pub mod config;
pub mod controllers;
pub mod error;
pub mod hankel;
pub mod linalg;
pub mod lti;
pub mod oracle_mpc;
pub mod predictor;
pub mod qp;
pub mod rng;
pub mod tuning;

pub use error::{Error, Result};
