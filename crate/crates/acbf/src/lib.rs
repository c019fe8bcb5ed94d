//! Adaptive control barrier function toolkit: interval arithmetic, uncertain
//! control-affine models, closed-form adaptive safety filters, set-membership
//! tightening of parameter bounds and a fixed-step closed-loop simulator.

// `!(a <= b)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod controller;
pub mod interval;
pub mod model;
pub mod parallel;
pub mod scenarios;
pub mod sim;
pub mod tightening;

pub use parallel::Execution;
