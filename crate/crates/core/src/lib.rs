//! Continuous-time radar-inertial odometry and mapping.

// `!(a <= b)` is used deliberately so that NaN fails a gate.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod filter;
pub mod geometry;
pub mod localizability;
pub mod pipeline;
pub mod radar;
pub mod residuals;
pub mod spline;
pub mod submap;
pub mod uncertainty;
