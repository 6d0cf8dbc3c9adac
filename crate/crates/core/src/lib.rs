//! Learned inertial odometry: an orientation network fused with gyro
//! integration by a quaternion EKF, followed by a position network.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod cli;
pub mod config;
pub mod ekf;
pub mod error;
pub mod imu;
pub mod joint;
pub mod metrics;
pub mod nn;
pub mod orient;
pub mod pipeline;
pub mod plot;
pub mod posnet;
pub mod quat;
pub mod signal;
pub mod sim;
pub mod training;

pub use error::{Error, Result};
