//! Gate-relative monocular visual-inertial state estimation for drone racing.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: SO(3) maps, projection, distortion and frame transforms.
//! - [`model`]: states, IMU samples, gate maps, detections and measurements.
//! - [`vision`]: corner reordering, gate association, flip resolution.
//! - [`eskf`]: the real-time error-state Kalman filter.
//! - [`fgo`]: the offline factor-graph smoother.
//! - [`sim`]: analytic trajectories and sensor synthesis.
//! - [`pipeline`]: end-to-end filter and smoother runs over sensor logs.
//! - [`metrics`]: trajectory and reprojection metrics, ablation harnesses.
//! - [`io`]: file formats and run configuration.

pub mod geometry;
pub mod model;
pub mod vision;
pub mod eskf;
pub mod fgo;
pub mod sim;
pub mod pipeline;
pub mod metrics;
pub mod io;
