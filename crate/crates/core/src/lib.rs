//! Neural recalibration of fixed-rig infrared multi-camera systems.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: pinhole projection with radial-tangential distortion, 6D
//!   rotations, geodesic distance and analytic projection Jacobians.
//! - [`scene`]: rig and calibration-object definitions, hemisphere pose
//!   synthesis, OEM perturbation and visibility filtering.
//! - [`nn`]: a small reverse-mode autodiff engine over dense tensors and the
//!   point-based transformer that regresses 21 parameters per camera.
//! - [`training`]: losses, the two-phase training loop, evaluation and drift
//!   detection.
//! - [`baseline`]: Levenberg-Marquardt bundle adjustment and runtime harnesses.
//! - [`recal`]: the [`recal::Recalibrator`] trait and a name-keyed registry of
//!   interchangeable recalibration methods.

pub mod baseline;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod nn;
pub mod recal;
pub mod records;
pub mod scene;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
