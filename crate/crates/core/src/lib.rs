//! Differentiable image-to-point-cloud registration.
//!
//! The crate estimates the 6-DoF rigid transform between a camera image and a
//! LiDAR-style point cloud with a two-stage network: a coarse stage that
//! associates level-4 points with image features through a 2D-3D cost volume
//! and regresses a pose, and a fine stage that warps the cloud by the coarse
//! pose and regresses a residual.
//!
//! Everything runs on a small reverse-mode autodiff engine ([`autodiff`]) so
//! the whole pipeline is trainable end to end on a CPU.
//!
//! Data-parallel loops (grouping, convolutions, batch evaluation) go through
//! [`par`], which uses rayon when the `parallel` feature is enabled and plain
//! iterators otherwise.

pub mod autodiff;
pub mod config;
pub mod cost_volume;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod nn;
pub mod par;
pub mod pyramids;
pub mod registration;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};
