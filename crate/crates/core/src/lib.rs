//! Toolkit for benchmarking markerless motion capture on joint kinematics.
//!
//! The analysis path turns per-camera 2D keypoints into joint angles: gap filling
//! and zero-phase filtering ([`signal`]), two-view triangulation ([`camera`]),
//! model scaling and inverse kinematics ([`skeletal`]), then waveform RMSE and
//! leaderboard scoring ([`metrics`]). The labelling path poses a blend body model
//! ([`body`]) and projects a vertex subset into COCO-style annotations ([`synth`]).

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod body;
pub mod camera;
pub mod formats;
pub mod metrics;
pub mod pipeline;
pub mod rotation;
pub mod signal;
pub mod skeletal;
pub mod synth;
