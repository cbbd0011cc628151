//! Instance-aware semantic surfel mapping with multi-view 6D object pose
//! estimation for RGB-D sequences.
//!
//! The library covers the full geometric/probabilistic pipeline: frame-to-model
//! registration against a splat-rendered surfel map, per-instance semantic
//! fusion, detector-mask association and refinement, a per-object extended
//! Kalman filter over pose measurements, and the ADD-S / AUC / mu_d evaluation
//! stack. Neural detector and single-view pose networks are replaced by
//! pluggable measurement providers so every stage is deterministic and
//! testable; a synthetic scene renderer generates the input sequences.

pub mod association;
pub mod dataset;
pub mod image;
pub mod metrics;
pub mod pipeline;
pub mod pose;
pub mod pose_fusion;
pub mod registration;
pub mod scene_sim;
pub mod spatial;
pub mod surfel_map;

pub use image::{CameraIntrinsics, Grid, RgbdFrame};
pub use metrics::{EvalReport, ObjectModel};
pub use pose::{Pose6D, RigidTransform, TangentVector6};
pub use surfel_map::{InstanceId, SurfelMap};
