//! Non-neural core of a LiDAR-conditioned street-view synthesis pipeline.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`scene_io`]: neutral on-disk scene format (manifest, LiDAR sidecars, images).
//! - [`pointcloud`]: LiDAR colorization, background/object decomposition, window
//!   aggregation and box-level edits.
//! - [`condition`]: fixed-NDC-radius point rasterization into condition images.
//! - [`gsplat`]: dynamic scene-graph Gaussian splatting with analytic gradients.
//! - [`losses`]: photometric, geometric and regularization losses plus metrics.
//! - [`distill`]: the distillation trainer and its schedules.
//! - [`diffusion`]: noising, condition injection and guided DDIM sampling over
//!   pluggable denoiser and codec interfaces.
//!
//! Data-parallel kernels run on rayon when the `parallel` feature is enabled
//! (the default) and fall back to sequential loops otherwise. Results are
//! bit-identical either way.

// Index loops mirror the math; negated float comparisons reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod condition;
pub mod diffusion;
pub mod distill;
mod error;
pub mod exec;
pub mod geometry;
pub mod gsplat;
pub mod image;
pub mod losses;
pub mod pointcloud;
pub mod scene_io;
pub mod synthetic;

pub use error::{Error, Result};
pub use exec::Parallelism;
pub use geometry::{CameraIntrinsics, PinholeCamera, Se3Pose};
pub use image::ImageBuf;
