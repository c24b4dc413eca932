//! Sparse-to-dense LiDAR reflectance imaging.
//!
//! Non-repeating-scanning LiDAR sensors sample different beam directions on
//! every sweep, so a stationary sensor densifies its coverage over time. This
//! crate turns such point clouds into calibrated 2D reflectance images:
//!
//! - [`geometry`]: points, scans, rigid transforms, depth-image normals.
//! - [`projection`]: panoramic spherical and virtual-camera image formation.
//! - [`accumulation`]: multi-scan fusion and sparse/dense pair construction.
//! - [`augmentation`]: motion simulation for stationary training sequences.
//! - [`compensation`]: range/incidence intensity correction and its fitting.
//! - [`densify`]: classical sparse-to-dense completion.
//! - [`metrics`]: masked PSNR / SSIM / RMSE / MAE.
//! - [`synth`]: a rosette-pattern LiDAR simulator supplying oracle data.
//! - [`io`] / [`pgm`]: CSV, TOML, scene and 16-bit PGM file formats.
//! - [`pipeline`]: the end-to-end runner behind the CLI.

pub mod accumulation;
pub mod augmentation;
pub mod compensation;
pub mod densify;
pub mod error;
pub mod geometry;
pub mod image;
pub mod io;
pub mod metrics;
pub mod pgm;
pub mod pipeline;
pub mod projection;
pub mod synth;

pub use error::{Error, Result};
