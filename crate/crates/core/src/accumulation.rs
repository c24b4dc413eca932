//! Multi-scan fusion and sparse/dense image pair construction.
//!
//! A stationary non-repeating-scanning LiDAR densifies coverage as scans
//! accumulate, so the dense ground-truth side of a training pair is built by
//! plain concatenation of many scans while the sparse side fuses a few scans
//! through their odometry poses.

use crate::error::{Error, Result};
use crate::geometry::{se3_apply, Point3, PoseSE3, Scan};
use crate::image::{DepthImage, ReflectanceImage};
use crate::projection::{project, ProjectionConfig};

/// Default number of scans fused on the sparse (input) side.
pub const DEFAULT_SPARSE_SCANS: usize = 5;
/// Default number of scans accumulated for dense ground truth.
pub const DEFAULT_DENSE_SCANS: usize = 500;

/// Point set merged from several scans, tagged with per-point provenance.
#[derive(Debug, Clone)]
pub struct FusedCloud {
    pub points: Vec<Point3>,
    /// Originating scan id for each point.
    pub source_ids: Vec<u64>,
    pub n_scans: usize,
}

impl FusedCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Concatenates scans without any transform (stationary capture).
pub fn fuse_static(scans: &[Scan]) -> Result<FusedCloud> {
    if scans.is_empty() {
        return Err(Error::validation("fuse_static requires at least one scan"));
    }
    let total: usize = scans.iter().map(|s| s.points.len()).sum();
    let mut points = Vec::with_capacity(total);
    let mut source_ids = Vec::with_capacity(total);
    for scan in scans {
        points.extend_from_slice(&scan.points);
        source_ids.extend(std::iter::repeat_n(scan.scan_id, scan.points.len()));
    }
    Ok(FusedCloud {
        points,
        source_ids,
        n_scans: scans.len(),
    })
}

/// Transforms each scan by its pose, then merges (in-motion capture).
///
/// Pose `i` maps scan `i`'s sensor frame into the common reference frame.
pub fn fuse_with_poses(scans: &[Scan], poses: &[PoseSE3]) -> Result<FusedCloud> {
    if scans.is_empty() {
        return Err(Error::validation("fuse_with_poses requires at least one scan"));
    }
    if scans.len() != poses.len() {
        return Err(Error::validation(format!(
            "{} scans but {} poses",
            scans.len(),
            poses.len()
        )));
    }
    let total: usize = scans.iter().map(|s| s.points.len()).sum();
    let mut points = Vec::with_capacity(total);
    let mut source_ids = Vec::with_capacity(total);
    for (scan, pose) in scans.iter().zip(poses) {
        points.extend(scan.points.iter().map(|p| se3_apply(pose, p)));
        source_ids.extend(std::iter::repeat_n(scan.scan_id, scan.points.len()));
    }
    Ok(FusedCloud {
        points,
        source_ids,
        n_scans: scans.len(),
    })
}

/// A reflectance image and its aligned depth image.
#[derive(Debug, Clone)]
pub struct ProjectedPair {
    pub reflectance: ReflectanceImage,
    pub depth: DepthImage,
}

/// Sparse input and dense ground truth projected with the same config.
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub sparse: ProjectedPair,
    pub dense: ProjectedPair,
}

/// Builds a training pair: the sparse side fuses the first `sparse_n` scans
/// through their poses, the dense side accumulates the first `dense_n` scans
/// untransformed (stationary ground-truth assumption).
pub fn make_pair(
    scans: &[Scan],
    poses: &[PoseSE3],
    sparse_n: usize,
    dense_n: usize,
    cfg: &ProjectionConfig,
) -> Result<ImagePair> {
    if sparse_n == 0 {
        return Err(Error::validation("sparse_n must be >= 1"));
    }
    if sparse_n > dense_n {
        return Err(Error::validation(format!(
            "sparse_n ({sparse_n}) must not exceed dense_n ({dense_n})"
        )));
    }
    if dense_n > scans.len() {
        return Err(Error::validation(format!(
            "dense_n ({dense_n}) exceeds available scans ({})",
            scans.len()
        )));
    }
    if poses.len() < sparse_n {
        return Err(Error::validation(format!(
            "need {sparse_n} poses, got {}",
            poses.len()
        )));
    }
    let sparse_cloud = fuse_with_poses(&scans[..sparse_n], &poses[..sparse_n])?;
    let dense_cloud = fuse_static(&scans[..dense_n])?;
    let (sr, sd) = project(&sparse_cloud.points, cfg)?;
    let (dr, dd) = project(&dense_cloud.points, cfg)?;
    Ok(ImagePair {
        sparse: ProjectedPair {
            reflectance: sr,
            depth: sd,
        },
        dense: ProjectedPair {
            reflectance: dr,
            depth: dd,
        },
    })
}
