//! Motion augmentation of stationary scan sequences.
//!
//! Stationary training captures are perfectly aligned; in-motion inference
//! data is not. To bridge that gap, each scan of a static sequence is given a
//! small random rigid perturbation, scans are subsampled to mimic reduced
//! overlap, intensities receive Gaussian sensor noise, and optional
//! deterministic odometry patterns emulate non-linear motion such as
//! acceleration jumps or sharp turns.
//!
//! All randomness comes from a counter-based generator seeded by the config;
//! the same config always produces bit-identical output. Draws happen in
//! ascending scan-index order, one scan at a time, so results do not depend
//! on any parallel execution of the fusion itself.

use nalgebra::{Unit, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::accumulation::FusedCloud;
use crate::error::{Error, Result};
use crate::geometry::{se3_apply, se3_compose, PoseSE3, Scan};

/// Deterministic odometry perturbation profiles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdomPattern {
    None,
    /// Scales the per-scan displacement by `1 + magnitude` after the midpoint
    /// scan (doubling it at the default magnitude of 1).
    AccelJump,
    /// Adds a yaw ramp growing linearly to `magnitude * 90` degrees across
    /// the sequence.
    SharpTurn,
}

impl std::str::FromStr for OdomPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(OdomPattern::None),
            "accel_jump" => Ok(OdomPattern::AccelJump),
            "sharp_turn" => Ok(OdomPattern::SharpTurn),
            other => Err(Error::validation(format!("unknown odometry pattern `{other}`"))),
        }
    }
}

/// Augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub seed: u64,
    /// Std of each translation component, meters.
    pub trans_std: f64,
    /// Std of the rotation angle, radians (axis uniform on the sphere).
    pub rot_std: f64,
    /// Std of the additive intensity noise, on the `[0, 1]` scale.
    pub noise_std: f64,
    /// Number of scans sampled (without replacement) from the pool.
    pub keep_n: usize,
    /// Size of the leading scan pool sampled from.
    pub pool_n: usize,
    pub odom_pattern: OdomPattern,
    /// Dimensionless strength of the odometry pattern.
    pub odom_magnitude: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        // Small-motion scales consistent with 10 Hz scanning.
        AugmentConfig {
            seed: 0,
            trans_std: 0.02,
            rot_std: (0.5f64).to_radians(),
            noise_std: 0.01,
            keep_n: 5,
            pool_n: 5,
            odom_pattern: OdomPattern::None,
            odom_magnitude: 1.0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trans_std < 0.0 || self.rot_std < 0.0 || self.noise_std < 0.0 {
            return Err(Error::validation("augmentation stds must be >= 0"));
        }
        if self.keep_n == 0 || self.keep_n > self.pool_n {
            return Err(Error::validation(format!(
                "need 1 <= keep_n <= pool_n, got keep_n={} pool_n={}",
                self.keep_n, self.pool_n
            )));
        }
        Ok(())
    }
}

/// Applies the augmentation pipeline and fuses the perturbed scans.
///
/// Returns the fused cloud together with the per-scan perturbation poses
/// actually applied (pattern modulation included), in kept-scan order.
pub fn augment(scans: &[Scan], cfg: &AugmentConfig) -> Result<(FusedCloud, Vec<PoseSE3>)> {
    cfg.validate()?;
    if scans.len() < cfg.pool_n {
        return Err(Error::validation(format!(
            "pool_n ({}) exceeds available scans ({})",
            cfg.pool_n,
            scans.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // (1) random scan sampling from the leading pool, kept in scan order.
    let mut kept = rand::seq::index::sample(&mut rng, cfg.pool_n, cfg.keep_n).into_vec();
    kept.sort_unstable();

    // (2) per-scan rigid perturbations, drawn in kept order.
    let angle_dist = Normal::new(0.0, cfg.rot_std).map_err(|e| Error::numerical(e.to_string()))?;
    let trans_dist = Normal::new(0.0, cfg.trans_std).map_err(|e| Error::numerical(e.to_string()))?;
    let mut perturbations: Vec<PoseSE3> = Vec::with_capacity(kept.len());
    for _ in &kept {
        let axis: [f64; 3] = UnitSphere.sample(&mut rng);
        let angle = angle_dist.sample(&mut rng);
        let t = Vector3::new(
            trans_dist.sample(&mut rng),
            trans_dist.sample(&mut rng),
            trans_dist.sample(&mut rng),
        );
        perturbations.push(PoseSE3::from_axis_angle(
            &Unit::new_normalize(Vector3::new(axis[0], axis[1], axis[2])),
            angle,
            t,
        ));
    }

    // (3) deterministic odometry pattern on top of the random perturbations.
    let count = kept.len();
    match cfg.odom_pattern {
        OdomPattern::None => {}
        OdomPattern::AccelJump => {
            let midpoint = count.div_ceil(2);
            let factor = 1.0 + cfg.odom_magnitude;
            for pose in perturbations.iter_mut().skip(midpoint) {
                *pose = PoseSE3::from_parts(*pose.rotation(), pose.translation() * factor);
            }
        }
        OdomPattern::SharpTurn => {
            let total_yaw = cfg.odom_magnitude * std::f64::consts::FRAC_PI_2;
            for (k, pose) in perturbations.iter_mut().enumerate() {
                let ramp = if count > 1 {
                    k as f64 / (count - 1) as f64
                } else {
                    0.0
                };
                let turn = PoseSE3::from_axis_angle(
                    &Vector3::z_axis(),
                    ramp * total_yaw,
                    Vector3::zeros(),
                );
                *pose = se3_compose(&turn, pose);
            }
        }
    }

    // (4) transform, add intensity noise, fuse.
    let noise_dist = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::numerical(e.to_string()))?;
    let total: usize = kept.iter().map(|&i| scans[i].points.len()).sum();
    let mut points = Vec::with_capacity(total);
    let mut source_ids = Vec::with_capacity(total);
    for (slot, &scan_index) in kept.iter().enumerate() {
        let scan = &scans[scan_index];
        let pose = &perturbations[slot];
        for p in &scan.points {
            let mut moved = se3_apply(pose, p);
            moved.intensity = (moved.intensity + noise_dist.sample(&mut rng)).clamp(0.0, 1.0);
            points.push(moved);
            source_ids.push(scan.scan_id);
        }
    }

    Ok((
        FusedCloud {
            points,
            source_ids,
            n_scans: count,
        },
        perturbations,
    ))
}
