//! Synthetic non-repeating-scan LiDAR.
//!
//! A two-frequency rosette steers the beam so that consecutive sweeps sample
//! different directions, which is what makes stationary accumulation densify
//! coverage. Scenes are a handful of parametric primitives with known
//! reflectance, so every downstream module can be checked against exact
//! ground truth.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::compensation::{forward_intensity, range_factor, CalibSample, CompensationParams, EtaConstants};
use crate::error::{Error, Result};
use crate::geometry::{Point3, PoseSE3, Scan};

/// Fixed azimuth modulation amplitude of the rosette, radians.
const AZIMUTH_MODULATION: f64 = 0.5;

/// Minimum ray parameter accepted as a hit.
const RAY_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    /// The local `x = 0` plane bounded by `|y|, |z| <= extent`.
    Plane,
    /// Axis-aligned cube of half-extent `extent` centered at the local origin.
    Box,
}

/// One scene element with uniform surface reflectance.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScenePrimitive {
    pub kind: PrimitiveKind,
    /// Local-to-world transform.
    pub pose: PoseSE3,
    /// Half-size, meters.
    pub extent: f64,
    /// Surface reflectance in `(0, 1]`.
    pub rho: f64,
}

impl ScenePrimitive {
    /// Plane at `x = distance` facing the origin.
    pub fn plane_facing_origin(distance: f64, extent: f64, rho: f64) -> Self {
        ScenePrimitive {
            kind: PrimitiveKind::Plane,
            pose: PoseSE3::from_translation(distance, 0.0, 0.0),
            extent,
            rho,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.extent.is_finite() && self.extent > 0.0) {
            return Err(Error::validation("primitive extent must be > 0"));
        }
        if !(self.rho.is_finite() && self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::validation("rho must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// A scene is an ordered list of primitives; the index doubles as the
/// material id of calibration samples drawn from it.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub primitives: Vec<ScenePrimitive>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        for p in &self.primitives {
            p.validate()?;
        }
        Ok(())
    }
}

/// Rosette scan-pattern parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RosetteConfig {
    /// Scan rate, scans per second.
    pub rate_hz: f64,
    pub points_per_scan: usize,
    /// Azimuth sweep frequency, Hz.
    pub f1: f64,
    /// Modulation frequency, Hz. The defaults put the exact pattern period at
    /// around 10^6 seconds, so no direction repeats within any realistic
    /// accumulation window.
    pub f2: f64,
    /// Full vertical field of view, radians; elevations stay in +-vfov/2.
    pub vfov: f64,
    /// Initial phase, radians.
    pub phase0: f64,
}

impl Default for RosetteConfig {
    fn default() -> Self {
        RosetteConfig {
            rate_hz: 10.0,
            points_per_scan: 20_000,
            f1: 97.3,
            f2: 13.707963,
            vfov: (59.0f64).to_radians(),
            phase0: 0.0,
        }
    }
}

impl RosetteConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return Err(Error::validation("rate_hz must be > 0"));
        }
        if self.points_per_scan == 0 {
            return Err(Error::validation("points_per_scan must be >= 1"));
        }
        if self.f1 == self.f2 {
            return Err(Error::validation("rosette frequencies must differ"));
        }
        if !(self.vfov > 0.0 && self.vfov < std::f64::consts::PI) {
            return Err(Error::validation("vfov must lie in (0, pi)"));
        }
        Ok(())
    }
}

/// Unit beam directions of one scan.
///
/// Sample `k` of scan `s` is taken at `t = (s n + k) / (n rate)`; azimuth
/// sweeps with `f1` plus a sinusoidal modulation at `f2`, elevation oscillates
/// at `f2` within the vertical FoV.
pub fn rosette_directions(cfg: &RosetteConfig, scan_index: u64, n: usize) -> Vec<Vector3<f64>> {
    let mut dirs = Vec::with_capacity(n);
    let n_f = n as f64;
    let base = scan_index as f64 * n_f;
    for k in 0..n {
        let t = (base + k as f64) / (n_f * cfg.rate_hz);
        let azimuth = std::f64::consts::TAU * (cfg.f1 * t + cfg.phase0)
            + AZIMUTH_MODULATION * (std::f64::consts::TAU * cfg.f2 * t).sin();
        let elevation =
            (cfg.vfov / 2.0) * (std::f64::consts::TAU * cfg.f2 * t + cfg.phase0).sin();
        let (se, ce) = elevation.sin_cos();
        let (sa, ca) = azimuth.sin_cos();
        dirs.push(Vector3::new(ce * ca, ce * sa, se));
    }
    dirs
}

/// Result of intersecting one ray with the scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    /// Distance along the (unit) ray.
    pub range: f64,
    /// `|n . dir|` at the hit point.
    pub cos_alpha: f64,
    /// Surface reflectance of the material hit.
    pub rho: f64,
    /// Index of the primitive hit; used as the material id.
    pub primitive: usize,
}

/// Nearest intersection of a unit ray with the scene, if any.
pub fn raycast(scene: &[ScenePrimitive], origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<RayHit> {
    let mut best: Option<RayHit> = None;
    for (index, prim) in scene.iter().enumerate() {
        let inv = prim.pose.inverse();
        let o = inv.apply_vector(origin);
        let d = inv.rotation() * dir;
        let hit = match prim.kind {
            PrimitiveKind::Plane => intersect_plane(&o, &d, prim.extent),
            PrimitiveKind::Box => intersect_box(&o, &d, prim.extent),
        };
        if let Some((t, cos_alpha)) = hit {
            let closer = best.map(|b| t < b.range).unwrap_or(true);
            if closer {
                best = Some(RayHit {
                    range: t,
                    cos_alpha,
                    rho: prim.rho,
                    primitive: index,
                });
            }
        }
    }
    best
}

fn intersect_plane(o: &Vector3<f64>, d: &Vector3<f64>, extent: f64) -> Option<(f64, f64)> {
    if d.x.abs() < 1e-15 {
        return None;
    }
    let t = -o.x / d.x;
    if t <= RAY_EPS {
        return None;
    }
    let y = o.y + t * d.y;
    let z = o.z + t * d.z;
    if y.abs() > extent || z.abs() > extent {
        return None;
    }
    Some((t, d.x.abs()))
}

fn intersect_box(o: &Vector3<f64>, d: &Vector3<f64>, extent: f64) -> Option<(f64, f64)> {
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    let mut enter_axis = 0usize;
    for axis in 0..3 {
        if d[axis].abs() < 1e-15 {
            if o[axis].abs() > extent {
                return None;
            }
            continue;
        }
        let mut t1 = (-extent - o[axis]) / d[axis];
        let mut t2 = (extent - o[axis]) / d[axis];
        if t1 > t2 {
            std::mem::swap(&mut t1, &mut t2);
        }
        if t1 > t_enter {
            t_enter = t1;
            enter_axis = axis;
        }
        t_exit = t_exit.min(t2);
        if t_enter > t_exit {
            return None;
        }
    }
    // Hits only from outside; rays starting inside the box see nothing.
    if t_enter <= RAY_EPS {
        return None;
    }
    Some((t_enter, d[enter_axis].abs()))
}

/// Simulates one scan with the physical intensity model (near-field factor,
/// Lambert cosine, inverse-square falloff). Misses are dropped.
pub fn simulate_scan(
    scene: &[ScenePrimitive],
    cfg: &RosetteConfig,
    scan_index: u64,
    emission: f64,
    eta_k: &EtaConstants,
) -> Scan {
    simulate(scene, cfg, scan_index, |hit| {
        forward_intensity(hit.range, hit.cos_alpha, hit.rho, emission, eta_k)
            .expect("raycast range is positive")
    })
}

/// Simulates one scan whose intensities follow the parameterized compensation
/// model, `I = level * rho * g(R) * cos(alpha) * kappa`.
///
/// Data generated this way is exactly flattenable by the compensation stage,
/// which is what the parameter-recovery round trips need.
pub fn simulate_scan_parametric(
    scene: &[ScenePrimitive],
    cfg: &RosetteConfig,
    scan_index: u64,
    params: &CompensationParams,
    level: f64,
) -> Scan {
    simulate(scene, cfg, scan_index, |hit| {
        let g = range_factor(hit.range, params).expect("positive factor over scene ranges");
        level * hit.rho * g * hit.cos_alpha * params.kappa
    })
}

fn simulate<F>(scene: &[ScenePrimitive], cfg: &RosetteConfig, scan_index: u64, intensity_of: F) -> Scan
where
    F: Fn(&RayHit) -> f64,
{
    let origin = Vector3::zeros();
    let mut points = Vec::new();
    for dir in rosette_directions(cfg, scan_index, cfg.points_per_scan) {
        if let Some(hit) = raycast(scene, &origin, &dir) {
            let p = dir * hit.range;
            points.push(Point3::new(
                p.x,
                p.y,
                p.z,
                intensity_of(&hit).clamp(0.0, 1.0),
            ));
        }
    }
    Scan::new(scan_index, scan_index as f64 / cfg.rate_hz, points)
}

/// Simulates `count` consecutive scans of a stationary sensor.
pub fn simulate_scans(
    scene: &[ScenePrimitive],
    cfg: &RosetteConfig,
    count: usize,
    emission: f64,
    eta_k: &EtaConstants,
) -> Vec<Scan> {
    (0..count)
        .map(|s| simulate_scan(scene, cfg, s as u64, emission, eta_k))
        .collect()
}

/// Controlled calibration sweep: one sample per (range, angle) pair with the
/// physical intensity model, the measurement protocol used for fitting the
/// compensation parameters.
pub fn controlled_samples(
    ranges: &[f64],
    cos_alphas: &[f64],
    rho: f64,
    emission: f64,
    eta_k: &EtaConstants,
    material_id: u32,
) -> Vec<CalibSample> {
    let mut out = Vec::with_capacity(ranges.len() * cos_alphas.len());
    for &range in ranges {
        for &cos_alpha in cos_alphas {
            let intensity = forward_intensity(range, cos_alpha, rho, emission, eta_k)
                .expect("controlled ranges are positive")
                .clamp(0.0, 1.0);
            out.push(CalibSample {
                intensity,
                range,
                cos_alpha,
                material_id,
            });
        }
    }
    out
}
