//! Core 3D types: LiDAR points, scans, rigid transforms, and surface normals
//! estimated from depth images.
//!
//! All types are immutable values after construction and every operation here
//! is pure, so everything can be shared freely across threads.

use nalgebra::{Quaternion, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{DepthImage, NormalImage};
use crate::projection::ProjectionConfig;

/// Tolerance on `| |q| - 1 |` for quaternions accepted as unit.
pub const QUAT_NORM_TOL: f64 = 1e-9;

/// One LiDAR return: position in the sensor frame plus normalized intensity.
///
/// Intensity is normalized to `[0, 1]` at ingestion (raw sensor units divided
/// by the per-file `intensity_max`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Point3 { x, y, z, intensity }
    }

    /// Euclidean distance from the sensor origin.
    pub fn range(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    /// Checks the point invariants: finite coordinates, intensity in `[0, 1]`,
    /// strictly positive range.
    pub fn validate(&self) -> Result<()> {
        if !(self.x.is_finite() && self.y.is_finite() && self.z.is_finite()) {
            return Err(Error::validation("point coordinates must be finite"));
        }
        if !self.intensity.is_finite() || self.intensity < 0.0 || self.intensity > 1.0 {
            return Err(Error::validation(format!(
                "intensity {} outside [0, 1]",
                self.intensity
            )));
        }
        if self.range() <= 0.0 {
            return Err(Error::validation("point range must be > 0"));
        }
        Ok(())
    }
}

/// One LiDAR sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub scan_id: u64,
    /// Capture time in seconds.
    pub timestamp: f64,
    pub points: Vec<Point3>,
}

impl Scan {
    pub fn new(scan_id: u64, timestamp: f64, points: Vec<Point3>) -> Self {
        Scan {
            scan_id,
            timestamp,
            points,
        }
    }
}

/// Rigid transform: unit quaternion rotation plus translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRecord", into = "PoseRecord")]
pub struct PoseSE3 {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

/// Flat on-disk form of a pose (`tx,ty,tz,qw,qx,qy,qz`).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PoseRecord {
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
}

impl TryFrom<PoseRecord> for PoseSE3 {
    type Error = Error;

    fn try_from(r: PoseRecord) -> Result<Self> {
        PoseSE3::new(r.qw, r.qx, r.qy, r.qz, r.tx, r.ty, r.tz)
    }
}

impl From<PoseSE3> for PoseRecord {
    fn from(p: PoseSE3) -> PoseRecord {
        let q = p.rotation.quaternion();
        PoseRecord {
            tx: p.translation.x,
            ty: p.translation.y,
            tz: p.translation.z,
            qw: q.w,
            qx: q.i,
            qy: q.j,
            qz: q.k,
        }
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        PoseSE3 {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose from quaternion components and a translation.
    ///
    /// The quaternion must already be unit to within [`QUAT_NORM_TOL`]; it is
    /// renormalized to machine precision on acceptance.
    pub fn new(qw: f64, qx: f64, qy: f64, qz: f64, tx: f64, ty: f64, tz: f64) -> Result<Self> {
        let q = Quaternion::new(qw, qx, qy, qz);
        let norm = q.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > QUAT_NORM_TOL {
            return Err(Error::validation(format!(
                "quaternion ({qw}, {qx}, {qy}, {qz}) has norm {norm}, expected 1 within {QUAT_NORM_TOL:e}"
            )));
        }
        Ok(PoseSE3 {
            rotation: UnitQuaternion::new_normalize(q),
            translation: Vector3::new(tx, ty, tz),
        })
    }

    pub fn from_parts(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        PoseSE3 {
            rotation,
            translation,
        }
    }

    /// Rotation by `angle` radians about `axis`, then translation.
    pub fn from_axis_angle(axis: &Unit<Vector3<f64>>, angle: f64, translation: Vector3<f64>) -> Self {
        PoseSE3 {
            rotation: UnitQuaternion::from_axis_angle(axis, angle),
            translation,
        }
    }

    pub fn from_translation(tx: f64, ty: f64, tz: f64) -> Self {
        PoseSE3 {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::new(tx, ty, tz),
        }
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.translation
    }

    /// Quaternion components in `(w, x, y, z)` order.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn inverse(&self) -> PoseSE3 {
        let inv_rot = self.rotation.inverse();
        PoseSE3 {
            rotation: inv_rot,
            translation: -(inv_rot * self.translation),
        }
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        self.rotation.angle() <= tol && self.translation.norm() <= tol
    }

    /// Transforms a bare position vector.
    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v + self.translation
    }
}

/// Applies a rigid transform to a point; intensity is unchanged.
pub fn se3_apply(pose: &PoseSE3, p: &Point3) -> Point3 {
    let v = pose.apply_vector(&p.position());
    Point3 {
        x: v.x,
        y: v.y,
        z: v.z,
        intensity: p.intensity,
    }
}

/// Composes two poses so that `apply(compose(a, b), p) == apply(a, apply(b, p))`.
///
/// The rotation product is renormalized, keeping unit-norm drift below 1e-9
/// even across millions of chained compositions.
pub fn se3_compose(a: &PoseSE3, b: &PoseSE3) -> PoseSE3 {
    let q = a.rotation.quaternion() * b.rotation.quaternion();
    PoseSE3 {
        rotation: UnitQuaternion::new_normalize(q),
        translation: a.rotation * b.translation + a.translation,
    }
}

/// Estimates per-pixel surface normals from a depth image.
///
/// Each pixel with a valid center and valid 4-neighborhood is back-projected
/// to 3D through the pixel-center rays of `proj`; the normal is the cross
/// product of the column and row central differences, oriented toward the
/// sensor. Pixels without a complete neighborhood stay invalid. An
/// all-invalid depth image yields an all-invalid normal image.
pub fn estimate_normals(depth: &DepthImage, proj: &ProjectionConfig) -> NormalImage {
    let (w, h) = (depth.width(), depth.height());
    let mut normals = NormalImage::new(w, h);
    if h < 3 || w < 3 {
        return normals;
    }

    let rays = proj.direction_grid();
    let back_project = |row: usize, col: usize| -> Option<Vector3<f64>> {
        let range = depth.get(row, col)?;
        Some(rays[row * w + col] * range)
    };

    for row in 1..h - 1 {
        for col in 1..w - 1 {
            if !depth.is_valid(row, col) {
                continue;
            }
            let (left, right, up, down) = match (
                back_project(row, col - 1),
                back_project(row, col + 1),
                back_project(row - 1, col),
                back_project(row + 1, col),
            ) {
                (Some(l), Some(r), Some(u), Some(d)) => (l, r, u, d),
                _ => continue,
            };
            let d_col = right - left;
            let d_row = down - up;
            let n = d_col.cross(&d_row);
            let norm = n.norm();
            if norm < 1e-15 {
                continue;
            }
            let mut n = n / norm;
            let ray = rays[row * w + col];
            if n.dot(&ray) > 0.0 {
                n = -n;
            }
            let cos_incidence = (-n.dot(&ray)).min(1.0);
            if cos_incidence <= 0.0 {
                continue;
            }
            normals.set(row, col, [n.x, n.y, n.z], cos_incidence);
        }
    }
    normals
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::ProjectionConfig;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn yaw_pose(angle: f64) -> PoseSE3 {
        PoseSE3::from_axis_angle(&Vector3::z_axis(), angle, Vector3::zeros())
    }

    #[test]
    fn identity_apply_is_exact() {
        let p = Point3::new(1.0, 2.0, 3.0, 0.5);
        let out = se3_apply(&PoseSE3::identity(), &p);
        assert_eq!(out, p);
    }

    #[test]
    fn pure_translation() {
        let pose = PoseSE3::from_translation(1.0, 0.0, 0.0);
        let out = se3_apply(&pose, &Point3::new(0.0, 0.0, 0.0, 0.2));
        assert_eq!((out.x, out.y, out.z), (1.0, 0.0, 0.0));
        assert_eq!(out.intensity, 0.2);
    }

    #[test]
    fn quarter_turn_about_z() {
        // Hand evaluation: R_z(90 deg) * (1,0,0) = (0,1,0).
        let pose = yaw_pose(std::f64::consts::FRAC_PI_2);
        let out = se3_apply(&pose, &Point3::new(1.0, 0.0, 0.0, 0.0));
        assert_relative_eq!(out.x, 0.0, epsilon = 1e-9);
        assert_relative_eq!(out.y, 1.0, epsilon = 1e-9);
        assert_relative_eq!(out.z, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn non_unit_quaternion_rejected() {
        assert!(PoseSE3::new(1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0).is_err());
        assert!(PoseSE3::new(1.0 + 1e-6, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0).is_err());
        assert!(PoseSE3::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0).is_ok());
    }

    #[test]
    fn compose_identity_and_inverse() {
        let t = PoseSE3::from_axis_angle(
            &Vector3::y_axis(),
            0.7,
            Vector3::new(1.0, -2.0, 0.5),
        );
        let left = se3_compose(&PoseSE3::identity(), &t);
        assert_relative_eq!(
            (left.translation() - t.translation()).norm(),
            0.0,
            epsilon = 1e-12
        );
        assert!(left.rotation().angle_to(t.rotation()) < 1e-12);

        let round = se3_compose(&t, &t.inverse());
        assert!(round.is_identity(1e-9));
    }

    #[test]
    fn two_half_turns_equal_one_quarter() {
        // Quaternion multiplication oracle: hand-computed product of two
        // 45 degree yaws equals cos(45)+k*sin(45).
        let eighth = yaw_pose(std::f64::consts::FRAC_PI_4);
        let quarter = se3_compose(&eighth, &eighth);
        let [w, x, y, z] = quarter.quaternion_wxyz();
        let half = std::f64::consts::FRAC_PI_4; // quarter turn / 2
        assert_relative_eq!(w.abs(), half.cos(), epsilon = 1e-9);
        assert_relative_eq!(z.abs(), half.sin(), epsilon = 1e-9);
        assert_relative_eq!(x, 0.0, epsilon = 1e-12);
        assert_relative_eq!(y, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn renormalization_bounds_drift_over_many_compositions() {
        let step = PoseSE3::from_axis_angle(
            &Unit::new_normalize(Vector3::new(0.3, -0.5, 0.81)),
            1e-4,
            Vector3::new(1e-6, 0.0, -1e-6),
        );
        let mut acc = PoseSE3::identity();
        for _ in 0..1_000_000 {
            acc = se3_compose(&acc, &step);
        }
        let norm = acc.rotation().quaternion().norm();
        assert!((norm - 1.0).abs() < 1e-9, "norm drifted to {norm}");
    }

    #[test]
    fn normals_on_fronto_parallel_plane() {
        // Analytic depth image of the plane x = 5 seen by a panoramic sensor.
        let cfg = ProjectionConfig::panoramic(
            120,
            60,
            (-29.5f64).to_radians(),
            (29.5f64).to_radians(),
        )
        .unwrap();
        let mut depth = DepthImage::new(120, 60);
        for row in 0..60 {
            for col in 0..120 {
                let dir = cfg.pixel_direction(row, col);
                if dir.x > 0.2 {
                    depth.set(row, col, 5.0 / dir.x);
                }
            }
        }
        let normals = estimate_normals(&depth, &cfg);
        assert!(normals.valid_count() > 100);
        let mut worst = 0.0f64;
        let mut checked = 0usize;
        for row in 0..60 {
            for col in 0..120 {
                if let Some(n) = normals.normal(row, col) {
                    let angle = (-n[0]).clamp(-1.0, 1.0).acos().to_degrees();
                    worst = worst.max(angle);
                    checked += 1;
                }
            }
        }
        assert!(checked > 100);
        assert!(worst < 2.0, "worst normal deviation {worst} deg");
    }

    #[test]
    fn normals_on_tilted_plane() {
        // Plane through (5,0,0) with normal rotated 45 degrees about y:
        // n = (-cos45, 0, sin45), plane eq n . p = -5 cos45.
        let cfg = ProjectionConfig::panoramic(
            200,
            80,
            (-29.5f64).to_radians(),
            (29.5f64).to_radians(),
        )
        .unwrap();
        let n_true = Vector3::new(-(0.25f64 * std::f64::consts::PI).cos(), 0.0, (0.25f64 * std::f64::consts::PI).sin());
        let offset = -5.0 * (0.25f64 * std::f64::consts::PI).cos();
        let mut depth = DepthImage::new(200, 80);
        for row in 0..80 {
            for col in 0..200 {
                let dir = cfg.pixel_direction(row, col);
                let denom = n_true.dot(&dir);
                if denom < -0.2 {
                    let t = offset / denom;
                    if t > 0.0 && t < 50.0 {
                        depth.set(row, col, t);
                    }
                }
            }
        }
        let normals = estimate_normals(&depth, &cfg);
        assert!(normals.valid_count() > 200);
        for row in 0..80 {
            for col in 0..200 {
                if let Some(n) = normals.normal(row, col) {
                    let cosang = n[0] * n_true.x + n[1] * n_true.y + n[2] * n_true.z;
                    let angle = cosang.clamp(-1.0, 1.0).acos().to_degrees();
                    assert!(angle < 2.0, "normal off by {angle} deg at ({row},{col})");
                }
            }
        }
    }

    #[test]
    fn normals_on_plane_through_virtual_camera() {
        // Fronto-parallel plane x = 4 seen by a yawed virtual camera.
        let yaw = 0.5f64;
        let cfg = ProjectionConfig::virtual_camera(
            160,
            120,
            (-29.5f64).to_radians(),
            (29.5f64).to_radians(),
            (90.0f64).to_radians(),
            yaw,
        )
        .unwrap();
        let mut depth = DepthImage::new(160, 120);
        for row in 0..120 {
            for col in 0..160 {
                let dir = cfg.pixel_direction(row, col);
                if dir.x > 0.3 {
                    depth.set(row, col, 4.0 / dir.x);
                }
            }
        }
        let normals = estimate_normals(&depth, &cfg);
        assert!(normals.valid_count() > 1000);
        for row in 0..120 {
            for col in 0..160 {
                if let Some(n) = normals.normal(row, col) {
                    let angle = (-n[0]).clamp(-1.0, 1.0).acos().to_degrees();
                    assert!(angle < 2.0, "normal off by {angle} deg at ({row},{col})");
                }
            }
        }
    }

    #[test]
    fn isolated_pixel_has_no_normal() {
        let cfg = ProjectionConfig::panoramic(
            32,
            16,
            (-29.5f64).to_radians(),
            (29.5f64).to_radians(),
        )
        .unwrap();
        let mut depth = DepthImage::new(32, 16);
        depth.set(8, 16, 5.0);
        let normals = estimate_normals(&depth, &cfg);
        assert_eq!(normals.valid_count(), 0);
    }

    #[test]
    fn all_invalid_depth_yields_all_invalid_normals() {
        let cfg = ProjectionConfig::panoramic(
            32,
            16,
            (-29.5f64).to_radians(),
            (29.5f64).to_radians(),
        )
        .unwrap();
        let depth = DepthImage::new(32, 16);
        assert_eq!(estimate_normals(&depth, &cfg).valid_count(), 0);
    }

    proptest! {
        #[test]
        fn se3_apply_preserves_distances(
            axis in (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0),
            angle in -3.0f64..3.0,
            t in (-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0),
            p in (-50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0),
            q in (-50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0),
        ) {
            let axis = Vector3::new(axis.0, axis.1, axis.2);
            prop_assume!(axis.norm() > 1e-3);
            let pose = PoseSE3::from_axis_angle(
                &Unit::new_normalize(axis),
                angle,
                Vector3::new(t.0, t.1, t.2),
            );
            let a = Point3::new(p.0, p.1, p.2, 0.5);
            let b = Point3::new(q.0, q.1, q.2, 0.5);
            let d0 = (a.position() - b.position()).norm();
            let ta = se3_apply(&pose, &a);
            let tb = se3_apply(&pose, &b);
            let d1 = (ta.position() - tb.position()).norm();
            prop_assert!((d0 - d1).abs() < 1e-9);
        }

        #[test]
        fn compose_matches_sequential_application(
            angle_a in -3.0f64..3.0,
            angle_b in -3.0f64..3.0,
            p in (-20.0f64..20.0, -20.0f64..20.0, -20.0f64..20.0),
        ) {
            let a = PoseSE3::from_axis_angle(&Vector3::z_axis(), angle_a, Vector3::new(1.0, 0.0, 0.0));
            let b = PoseSE3::from_axis_angle(&Vector3::x_axis(), angle_b, Vector3::new(0.0, -2.0, 3.0));
            let pt = Point3::new(p.0, p.1, p.2, 0.1);
            let via_compose = se3_apply(&se3_compose(&a, &b), &pt);
            let sequential = se3_apply(&a, &se3_apply(&b, &pt));
            prop_assert!((via_compose.position() - sequential.position()).norm() < 1e-9);
        }

        #[test]
        fn composition_is_associative(
            angle_a in -3.0f64..3.0,
            angle_b in -3.0f64..3.0,
            angle_c in -3.0f64..3.0,
            p in (-20.0f64..20.0, -20.0f64..20.0, -20.0f64..20.0),
        ) {
            let a = PoseSE3::from_axis_angle(&Vector3::z_axis(), angle_a, Vector3::new(0.5, 0.0, -1.0));
            let b = PoseSE3::from_axis_angle(&Vector3::y_axis(), angle_b, Vector3::new(0.0, 2.0, 0.0));
            let c = PoseSE3::from_axis_angle(&Vector3::x_axis(), angle_c, Vector3::new(-1.5, 0.0, 0.5));
            let left = se3_compose(&se3_compose(&a, &b), &c);
            let right = se3_compose(&a, &se3_compose(&b, &c));
            let pt = Point3::new(p.0, p.1, p.2, 0.1);
            let via_left = se3_apply(&left, &pt);
            let via_right = se3_apply(&right, &pt);
            prop_assert!((via_left.position() - via_right.position()).norm() < 1e-9);
        }
    }
}
