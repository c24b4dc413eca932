//! Point-cloud-to-image projection.
//!
//! Two models are supported: a panoramic spherical projection covering the
//! full 360 degree sweep, and a pinhole-style virtual camera with a linear
//! elevation axis. Both resolve pixel conflicts by nearest range (z-buffer,
//! first point wins exact ties) and share one validity mask between the
//! reflectance and depth channels.
//!
//! The column formula of the panoramic model works in degrees and the
//! virtual-camera row uses an `H - 1` offset with an `H` denominator; both
//! are kept exactly in that form so pixel indices are reproducible.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::image::{DepthImage, MaskedImage, ReflectanceImage};

/// Which projection model to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    Panoramic,
    VirtualCamera,
}

impl std::fmt::Display for ProjectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProjectionMode::Panoramic => write!(f, "panoramic"),
            ProjectionMode::VirtualCamera => write!(f, "virtual_camera"),
        }
    }
}

/// Image geometry for a projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionConfig {
    pub mode: ProjectionMode,
    pub width: usize,
    pub height: usize,
    /// Vertical field-of-view bounds, radians.
    pub phi_min: f64,
    pub phi_max: f64,
    /// Horizontal field of view of a virtual camera, radians.
    pub horizontal_fov: f64,
    /// Rotation of the virtual camera about +z, radians; the camera looks
    /// along +x after rotating points by the negative yaw.
    pub camera_yaw: f64,
}

/// Default vertical FoV: symmetric 59 degrees.
pub fn default_phi_bounds() -> (f64, f64) {
    ((-29.5f64).to_radians(), (29.5f64).to_radians())
}

impl ProjectionConfig {
    pub fn panoramic(width: usize, height: usize, phi_min: f64, phi_max: f64) -> Result<Self> {
        let cfg = ProjectionConfig {
            mode: ProjectionMode::Panoramic,
            width,
            height,
            phi_min,
            phi_max,
            horizontal_fov: std::f64::consts::FRAC_PI_2,
            camera_yaw: 0.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn virtual_camera(
        width: usize,
        height: usize,
        phi_min: f64,
        phi_max: f64,
        horizontal_fov: f64,
        camera_yaw: f64,
    ) -> Result<Self> {
        let cfg = ProjectionConfig {
            mode: ProjectionMode::VirtualCamera,
            width,
            height,
            phi_min,
            phi_max,
            horizontal_fov,
            camera_yaw,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// 1380 x 240 panoramic grid with the default vertical FoV.
    pub fn default_panoramic() -> Self {
        let (lo, hi) = default_phi_bounds();
        ProjectionConfig::panoramic(1380, 240, lo, hi).unwrap()
    }

    /// 480 x 240 virtual camera with a 90 degree horizontal FoV.
    pub fn default_virtual_camera() -> Self {
        let (lo, hi) = default_phi_bounds();
        ProjectionConfig::virtual_camera(480, 240, lo, hi, std::f64::consts::FRAC_PI_2, 0.0)
            .unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 1 || self.height < 1 {
            return Err(Error::validation("image dimensions must be >= 1"));
        }
        if !(self.phi_min.is_finite() && self.phi_max.is_finite()) || self.phi_min >= self.phi_max
        {
            return Err(Error::validation("phi_min must be < phi_max"));
        }
        if self.mode == ProjectionMode::VirtualCamera
            && !(self.horizontal_fov > 0.0 && self.horizontal_fov < std::f64::consts::PI)
        {
            return Err(Error::validation("horizontal_fov must lie in (0, pi)"));
        }
        Ok(())
    }

    /// Pinhole focal length `f_x = W / (2 tan(hfov / 2))`.
    pub fn focal_x(&self) -> f64 {
        self.width as f64 / (2.0 * (self.horizontal_fov / 2.0).tan())
    }

    pub fn with_camera_yaw(mut self, yaw: f64) -> Self {
        self.camera_yaw = yaw;
        self
    }

    /// Azimuth of a pixel-center column, radians (panoramic).
    fn panoramic_theta(&self, col: usize) -> f64 {
        (180.0 - (col as f64 + 0.5) * 360.0 / self.width as f64).to_radians()
    }

    /// Elevation of a pixel-center row, radians (panoramic).
    fn panoramic_phi(&self, row: usize) -> f64 {
        self.phi_max - (row as f64 + 0.5) * (self.phi_max - self.phi_min) / self.height as f64
    }

    /// Lateral tangent `y/x` of a pixel-center column (virtual camera).
    fn camera_y_over_x(&self, col: usize) -> f64 {
        (self.width as f64 / 2.0 - (col as f64 + 0.5)) / self.focal_x()
    }

    /// Elevation of a pixel-center row (virtual camera); the row formula
    /// carries an `H - 1` offset with an `H` denominator.
    fn camera_elevation(&self, row: usize) -> f64 {
        let u = self.height as f64 - 1.5 - row as f64;
        self.phi_min + u * (self.phi_max - self.phi_min) / self.height as f64
    }

    fn rotate_by_yaw(&self, dir_cam: Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.camera_yaw.sin_cos();
        Vector3::new(
            c * dir_cam.x - s * dir_cam.y,
            s * dir_cam.x + c * dir_cam.y,
            dir_cam.z,
        )
    }

    /// Unit direction through the center of a pixel, in the sensor frame.
    pub fn pixel_direction(&self, row: usize, col: usize) -> Vector3<f64> {
        match self.mode {
            ProjectionMode::Panoramic => {
                let theta = self.panoramic_theta(col);
                let phi = self.panoramic_phi(row);
                Vector3::new(phi.cos() * theta.cos(), phi.cos() * theta.sin(), phi.sin())
            }
            ProjectionMode::VirtualCamera => {
                let dir_cam =
                    Vector3::new(1.0, self.camera_y_over_x(col), self.camera_elevation(row).tan())
                        .normalize();
                self.rotate_by_yaw(dir_cam)
            }
        }
    }

    /// Pixel-center directions for the whole grid, row-major.
    ///
    /// Both models factor into per-row and per-column terms, so the grid
    /// costs `O(W + H)` trigonometry instead of `O(W * H)`; entries are
    /// bit-identical to [`Self::pixel_direction`].
    pub fn direction_grid(&self) -> Vec<Vector3<f64>> {
        let (w, h) = (self.width, self.height);
        let mut grid = Vec::with_capacity(w * h);
        match self.mode {
            ProjectionMode::Panoramic => {
                let cols: Vec<(f64, f64)> = (0..w)
                    .map(|c| {
                        let theta = self.panoramic_theta(c);
                        (theta.cos(), theta.sin())
                    })
                    .collect();
                for r in 0..h {
                    let phi = self.panoramic_phi(r);
                    let (phi_sin, phi_cos) = (phi.sin(), phi.cos());
                    for &(tc, ts) in &cols {
                        grid.push(Vector3::new(phi_cos * tc, phi_cos * ts, phi_sin));
                    }
                }
            }
            ProjectionMode::VirtualCamera => {
                let cols: Vec<f64> = (0..w).map(|c| self.camera_y_over_x(c)).collect();
                for r in 0..h {
                    let tz = self.camera_elevation(r).tan();
                    for &yx in &cols {
                        grid.push(self.rotate_by_yaw(Vector3::new(1.0, yx, tz).normalize()));
                    }
                }
            }
        }
        grid
    }
}

/// Pixel coordinates of one point under the panoramic model, or `None` when
/// the point falls outside the field of view or the grid.
pub fn panoramic_pixel(p: &Point3, cfg: &ProjectionConfig) -> Option<(usize, usize)> {
    let theta_deg = p.y.atan2(p.x).to_degrees();
    let col = ((-theta_deg + 180.0) / 360.0 * cfg.width as f64).floor();
    let phi = p.z.atan2((p.x * p.x + p.y * p.y).sqrt());
    if phi < cfg.phi_min || phi > cfg.phi_max {
        return None;
    }
    let row = ((cfg.phi_max - phi) / (cfg.phi_max - cfg.phi_min) * cfg.height as f64).floor();
    in_grid(row, col, cfg)
}

/// Pixel coordinates of one point under the virtual-camera model.
///
/// `inclusive_boundary` admits points exactly on the azimuth FoV edge; the
/// public single-view projection is strict, the four-view splitter assigns
/// boundary points to the lower-yaw view and projects them inclusively.
fn virtual_pixel(p: &Point3, cfg: &ProjectionConfig, inclusive_boundary: bool) -> Option<(usize, usize)> {
    // Rotate by -camera_yaw so the camera looks along +x.
    let (s, c) = (-cfg.camera_yaw).sin_cos();
    let x = c * p.x - s * p.y;
    let y = s * p.x + c * p.y;
    if x <= 0.0 {
        return None;
    }
    let az = y.atan2(x);
    let half = cfg.horizontal_fov / 2.0;
    let in_fov = if inclusive_boundary {
        az.abs() <= half
    } else {
        az.abs() < half
    };
    if !in_fov {
        return None;
    }
    let fx = cfg.focal_x();
    let cx = cfg.width as f64 / 2.0;
    let col = (-fx * (y / x) + cx).floor();
    let elev = p.z.atan2(x);
    let row = (cfg.height as f64
        - 1.0
        - (elev - cfg.phi_min) / (cfg.phi_max - cfg.phi_min) * cfg.height as f64)
        .floor();
    in_grid(row, col, cfg)
}

/// Pixel coordinates of one point under the (strict-FoV) virtual-camera
/// model.
pub fn virtual_camera_pixel(p: &Point3, cfg: &ProjectionConfig) -> Option<(usize, usize)> {
    virtual_pixel(p, cfg, false)
}

fn in_grid(row: f64, col: f64, cfg: &ProjectionConfig) -> Option<(usize, usize)> {
    if row < 0.0 || col < 0.0 || row >= cfg.height as f64 || col >= cfg.width as f64 {
        return None;
    }
    Some((row as usize, col as usize))
}

fn rasterize<'a, F>(points: impl IntoIterator<Item = &'a Point3>, cfg: &ProjectionConfig, pixel_of: F) -> (ReflectanceImage, DepthImage)
where
    F: Fn(&Point3) -> Option<(usize, usize)>,
{
    let mut reflectance = MaskedImage::new(cfg.width, cfg.height);
    let mut depth = MaskedImage::new(cfg.width, cfg.height);
    for p in points {
        let Some((row, col)) = pixel_of(p) else {
            continue;
        };
        let range = p.range();
        match depth.get(row, col) {
            // Nearest range wins; the first point keeps exact ties.
            Some(current) if current <= range => {}
            _ => {
                depth.set(row, col, range);
                reflectance.set(row, col, p.intensity);
            }
        }
    }
    (reflectance, depth)
}

/// Projects points through the panoramic spherical model.
pub fn project_panoramic(points: &[Point3], cfg: &ProjectionConfig) -> Result<(ReflectanceImage, DepthImage)> {
    cfg.validate()?;
    if cfg.mode != ProjectionMode::Panoramic {
        return Err(Error::validation("config mode must be panoramic"));
    }
    Ok(rasterize(points, cfg, |p| panoramic_pixel(p, cfg)))
}

/// Projects points through a single virtual camera.
pub fn project_virtual_camera(points: &[Point3], cfg: &ProjectionConfig) -> Result<(ReflectanceImage, DepthImage)> {
    cfg.validate()?;
    if cfg.mode != ProjectionMode::VirtualCamera {
        return Err(Error::validation("config mode must be virtual_camera"));
    }
    Ok(rasterize(points, cfg, |p| virtual_pixel(p, cfg, false)))
}

/// Projects points with whichever model the config selects.
pub fn project(points: &[Point3], cfg: &ProjectionConfig) -> Result<(ReflectanceImage, DepthImage)> {
    match cfg.mode {
        ProjectionMode::Panoramic => project_panoramic(points, cfg),
        ProjectionMode::VirtualCamera => project_virtual_camera(points, cfg),
    }
}

/// Wraps an angle into `(-pi, pi]`.
fn wrap_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a <= -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    } else if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    }
    a
}

/// Projects into four virtual cameras at yaw 0, 90, 180 and 270 degrees.
///
/// Each point is assigned to exactly one view by its azimuth sector; a point
/// exactly on a sector boundary goes to the lower-yaw view.
pub fn project_four_views(points: &[Point3], base: &ProjectionConfig) -> Result<Vec<(ReflectanceImage, DepthImage)>> {
    base.validate()?;
    if base.mode != ProjectionMode::VirtualCamera {
        return Err(Error::validation("config mode must be virtual_camera"));
    }
    let yaws = [
        0.0,
        std::f64::consts::FRAC_PI_2,
        std::f64::consts::PI,
        1.5 * std::f64::consts::PI,
    ];
    let half = base.horizontal_fov / 2.0;
    let mut buckets: [Vec<Point3>; 4] = Default::default();
    for p in points {
        let az = p.y.atan2(p.x);
        for (view, yaw) in yaws.iter().enumerate() {
            if wrap_angle(az - yaw).abs() <= half {
                buckets[view].push(*p);
                break;
            }
        }
    }
    let mut out = Vec::with_capacity(4);
    for (bucket, yaw) in buckets.iter().zip(yaws) {
        let cfg = base.with_camera_yaw(yaw);
        out.push(rasterize(bucket, &cfg, |p| virtual_pixel(p, &cfg, true)));
    }
    Ok(out)
}
