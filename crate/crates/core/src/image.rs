//! Fixed-size 2D grids with per-pixel validity masks.
//!
//! Projected LiDAR images are inherently sparse: most pixels receive no
//! return. Every grid therefore pairs its values with a mask, and consumers
//! must treat unmasked values as undefined.

use crate::error::{Error, Result};

/// A `height x width` grid of `f64` samples plus a validity mask.
///
/// Row-major storage, index `row * width + col`. Values at invalid pixels are
/// kept at 0 but carry no meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedImage {
    width: usize,
    height: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
}

/// Grid of reflectance intensities; valid values lie in `[0, 1]`.
pub type ReflectanceImage = MaskedImage;

/// Grid of ranges in meters; valid values are finite and positive.
pub type DepthImage = MaskedImage;

impl MaskedImage {
    /// All-invalid image of the given shape.
    pub fn new(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be nonzero");
        MaskedImage {
            width,
            height,
            values: vec![0.0; width * height],
            mask: vec![false; width * height],
        }
    }

    pub fn from_parts(width: usize, height: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if values.len() != width * height || mask.len() != width * height {
            return Err(Error::shape(format!(
                "buffer length {} / mask length {} does not match {}x{}",
                values.len(),
                mask.len(),
                width,
                height
            )));
        }
        Ok(MaskedImage {
            width,
            height,
            values,
            mask,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.height && col < self.width);
        row * self.width + col
    }

    #[inline]
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.mask[self.index(row, col)]
    }

    /// Value at a pixel, or `None` if the pixel is invalid.
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let i = self.index(row, col);
        if self.mask[i] {
            Some(self.values[i])
        } else {
            None
        }
    }

    /// Write a value and mark the pixel valid.
    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let i = self.index(row, col);
        self.values[i] = value;
        self.mask[i] = true;
    }

    #[inline]
    pub fn invalidate(&mut self, row: usize, col: usize) {
        let i = self.index(row, col);
        self.values[i] = 0.0;
        self.mask[i] = false;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid_count() as f64 / (self.width * self.height) as f64
    }

    pub fn same_shape(&self, other: &MaskedImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Exact (bit-level) equality of both buffers; used by determinism tests.
    pub fn bitwise_eq(&self, other: &MaskedImage) -> bool {
        self.same_shape(other)
            && self.mask == other.mask
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Per-pixel unit surface normals estimated from a depth image.
///
/// Normals are oriented toward the sensor (`n . ray < 0`), and the incidence
/// cosine `-n . ray` is cached because the compensation stage consumes it
/// directly.
#[derive(Debug, Clone)]
pub struct NormalImage {
    width: usize,
    height: usize,
    normals: Vec<[f64; 3]>,
    cos_incidence: Vec<f64>,
    mask: Vec<bool>,
}

impl NormalImage {
    pub fn new(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be nonzero");
        NormalImage {
            width,
            height,
            normals: vec![[0.0; 3]; width * height],
            cos_incidence: vec![0.0; width * height],
            mask: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.height && col < self.width);
        row * self.width + col
    }

    #[inline]
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.mask[self.index(row, col)]
    }

    pub fn normal(&self, row: usize, col: usize) -> Option<[f64; 3]> {
        let i = self.index(row, col);
        if self.mask[i] {
            Some(self.normals[i])
        } else {
            None
        }
    }

    pub fn cos_incidence(&self, row: usize, col: usize) -> Option<f64> {
        let i = self.index(row, col);
        if self.mask[i] {
            Some(self.cos_incidence[i])
        } else {
            None
        }
    }

    pub fn set(&mut self, row: usize, col: usize, normal: [f64; 3], cos_incidence: f64) {
        let i = self.index(row, col);
        self.normals[i] = normal;
        self.cos_incidence[i] = cos_incidence;
        self.mask[i] = true;
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn same_shape_as(&self, other: &MaskedImage) -> bool {
        self.width == other.width() && self.height == other.height()
    }
}
