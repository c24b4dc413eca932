//! Classical sparse-to-dense reflectance completion.
//!
//! Multi-scale morphological hole filling: at each (odd, ascending) window
//! size, every invalid pixel with at least one valid neighbor inside the
//! window is filled from that neighborhood, either by the neighbor nearest in
//! depth (foreground-preserving, like the projection z-buffer) or by the
//! median-intensity neighbor. Valid pixels are never modified, so the mask
//! only grows. An optional edge-aware (bilateral-style) smoothing pass is
//! applied to the filled pixels afterwards.
//!
//! The densifier interface takes and returns (reflectance, depth) pairs so a
//! learned backend can be swapped in without touching callers. The
//! reflectance mask is authoritative: depth values are consulted only at
//! reflectance-valid pixels, and the output pair shares one mask.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{DepthImage, MaskedImage, ReflectanceImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensifyMethod {
    MultiscaleMorph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    None,
    EdgeAware,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillGuide {
    /// Median-intensity valid neighbor.
    None,
    /// Valid neighbor nearest in depth.
    Depth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensifyConfig {
    pub method: DensifyMethod,
    /// Odd window sizes, ascending.
    pub scales: Vec<usize>,
    pub smoothing: Smoothing,
    /// Range-kernel sigma of the edge-aware pass, intensity units.
    pub edge_sigma_r: f64,
    pub guide: FillGuide,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        DensifyConfig {
            method: DensifyMethod::MultiscaleMorph,
            scales: vec![3, 5, 9],
            smoothing: Smoothing::EdgeAware,
            edge_sigma_r: 0.1,
            guide: FillGuide::Depth,
        }
    }
}

impl DensifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::validation("at least one fill scale is required"));
        }
        let mut prev = 1;
        for &s in &self.scales {
            if s % 2 == 0 || s < 3 {
                return Err(Error::validation(format!("scale {s} must be odd and >= 3")));
            }
            if s <= prev {
                return Err(Error::validation("scales must be strictly ascending"));
            }
            prev = s;
        }
        if !self.edge_sigma_r.is_finite() || self.edge_sigma_r <= 0.0 {
            return Err(Error::validation("edge_sigma_r must be > 0"));
        }
        Ok(())
    }
}

struct Buffers {
    refl: Vec<f64>,
    depth: Vec<f64>,
    mask: Vec<bool>,
}

/// Fills invalid pixels progressively and optionally smooths the fills.
pub fn densify(
    reflectance: &ReflectanceImage,
    depth: &DepthImage,
    cfg: &DensifyConfig,
) -> Result<(ReflectanceImage, DepthImage)> {
    cfg.validate()?;
    if !reflectance.same_shape(depth) {
        return Err(Error::shape("reflectance and depth must share a shape"));
    }
    let (w, h) = (reflectance.width(), reflectance.height());
    let mut buf = Buffers {
        refl: reflectance.values().to_vec(),
        depth: depth.values().to_vec(),
        mask: reflectance.mask().to_vec(),
    };

    let DensifyMethod::MultiscaleMorph = cfg.method;
    for &window in &cfg.scales {
        buf = fill_pass(&buf, w, h, window, cfg.guide);
    }

    if cfg.smoothing == Smoothing::EdgeAware {
        let filled: Vec<bool> = buf
            .mask
            .iter()
            .zip(reflectance.mask())
            .map(|(&now, &before)| now && !before)
            .collect();
        buf.refl = smooth_filled(&buf, &filled, w, h, cfg.edge_sigma_r);
    }

    let out_refl = MaskedImage::from_parts(w, h, buf.refl, buf.mask.clone())?;
    let out_depth = MaskedImage::from_parts(w, h, buf.depth, buf.mask)?;
    Ok((out_refl, out_depth))
}

/// One double-buffered fill pass: reads only the previous grids, so rows are
/// independent and the result does not depend on tiling.
fn fill_pass(prev: &Buffers, w: usize, h: usize, window: usize, guide: FillGuide) -> Buffers {
    let half = window / 2;
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|row| {
            let mut refl_row = Vec::with_capacity(w);
            let mut depth_row = Vec::with_capacity(w);
            let mut mask_row = Vec::with_capacity(w);
            for col in 0..w {
                let idx = row * w + col;
                if prev.mask[idx] {
                    refl_row.push(prev.refl[idx]);
                    depth_row.push(prev.depth[idx]);
                    mask_row.push(true);
                    continue;
                }
                match fill_from_window(prev, w, h, row, col, half, guide) {
                    Some((i, d)) => {
                        refl_row.push(i);
                        depth_row.push(d);
                        mask_row.push(true);
                    }
                    None => {
                        refl_row.push(0.0);
                        depth_row.push(0.0);
                        mask_row.push(false);
                    }
                }
            }
            (refl_row, depth_row, mask_row)
        })
        .collect();

    let mut out = Buffers {
        refl: Vec::with_capacity(w * h),
        depth: Vec::with_capacity(w * h),
        mask: Vec::with_capacity(w * h),
    };
    for (r, d, m) in rows {
        out.refl.extend(r);
        out.depth.extend(d);
        out.mask.extend(m);
    }
    out
}

/// Chooses the donor pixel for one hole, scanning the window in row-major
/// order so ties resolve deterministically.
fn fill_from_window(
    prev: &Buffers,
    w: usize,
    h: usize,
    row: usize,
    col: usize,
    half: usize,
    guide: FillGuide,
) -> Option<(f64, f64)> {
    let r0 = row.saturating_sub(half);
    let r1 = (row + half).min(h - 1);
    let c0 = col.saturating_sub(half);
    let c1 = (col + half).min(w - 1);
    match guide {
        FillGuide::Depth => {
            let mut best: Option<(f64, f64)> = None;
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let i = r * w + c;
                    if !prev.mask[i] {
                        continue;
                    }
                    match best {
                        Some((_, d)) if d <= prev.depth[i] => {}
                        _ => best = Some((prev.refl[i], prev.depth[i])),
                    }
                }
            }
            best
        }
        FillGuide::None => {
            let mut neighbors: Vec<(f64, f64)> = Vec::new();
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let i = r * w + c;
                    if prev.mask[i] {
                        neighbors.push((prev.refl[i], prev.depth[i]));
                    }
                }
            }
            if neighbors.is_empty() {
                return None;
            }
            // Lower median by intensity keeps the donor an actual neighbor.
            neighbors.sort_by(|a, b| a.0.total_cmp(&b.0));
            Some(neighbors[(neighbors.len() - 1) / 2])
        }
    }
}

/// Bilateral-style smoothing over a 3x3 domain, applied to filled pixels only.
fn smooth_filled(buf: &Buffers, filled: &[bool], w: usize, h: usize, sigma_r: f64) -> Vec<f64> {
    let inv_2sr2 = 1.0 / (2.0 * sigma_r * sigma_r);
    (0..h)
        .into_par_iter()
        .flat_map_iter(|row| {
            let buf = &buf;
            (0..w).map(move |col| {
                let idx = row * w + col;
                if !filled[idx] {
                    return buf.refl[idx];
                }
                let center = buf.refl[idx];
                let mut num = 0.0;
                let mut den = 0.0;
                let r0 = row.saturating_sub(1);
                let r1 = (row + 1).min(h - 1);
                let c0 = col.saturating_sub(1);
                let c1 = (col + 1).min(w - 1);
                for r in r0..=r1 {
                    for c in c0..=c1 {
                        let i = r * w + c;
                        if !buf.mask[i] {
                            continue;
                        }
                        let dr = r as f64 - row as f64;
                        let dc = c as f64 - col as f64;
                        let spatial = (-(dr * dr + dc * dc) / 2.0).exp();
                        let diff = buf.refl[i] - center;
                        let range = (-diff * diff * inv_2sr2).exp();
                        num += spatial * range * buf.refl[i];
                        den += spatial * range;
                    }
                }
                if den > 0.0 {
                    num / den
                } else {
                    center
                }
            })
        })
        .collect()
}
