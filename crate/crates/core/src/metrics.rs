//! Masked image-quality metrics: PSNR, SSIM, RMSE, MAE.
//!
//! All metrics operate on the normalized `[0, 1]` intensity range
//! (dynamic range fixed at 1.0). Two mask policies are supported: the
//! intersection of both validity masks, or ground-truth-valid pixels with
//! invalid predictions treated as 0. SSIM follows the standard 11x11
//! Gaussian-window formulation (sigma 1.5, C1 = 0.01^2, C2 = 0.03^2) and is
//! averaged only over windows that lie fully inside the evaluation mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ReflectanceImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPolicy {
    Intersection,
    GtOnly,
}

impl std::str::FromStr for MaskPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intersection" => Ok(MaskPolicy::Intersection),
            "gt_only" => Ok(MaskPolicy::GtOnly),
            other => Err(Error::validation(format!("unknown mask policy `{other}`"))),
        }
    }
}

/// Metric values over one evaluation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// Peak signal-to-noise ratio in dB; `f64::INFINITY` when RMSE is 0 (see
    /// `psnr_infinite`).
    pub psnr_db: f64,
    /// True when RMSE was exactly 0 and PSNR is unbounded.
    pub psnr_infinite: bool,
    /// Mean local SSIM; NaN if no complete 11x11 window fits in the mask.
    pub ssim: f64,
    pub rmse: f64,
    pub mae: f64,
    /// Number of pixels in the evaluation mask.
    pub n_pixels: usize,
    pub mask_policy: MaskPolicy,
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Compares a prediction against ground truth over the chosen mask.
pub fn evaluate(
    pred: &ReflectanceImage,
    gt: &ReflectanceImage,
    policy: MaskPolicy,
) -> Result<MetricReport> {
    if !pred.same_shape(gt) {
        return Err(Error::shape(format!(
            "pred {}x{} vs gt {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let (w, h) = (pred.width(), pred.height());
    let n_total = w * h;

    // Evaluation mask and the value planes actually compared.
    let mut mask = vec![false; n_total];
    let mut pv = vec![0.0f64; n_total];
    let mut gv = vec![0.0f64; n_total];
    let mut n_pixels = 0usize;
    for i in 0..n_total {
        let in_mask = match policy {
            MaskPolicy::Intersection => pred.mask()[i] && gt.mask()[i],
            MaskPolicy::GtOnly => gt.mask()[i],
        };
        if in_mask {
            mask[i] = true;
            pv[i] = if pred.mask()[i] { pred.values()[i] } else { 0.0 };
            gv[i] = gt.values()[i];
            n_pixels += 1;
        }
    }
    if n_pixels == 0 {
        return Err(Error::validation("evaluation mask is empty"));
    }

    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    for i in 0..n_total {
        if mask[i] {
            let d = pv[i] - gv[i];
            abs_sum += d.abs();
            sq_sum += d * d;
        }
    }
    let mae = abs_sum / n_pixels as f64;
    let rmse = (sq_sum / n_pixels as f64).sqrt();
    let psnr_infinite = rmse == 0.0;
    let psnr_db = if psnr_infinite {
        f64::INFINITY
    } else {
        20.0 * (1.0 / rmse).log10()
    };

    let ssim = masked_ssim(&pv, &gv, &mask, w, h);

    Ok(MetricReport {
        psnr_db,
        psnr_infinite,
        ssim,
        rmse,
        mae,
        n_pixels,
        mask_policy: policy,
    })
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as isize;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as isize - half;
        *v = (-(d * d) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable horizontal-then-vertical convolution with the 1D kernel.
fn convolve(plane: &[f64], w: usize, h: usize, kernel: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let half = SSIM_WINDOW / 2;
    let mut tmp = vec![0.0; plane.len()];
    for row in 0..h {
        for col in half..w.saturating_sub(half) {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * plane[row * w + col + k - half];
            }
            tmp[row * w + col] = acc;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for row in half..h.saturating_sub(half) {
        for col in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[(row + k - half) * w + col];
            }
            out[row * w + col] = acc;
        }
    }
    out
}

/// Windows fully inside the mask, via a box filter over the mask counts.
fn full_windows(mask: &[bool], w: usize, h: usize) -> Vec<bool> {
    let half = SSIM_WINDOW / 2;
    let mut full = vec![false; mask.len()];
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return full;
    }
    // integral image of the mask
    let mut integral = vec![0i64; (w + 1) * (h + 1)];
    for row in 0..h {
        for col in 0..w {
            integral[(row + 1) * (w + 1) + col + 1] = integral[row * (w + 1) + col + 1]
                + integral[(row + 1) * (w + 1) + col]
                - integral[row * (w + 1) + col]
                + mask[row * w + col] as i64;
        }
    }
    let area = (SSIM_WINDOW * SSIM_WINDOW) as i64;
    for row in half..h - half {
        for col in half..w - half {
            let r0 = row - half;
            let c0 = col - half;
            let r1 = row + half + 1;
            let c1 = col + half + 1;
            let count = integral[r1 * (w + 1) + c1] - integral[r0 * (w + 1) + c1]
                - integral[r1 * (w + 1) + c0]
                + integral[r0 * (w + 1) + c0];
            full[row * w + col] = count == area;
        }
    }
    full
}

fn masked_ssim(pv: &[f64], gv: &[f64], mask: &[bool], w: usize, h: usize) -> f64 {
    let full = full_windows(mask, w, h);
    if !full.iter().any(|&f| f) {
        return f64::NAN;
    }
    let kernel = gaussian_kernel();
    let xx: Vec<f64> = pv.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = gv.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = pv.iter().zip(gv).map(|(a, b)| a * b).collect();

    let mu_x = convolve(pv, w, h, &kernel);
    let mu_y = convolve(gv, w, h, &kernel);
    let e_xx = convolve(&xx, w, h, &kernel);
    let e_yy = convolve(&yy, w, h, &kernel);
    let e_xy = convolve(&xy, w, h, &kernel);

    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..pv.len() {
        if !full[i] {
            continue;
        }
        let (mx, my) = (mu_x[i], mu_y[i]);
        let var_x = e_xx[i] - mx * mx;
        let var_y = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        let num = (2.0 * (mx * my) + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (mx * mx + my * my + SSIM_C1) * (var_x + var_y + SSIM_C2);
        sum += num / den;
        count += 1;
    }
    sum / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn full_image(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> ReflectanceImage {
        let mut img = ReflectanceImage::new(w, h);
        for r in 0..h {
            for c in 0..w {
                img.set(r, c, f(r, c));
            }
        }
        img
    }

    fn textured(w: usize, h: usize) -> ReflectanceImage {
        full_image(w, h, |r, c| {
            0.5 + 0.3 * ((r as f64 * 0.37).sin() * (c as f64 * 0.21).cos())
        })
    }

    #[test]
    fn identity_comparison() {
        let img = textured(64, 48);
        let report = evaluate(&img, &img, MaskPolicy::Intersection).unwrap();
        assert_eq!(report.mae, 0.0);
        assert_eq!(report.rmse, 0.0);
        assert!(report.psnr_infinite);
        assert!(report.psnr_db.is_infinite());
        assert_eq!(report.ssim, 1.0);
        assert_eq!(report.n_pixels, 64 * 48);
    }

    #[test]
    fn constant_offset_closed_form() {
        // RMSE 0.1 -> PSNR = 20 log10(10) = 20 dB exactly.
        let gt = full_image(40, 30, |r, c| 0.2 + 0.5 * ((r + c) % 7) as f64 / 10.0);
        let mut pred = ReflectanceImage::new(40, 30);
        for r in 0..30 {
            for c in 0..40 {
                pred.set(r, c, gt.get(r, c).unwrap() + 0.1);
            }
        }
        let report = evaluate(&pred, &gt, MaskPolicy::Intersection).unwrap();
        assert_relative_eq!(report.rmse, 0.1, epsilon = 1e-12);
        assert_relative_eq!(report.mae, 0.1, epsilon = 1e-12);
        assert!((report.psnr_db - 20.0).abs() < 1e-3);
    }

    #[test]
    fn inverted_checkerboard_closed_form() {
        let gt = full_image(32, 32, |r, c| ((r + c) % 2) as f64);
        let pred = full_image(32, 32, |r, c| ((r + c + 1) % 2) as f64);
        let report = evaluate(&pred, &gt, MaskPolicy::Intersection).unwrap();
        assert_eq!(report.mae, 1.0);
        assert_eq!(report.rmse, 1.0);
        assert_eq!(report.psnr_db, 0.0);
    }

    #[test]
    fn empty_mask_and_shape_mismatch_are_errors() {
        let a = ReflectanceImage::new(8, 8);
        let b = ReflectanceImage::new(8, 8);
        assert!(evaluate(&a, &b, MaskPolicy::Intersection).is_err());
        let c = ReflectanceImage::new(9, 8);
        assert!(evaluate(&c, &b, MaskPolicy::Intersection).is_err());
    }

    #[test]
    fn gt_only_policy_counts_missing_pred_as_zero() {
        let gt = full_image(4, 1, |_, _| 0.5);
        let mut pred = ReflectanceImage::new(4, 1);
        pred.set(0, 0, 0.5);
        pred.set(0, 1, 0.5);
        // two missing pred pixels read as 0 -> |diff| = 0.5 on half the mask
        let report = evaluate(&pred, &gt, MaskPolicy::GtOnly).unwrap();
        assert_eq!(report.n_pixels, 4);
        assert_relative_eq!(report.mae, 0.25, epsilon = 1e-12);
        let intersection = evaluate(&pred, &gt, MaskPolicy::Intersection).unwrap();
        assert_eq!(intersection.n_pixels, 2);
        assert_eq!(intersection.mae, 0.0);
    }

    #[test]
    fn error_metrics_are_symmetric() {
        let a = textured(50, 40);
        let b = full_image(50, 40, |r, c| 0.3 + 0.4 * ((r * c) % 5) as f64 / 5.0);
        let ab = evaluate(&a, &b, MaskPolicy::Intersection).unwrap();
        let ba = evaluate(&b, &a, MaskPolicy::Intersection).unwrap();
        assert_eq!(ab.rmse, ba.rmse);
        assert_eq!(ab.mae, ba.mae);
        assert_relative_eq!(ab.ssim, ba.ssim, epsilon = 1e-12);
    }

    #[test]
    fn unmasked_pixels_cannot_influence_the_report() {
        let mut gt = textured(40, 40);
        let mut pred = textured(40, 40);
        for r in 0..40 {
            for c in 0..8 {
                gt.invalidate(r, c);
            }
        }
        let before = evaluate(&pred, &gt, MaskPolicy::GtOnly).unwrap();
        // perturb pred inside the gt-invalid stripe
        for r in 0..40 {
            for c in 0..8 {
                pred.set(r, c, 0.99);
            }
        }
        let after = evaluate(&pred, &gt, MaskPolicy::GtOnly).unwrap();
        assert_eq!(before.rmse, after.rmse);
        assert_eq!(before.mae, after.mae);
        assert_eq!(before.ssim.to_bits(), after.ssim.to_bits());
    }

    #[test]
    fn ssim_penalizes_structural_noise_more_than_bias() {
        let gt = textured(64, 64);
        let biased = full_image(64, 64, |r, c| (gt.get(r, c).unwrap() + 0.02).min(1.0));
        let mut noisy = ReflectanceImage::new(64, 64);
        for r in 0..64 {
            for c in 0..64 {
                let sign = if (r * 31 + c * 17) % 2 == 0 { 1.0 } else { -1.0 };
                noisy.set(r, c, (gt.get(r, c).unwrap() + sign * 0.02).clamp(0.0, 1.0));
            }
        }
        let b = evaluate(&biased, &gt, MaskPolicy::Intersection).unwrap();
        let n = evaluate(&noisy, &gt, MaskPolicy::Intersection).unwrap();
        assert!(b.ssim > n.ssim);
    }

    #[test]
    fn ssim_nan_when_no_window_fits() {
        let a = full_image(8, 8, |_, _| 0.5); // smaller than the 11x11 window
        let report = evaluate(&a, &a, MaskPolicy::Intersection).unwrap();
        assert!(report.ssim.is_nan());
        assert!(report.psnr_infinite);
    }
}
