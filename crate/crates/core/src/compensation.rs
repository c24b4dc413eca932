//! Physics-based intensity compensation.
//!
//! A LiDAR return weakens with range (inverse-square plus a near-field
//! optical factor) and with the incidence angle (Lambert cosine). This module
//! provides the forward intensity model, the exact closed-form correction,
//! the parameterized polynomial-exponential range factor, image-level
//! compensation, and a damped Gauss-Newton fit of the factor parameters from
//! controlled calibration samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{DepthImage, NormalImage, ReflectanceImage};

/// Hardware constants of the near-field attenuation factor.
///
/// Serialized keys follow the conventional symbols (`r_d`, `d`, `D`, `S_d`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaConstants {
    /// Detector radius, meters.
    #[serde(rename = "r_d")]
    pub detector_radius: f64,
    /// Offset between measured range and true object distance, meters.
    #[serde(rename = "d")]
    pub range_offset: f64,
    /// Lens diameter, meters.
    #[serde(rename = "D")]
    pub lens_diameter: f64,
    /// Focal length, meters.
    #[serde(rename = "S_d")]
    pub focal_length: f64,
}

impl Default for EtaConstants {
    fn default() -> Self {
        // Placeholder optics; real sensors ship their own constants via the
        // params file.
        EtaConstants {
            detector_radius: 0.01,
            range_offset: 0.05,
            lens_diameter: 0.03,
            focal_length: 0.1,
        }
    }
}

impl EtaConstants {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.detector_radius,
            self.range_offset,
            self.lens_diameter,
            self.focal_length,
        ];
        if all.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::validation("eta constants must be finite and > 0"));
        }
        Ok(())
    }
}

/// Near-field attenuation of the received optical power:
/// `1 - exp(-2 r_d^2 (R + d)^2 / (D^2 S_d^2))`.
///
/// Strictly increasing in range and approaching 1 in the far field.
pub fn near_field_factor(range: f64, k: &EtaConstants) -> f64 {
    let num = 2.0 * k.detector_radius * k.detector_radius * (range + k.range_offset).powi(2);
    let den = k.lens_diameter * k.lens_diameter * k.focal_length * k.focal_length;
    1.0 - (-num / den).exp()
}

/// Received intensity of a surface return: `eta(R) I_e rho cos(alpha) / R^2`.
///
/// The system proportionality constant is folded into the emission power.
pub fn forward_intensity(
    range: f64,
    cos_alpha: f64,
    rho: f64,
    emission: f64,
    k: &EtaConstants,
) -> Result<f64> {
    if range <= 0.0 {
        return Err(Error::numerical("forward intensity undefined at range <= 0"));
    }
    Ok(near_field_factor(range, k) * emission * rho * cos_alpha / (range * range))
}

/// The full parameter set of the compensation model.
///
/// `alpha/beta/gamma/lambda` shape the range factor, `kappa` is the global
/// output scale, `c` the closed-form proportionality constant, and
/// `cos_min`/`r_ref` configure the grazing-angle cutoff and the gauge range
/// at which the factor is normalized to the exact closed form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompensationParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub kappa: f64,
    #[serde(flatten)]
    pub eta: EtaConstants,
    pub c: f64,
    pub cos_min: f64,
    pub r_ref: f64,
}

impl Default for CompensationParams {
    fn default() -> Self {
        // alpha=1, beta=gamma=lambda=0 makes the range factor exactly the
        // closed-form R^2 / eta(R).
        CompensationParams {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.0,
            lambda: 0.0,
            kappa: 1.0,
            eta: EtaConstants::default(),
            c: 1.0,
            cos_min: 0.1,
            r_ref: 10.0,
        }
    }
}

impl CompensationParams {
    /// Near-neutral parameters: `g(R) = 1 / eta(R)` (approximately 1 outside
    /// the near field) and unit scale, so compensation reduces to the Lambert
    /// cosine division. The sensible choice when no fitted calibration is
    /// available.
    pub fn neutral() -> Self {
        CompensationParams {
            alpha: 0.0,
            beta: 0.0,
            gamma: 1.0,
            ..CompensationParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.eta.validate()?;
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::validation("lambda must be finite and >= 0"));
        }
        if !self.kappa.is_finite() || self.kappa <= 0.0 {
            return Err(Error::validation("kappa must be finite and > 0"));
        }
        if !self.c.is_finite() || self.c <= 0.0 {
            return Err(Error::validation("c must be finite and > 0"));
        }
        if !(self.cos_min > 0.0 && self.cos_min < 1.0) {
            return Err(Error::validation("cos_min must lie in (0, 1)"));
        }
        if !self.r_ref.is_finite() || self.r_ref <= 0.0 {
            return Err(Error::validation("r_ref must be > 0"));
        }
        Ok(())
    }

    /// Polynomial part `alpha R^2 + beta R + gamma`.
    fn polynomial(&self, range: f64) -> f64 {
        (self.alpha * range + self.beta) * range + self.gamma
    }

    /// Checks `g(R) > 0` over `[r_min, r_max]` by examining the polynomial at
    /// the interval ends and at its vertex.
    pub fn validate_over(&self, r_min: f64, r_max: f64) -> Result<()> {
        self.validate()?;
        if !(r_min > 0.0 && r_max >= r_min) {
            return Err(Error::validation("operating range must satisfy 0 < r_min <= r_max"));
        }
        let mut candidates = vec![r_min, r_max];
        if self.alpha != 0.0 {
            let vertex = -self.beta / (2.0 * self.alpha);
            if vertex > r_min && vertex < r_max {
                candidates.push(vertex);
            }
        }
        for r in candidates {
            if self.polynomial(r) <= 0.0 {
                return Err(Error::validation(format!(
                    "range factor not positive at R = {r} over [{r_min}, {r_max}]"
                )));
            }
        }
        Ok(())
    }
}

/// One controlled calibration measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibSample {
    /// Measured intensity, normalized to `[0, 1]`.
    pub intensity: f64,
    /// Range to the target, meters.
    pub range: f64,
    /// Cosine of the incidence angle, in `(0, 1]`.
    pub cos_alpha: f64,
    /// Identifier of the target material.
    pub material_id: u32,
}

impl CalibSample {
    pub fn validate(&self) -> Result<()> {
        if !(self.intensity.is_finite() && (0.0..=1.0).contains(&self.intensity)) {
            return Err(Error::validation("sample intensity outside [0, 1]"));
        }
        if !(self.range.is_finite() && self.range > 0.0) {
            return Err(Error::validation("sample range must be > 0"));
        }
        if !(self.cos_alpha.is_finite() && self.cos_alpha > 0.0 && self.cos_alpha <= 1.0) {
            return Err(Error::validation("sample cos_alpha outside (0, 1]"));
        }
        Ok(())
    }
}

/// Exact closed-form correction: `C I R^2 / (eta(R) rho cos(alpha))`.
///
/// Inverts [`forward_intensity`] identically for `C = 1`, recovering the
/// emission power regardless of range or angle.
pub fn correct_closed_form(sample: &CalibSample, rho: f64, params: &CompensationParams) -> Result<f64> {
    if sample.cos_alpha <= 0.0 {
        return Err(Error::numerical("grazing angle: cos_alpha must be > 0"));
    }
    if rho <= 0.0 {
        return Err(Error::numerical("surface reflectance must be > 0"));
    }
    let eta = near_field_factor(sample.range, &params.eta);
    if eta <= 0.0 {
        return Err(Error::numerical("near-field factor vanished"));
    }
    Ok(params.c * sample.intensity * sample.range * sample.range / (eta * rho * sample.cos_alpha))
}

/// Parameterized range factor
/// `g(R) = (alpha R^2 + beta R + gamma) exp(-lambda R) / eta(R)`.
///
/// With `alpha = 1, beta = gamma = lambda = 0` this reduces exactly to the
/// closed-form factor `R^2 / eta(R)`.
pub fn range_factor(range: f64, params: &CompensationParams) -> Result<f64> {
    if range <= 0.0 {
        return Err(Error::numerical("range factor undefined at range <= 0"));
    }
    let eta = near_field_factor(range, &params.eta);
    let g = params.polynomial(range) * (-params.lambda * range).exp() / eta;
    if !g.is_finite() || g <= 0.0 {
        return Err(Error::validation(format!(
            "range factor must be positive, got {g} at R = {range}"
        )));
    }
    Ok(g)
}

/// Applies the compensation `I / (g(R) cos(alpha) kappa)` per pixel.
///
/// Pixels missing depth or a normal, or with incidence cosine below
/// `cos_min`, are marked invalid. Outputs are clamped to `[0, 1]`.
pub fn compensate_image(
    reflectance: &ReflectanceImage,
    depth: &DepthImage,
    normals: &NormalImage,
    params: &CompensationParams,
) -> Result<ReflectanceImage> {
    if !reflectance.same_shape(depth) || !normals.same_shape_as(reflectance) {
        return Err(Error::shape("reflectance, depth and normals must share a shape"));
    }
    params.validate()?;
    // Validate the factor over the actual depth span once, so the per-pixel
    // loop cannot hit a non-positive factor.
    let mut r_min = f64::INFINITY;
    let mut r_max = 0.0f64;
    for (value, valid) in depth.values().iter().zip(depth.mask()) {
        if *valid {
            r_min = r_min.min(*value);
            r_max = r_max.max(*value);
        }
    }
    if r_min.is_finite() {
        self::CompensationParams::validate_over(params, r_min, r_max)?;
    }

    let (w, h) = (reflectance.width(), reflectance.height());
    let mut out = ReflectanceImage::new(w, h);
    for row in 0..h {
        for col in 0..w {
            let (Some(intensity), Some(range), Some(cos_alpha)) = (
                reflectance.get(row, col),
                depth.get(row, col),
                normals.cos_incidence(row, col),
            ) else {
                continue;
            };
            if cos_alpha < params.cos_min {
                continue;
            }
            let g = range_factor(range, params)?;
            let corrected = (intensity / (g * cos_alpha * params.kappa)).clamp(0.0, 1.0);
            out.set(row, col, corrected);
        }
    }
    Ok(out)
}

/// Options for [`fit_params`].
#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Convergence threshold on the L2 norm of `J^T r`.
    pub gradient_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iterations: 200,
            gradient_tol: 1e-8,
        }
    }
}

/// Outcome of a parameter fit.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub iterations: usize,
    /// RMS of the final relative residuals.
    pub residual_rms: f64,
    pub gradient_norm: f64,
    pub converged: bool,
    /// Objective value after each accepted iteration; non-increasing.
    pub cost_history: Vec<f64>,
}

const LAMBDA_FLOOR: f64 = 1e-12;

struct FitProblem<'a> {
    samples: &'a [CalibSample],
    eta_cache: Vec<f64>,
    /// Group index per sample (materials in sorted-id order).
    group_of: Vec<usize>,
    n_groups: usize,
}

impl<'a> FitProblem<'a> {
    fn new(samples: &'a [CalibSample], eta: &EtaConstants) -> Self {
        let mut ids: Vec<u32> = samples.iter().map(|s| s.material_id).collect();
        ids.sort_unstable();
        ids.dedup();
        let group_of = samples
            .iter()
            .map(|s| ids.binary_search(&s.material_id).unwrap())
            .collect();
        let eta_cache = samples
            .iter()
            .map(|s| near_field_factor(s.range, eta))
            .collect();
        FitProblem {
            samples,
            eta_cache,
            group_of,
            n_groups: ids.len(),
        }
    }

    /// Corrected intensities for the parameter vector
    /// `p = [alpha, beta, gamma, ln(lambda), ln(kappa)]`, or `None` whenever
    /// the polynomial is not positive at some sample range.
    fn corrected(&self, p: &[f64; 5]) -> Option<Vec<f64>> {
        let lambda = p[3].exp();
        let kappa = p[4].exp();
        let mut out = Vec::with_capacity(self.samples.len());
        for (s, eta) in self.samples.iter().zip(&self.eta_cache) {
            let poly = (p[0] * s.range + p[1]) * s.range + p[2];
            if poly <= 0.0 {
                return None;
            }
            let g = poly * (-lambda * s.range).exp() / eta;
            let c = s.intensity / (g * s.cos_alpha * kappa);
            if !c.is_finite() {
                return None;
            }
            out.push(c);
        }
        Some(out)
    }

    /// Per-material mean of the corrected intensities.
    fn targets(&self, corrected: &[f64]) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_groups];
        let mut counts = vec![0usize; self.n_groups];
        for (c, &g) in corrected.iter().zip(&self.group_of) {
            sums[g] += c;
            counts[g] += 1;
        }
        sums.iter()
            .zip(&counts)
            .map(|(s, &n)| s / n as f64)
            .collect()
    }

    /// Relative residuals `c_i / t_m - 1` against fixed targets.
    fn residuals(&self, corrected: &[f64], targets: &[f64]) -> Vec<f64> {
        corrected
            .iter()
            .zip(&self.group_of)
            .map(|(c, &g)| c / targets[g] - 1.0)
            .collect()
    }

    fn cost(residuals: &[f64]) -> f64 {
        residuals.iter().map(|r| r * r).sum()
    }

    /// Objective at `p` with targets re-estimated from `p` itself.
    fn alternated_cost(&self, p: &[f64; 5]) -> Option<f64> {
        let c = self.corrected(p)?;
        let t = self.targets(&c);
        Some(Self::cost(&self.residuals(&c, &t)))
    }
}

fn distinct_count(values: impl Iterator<Item = f64>) -> usize {
    let mut seen: Vec<u64> = values.map(f64::to_bits).collect();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// Deterministic initialization: a coarse grid over the exponential decay
/// rate, with the polynomial solved by alternating linear least squares at
/// each candidate. The best candidate (including the caller's own init) seeds
/// the Gauss-Newton refinement.
fn initialize(problem: &FitProblem<'_>, init: &CompensationParams) -> [f64; 5] {
    let v = init.kappa.max(LAMBDA_FLOOR).ln();
    let init_vec = [
        init.alpha,
        init.beta,
        init.gamma,
        init.lambda.max(LAMBDA_FLOOR).ln(),
        v,
    ];
    let mut best = init_vec;
    let mut best_cost = problem.alternated_cost(&init_vec).unwrap_or(f64::INFINITY);

    let mut grid = vec![
        LAMBDA_FLOOR,
        0.005,
        0.01,
        0.02,
        0.04,
        0.06,
        0.09,
        0.12,
        0.16,
        0.22,
        0.3,
    ];
    if init.lambda > 0.0 {
        grid.push(init.lambda);
    }
    for &lambda in &grid {
        if let Some(candidate) = poly_for_lambda(problem, lambda, v) {
            if let Some(cost) = problem.alternated_cost(&candidate) {
                if cost < best_cost {
                    best_cost = cost;
                    best = candidate;
                }
            }
        }
    }
    best
}

/// For a fixed decay rate, alternates per-material scales with a linear
/// least-squares solve of the polynomial coefficients.
///
/// The solve is in relative form, `sum_i (1 - s_m P(R_i) / w_i)^2`, so every
/// sample carries equal weight across the factor's large dynamic range,
/// matching the relative residuals of the main objective.
fn poly_for_lambda(problem: &FitProblem<'_>, lambda: f64, v: f64) -> Option<[f64; 5]> {
    use nalgebra::{Matrix3, Vector3 as V3};
    // w_i = I eta e^{lambda R} / cos = t_m kappa (alpha R^2 + beta R + gamma)
    let w: Vec<f64> = problem
        .samples
        .iter()
        .zip(&problem.eta_cache)
        .map(|(s, eta)| s.intensity * eta * (lambda * s.range).exp() / s.cos_alpha)
        .collect();
    if w.iter().any(|&wi| !wi.is_finite() || wi <= 0.0) {
        return None;
    }
    let mut scales = vec![1.0f64; problem.n_groups];
    // Seed the scales against an R^2 polynomial.
    {
        let mut num = vec![0.0; problem.n_groups];
        let mut den = vec![0.0; problem.n_groups];
        for ((s, &wi), &g) in problem.samples.iter().zip(&w).zip(&problem.group_of) {
            let q = s.range * s.range / wi;
            num[g] += q;
            den[g] += q * q;
        }
        for g in 0..problem.n_groups {
            if den[g] > 0.0 && num[g] > 0.0 {
                scales[g] = num[g] / den[g];
            }
        }
    }
    let mut coeffs = [1.0f64, 0.0, 0.0];
    for _ in 0..3 {
        // Polynomial with scales fixed: rows (s_m / w_i) [R^2, R, 1] -> 1.
        let mut ata = Matrix3::zeros();
        let mut atb = V3::zeros();
        for ((s, &wi), &g) in problem.samples.iter().zip(&w).zip(&problem.group_of) {
            let sc = scales[g] / wi;
            let row = V3::new(sc * s.range * s.range, sc * s.range, sc);
            ata += row * row.transpose();
            atb += row;
        }
        let solved = ata.lu().solve(&atb)?;
        coeffs = [solved.x, solved.y, solved.z];
        // Scales given the polynomial: s = sum(P/w) / sum((P/w)^2).
        let mut num = vec![0.0; problem.n_groups];
        let mut den = vec![0.0; problem.n_groups];
        for ((s, &wi), &g) in problem.samples.iter().zip(&w).zip(&problem.group_of) {
            let q = ((coeffs[0] * s.range + coeffs[1]) * s.range + coeffs[2]) / wi;
            num[g] += q;
            den[g] += q * q;
        }
        for g in 0..problem.n_groups {
            if den[g] > 0.0 {
                scales[g] = num[g] / den[g];
            }
        }
    }
    // Positivity at every sample range is required downstream.
    for s in problem.samples {
        if (coeffs[0] * s.range + coeffs[1]) * s.range + coeffs[2] <= 0.0 {
            return None;
        }
    }
    Some([coeffs[0], coeffs[1], coeffs[2], lambda.max(LAMBDA_FLOOR).ln(), v])
}

/// Fits the range-factor parameters to controlled calibration samples.
///
/// The objective is the per-material consistency of corrected intensities:
/// `sum_i (c_i / t_m - 1)^2` with `c_i = I_i / (g(R_i) cos(alpha_i) kappa)`
/// and `t_m` re-estimated each iteration as the per-material mean. A damped
/// Gauss-Newton step (with `lambda >= 0` and `kappa > 0` enforced through log
/// reparameterization) alternates with the target update; accepted steps
/// never increase the objective. After convergence the multiplicative gauge
/// shared by the polynomial and `kappa` is fixed by pinning
/// `g(r_ref) = r_ref^2 / eta(r_ref)`.
pub fn fit_params(
    samples: &[CalibSample],
    init: &CompensationParams,
    opts: &FitOptions,
) -> Result<(CompensationParams, FitReport)> {
    if samples.len() < 20 {
        return Err(Error::validation(format!(
            "need at least 20 samples, got {}",
            samples.len()
        )));
    }
    for s in samples {
        s.validate()?;
    }
    let n_ranges = distinct_count(samples.iter().map(|s| s.range));
    if n_ranges < 5 {
        return Err(Error::numerical(format!(
            "rank deficiency: only {n_ranges} distinct ranges, need >= 5"
        )));
    }
    let n_angles = distinct_count(samples.iter().map(|s| s.cos_alpha));
    if n_angles < 3 {
        return Err(Error::numerical(format!(
            "rank deficiency: only {n_angles} distinct angles, need >= 3"
        )));
    }
    init.validate()?;

    let problem = FitProblem::new(samples, &init.eta);
    let mut p = initialize(&problem, init);
    let mut corrected = problem
        .corrected(&p)
        .ok_or_else(|| Error::numerical("initial parameters give a non-positive range factor"))?;
    let mut targets = problem.targets(&corrected);
    let mut residuals = problem.residuals(&corrected, &targets);
    let mut cost = FitProblem::cost(&residuals);
    let mut cost_history = vec![cost];

    let mut damping = 1e-4;
    let mut gradient_norm = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    use nalgebra::{Matrix5, Vector5};

    let mut group_counts = vec![0usize; problem.n_groups];
    for &g in &problem.group_of {
        group_counts[g] += 1;
    }

    for iter in 0..opts.max_iterations {
        iterations = iter + 1;
        let lambda = p[3].exp();
        // Jacobian of the relative residuals at fixed targets, plus the
        // per-material sums needed for the alternated-objective gradient.
        let mut jtj = Matrix5::<f64>::zeros();
        let mut jtr = Vector5::<f64>::zeros();
        let mut group_rc = vec![0.0f64; problem.n_groups];
        let mut group_jsum = vec![Vector5::<f64>::zeros(); problem.n_groups];
        for (i, s) in problem.samples.iter().enumerate() {
            let g = problem.group_of[i];
            let c = corrected[i];
            let t = targets[g];
            let poly = (p[0] * s.range + p[1]) * s.range + p[2];
            let dc = Vector5::new(
                -c * s.range * s.range / poly,
                -c * s.range / poly,
                -c / poly,
                c * s.range * lambda,
                -c,
            );
            let jrow = dc / t;
            jtj += jrow * jrow.transpose();
            jtr += jrow * residuals[i];
            group_rc[g] += residuals[i] * c;
            group_jsum[g] += jrow;
        }
        // Gradient of the full objective, with the targets' dependence on the
        // parameters folded in. Unlike the fixed-target J^T r, this vanishes
        // at the alternated optimum (the kappa direction is a pure gauge that
        // target re-estimation cancels).
        let mut alt_gradient = jtr;
        for g in 0..problem.n_groups {
            alt_gradient -= group_jsum[g] * (group_rc[g] / (targets[g] * group_counts[g] as f64));
        }
        gradient_norm = alt_gradient.norm();
        if gradient_norm < opts.gradient_tol {
            converged = true;
            break;
        }

        // Damped step with retry on cost increase.
        let mut accepted = false;
        for _ in 0..25 {
            let mut lhs = jtj;
            for d in 0..5 {
                lhs[(d, d)] += damping * jtj[(d, d)].max(1e-12);
            }
            let Some(delta) = lhs.lu().solve(&(-jtr)) else {
                damping *= 4.0;
                continue;
            };
            let trial = [
                p[0] + delta[0],
                p[1] + delta[1],
                p[2] + delta[2],
                p[3] + delta[3],
                p[4] + delta[4],
            ];
            let Some(trial_corrected) = problem.corrected(&trial) else {
                damping *= 4.0;
                continue;
            };
            let trial_residuals = problem.residuals(&trial_corrected, &targets);
            let trial_cost = FitProblem::cost(&trial_residuals);
            if trial_cost < cost {
                p = trial;
                corrected = trial_corrected;
                damping = (damping / 3.0).max(1e-12);
                accepted = true;
                break;
            }
            damping *= 4.0;
        }
        if !accepted {
            // No descent direction left at this damping scale.
            break;
        }
        // Alternation: re-estimate the per-material targets (never increases
        // the objective) and record the iterate.
        targets = problem.targets(&corrected);
        residuals = problem.residuals(&corrected, &targets);
        cost = FitProblem::cost(&residuals);
        cost_history.push(cost);
    }

    // Fix the shared multiplicative gauge: g(r_ref) = r_ref^2 / eta(r_ref).
    let lambda = p[3].exp();
    let kappa = p[4].exp();
    let eta_ref = near_field_factor(init.r_ref, &init.eta);
    let poly_ref = (p[0] * init.r_ref + p[1]) * init.r_ref + p[2];
    if poly_ref <= 0.0 {
        return Err(Error::numerical(
            "fitted polynomial not positive at the gauge range r_ref",
        ));
    }
    let g_ref = poly_ref * (-lambda * init.r_ref).exp() / eta_ref;
    let g_target = init.r_ref * init.r_ref / eta_ref;
    let scale = g_target / g_ref;

    let fitted = CompensationParams {
        alpha: p[0] * scale,
        beta: p[1] * scale,
        gamma: p[2] * scale,
        lambda,
        kappa: kappa / scale,
        eta: init.eta,
        c: init.c,
        cos_min: init.cos_min,
        r_ref: init.r_ref,
    };
    let r_lo = samples.iter().map(|s| s.range).fold(f64::INFINITY, f64::min);
    let r_hi = samples.iter().map(|s| s.range).fold(0.0, f64::max);
    fitted.validate_over(r_lo, r_hi)?;

    let report = FitReport {
        iterations,
        residual_rms: (cost / samples.len() as f64).sqrt(),
        gradient_norm,
        converged,
        cost_history,
    };
    Ok((fitted, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn defaults() -> CompensationParams {
        CompensationParams::default()
    }

    #[test]
    fn near_field_factor_asymptote() {
        let k = EtaConstants::default();
        assert!((near_field_factor(1e6, &k) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn near_field_factor_zero_at_origin_without_offset() {
        let k = EtaConstants {
            range_offset: 1e-300, // constants must be > 0; exponent underflows to 0
            ..EtaConstants::default()
        };
        assert!(near_field_factor(0.0, &k).abs() < 1e-12);
    }

    #[test]
    fn near_field_factor_hand_evaluation() {
        // Independent scalar evaluation with the exponent assembled in a
        // different order.
        let k = EtaConstants::default();
        let r: f64 = 2.0;
        let expected = 1.0
            - f64::exp(
                -(2.0 * 0.01f64.powi(2) * (r + 0.05).powi(2)) / (0.03f64.powi(2) * 0.1f64.powi(2)),
            );
        assert_relative_eq!(near_field_factor(r, &k), expected, max_relative = 1e-15);
    }

    #[test]
    fn near_field_factor_strictly_increasing_where_representable() {
        let k = EtaConstants::default();
        let mut prev = near_field_factor(0.0, &k);
        for i in 1..=10_000 {
            let r = i as f64 * 1e-4; // grid over [0, 1] m
            let cur = near_field_factor(r, &k);
            assert!(cur > prev, "eta not increasing at R = {r}");
            prev = cur;
        }
    }

    #[test]
    fn inverse_square_scaling_far_field() {
        let k = EtaConstants::default();
        let near = forward_intensity(100.0, 1.0, 0.5, 1.0, &k).unwrap();
        let far = forward_intensity(200.0, 1.0, 0.5, 1.0, &k).unwrap();
        assert_relative_eq!(far / near, 0.25, max_relative = 1e-3);
    }

    #[test]
    fn lambert_factor_is_exact() {
        let k = EtaConstants::default();
        let a = forward_intensity(5.0, 1.0, 0.5, 1.0, &k).unwrap();
        let b = forward_intensity(5.0, 0.5, 0.5, 1.0, &k).unwrap();
        assert_eq!(b / a, 0.5);
    }

    #[test]
    fn forward_intensity_hand_evaluation() {
        let k = EtaConstants::default();
        let (r, ca, rho, ie) = (7.3, 0.84, 0.62, 0.9);
        let expected = near_field_factor(r, &k) * ie * rho * ca / (r * r);
        assert_relative_eq!(
            forward_intensity(r, ca, rho, ie, &k).unwrap(),
            expected,
            max_relative = 1e-15
        );
        assert!(forward_intensity(0.0, 1.0, 1.0, 1.0, &k).is_err());
    }

    #[test]
    fn closed_form_roundtrip_recovers_emission() {
        let params = defaults();
        for (r, ca, rho) in [(2.0, 1.0, 0.8), (10.0, 0.4, 0.8), (30.0, 0.9, 0.3)] {
            let emission = 0.7;
            let measured = forward_intensity(r, ca, rho, emission, &params.eta).unwrap();
            let sample = CalibSample {
                intensity: measured,
                range: r,
                cos_alpha: ca,
                material_id: 0,
            };
            let corrected = correct_closed_form(&sample, rho, &params).unwrap();
            assert_relative_eq!(corrected, emission, epsilon = 1e-9);
        }
    }

    #[test]
    fn closed_form_equalizes_same_surface_across_range() {
        let params = defaults();
        let mk = |r: f64| {
            let i = forward_intensity(r, 0.9, 0.5, 0.8, &params.eta).unwrap();
            CalibSample {
                intensity: i,
                range: r,
                cos_alpha: 0.9,
                material_id: 0,
            }
        };
        let a = correct_closed_form(&mk(2.0), 0.5, &params).unwrap();
        let b = correct_closed_form(&mk(10.0), 0.5, &params).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-9);
    }

    #[test]
    fn grazing_angle_is_an_error() {
        let params = defaults();
        let sample = CalibSample {
            intensity: 0.5,
            range: 5.0,
            cos_alpha: 0.0,
            material_id: 0,
        };
        assert!(correct_closed_form(&sample, 0.5, &params).is_err());
    }

    #[test]
    fn range_factor_reduces_to_closed_form() {
        let params = defaults(); // alpha=1, beta=gamma=lambda=0
        for i in 0..100 {
            let r = 0.5 + i as f64 * 0.35;
            let expected = r * r / near_field_factor(r, &params.eta);
            let got = range_factor(r, &params).unwrap();
            assert!(
                (got - expected).abs() <= 1e-12 * expected,
                "mismatch at R = {r}"
            );
        }
    }

    #[test]
    fn range_factor_decays_under_large_lambda() {
        let params = CompensationParams {
            lambda: 10.0,
            ..defaults()
        };
        let g = range_factor(30.0, &params).unwrap();
        // 900 * e^{-300}: positive but vanishing
        assert!(g > 0.0 && g < 1e-100);
    }

    #[test]
    fn range_factor_rejects_nonpositive_polynomial() {
        let params = CompensationParams {
            alpha: 0.0,
            beta: 0.0,
            gamma: -1.0,
            ..defaults()
        };
        assert!(range_factor(5.0, &params).is_err());
        assert!(params.validate_over(1.0, 30.0).is_err());
    }

    /// Model-generated samples `I = level * g(R) * cos(alpha) * kappa`, with
    /// `level` chosen so the brightest sample sits at `headroom` of full
    /// scale.
    fn synthesize(
        generating: &CompensationParams,
        headroom: f64,
        ranges: &[f64],
        cos_alphas: &[f64],
        material_id: u32,
    ) -> Vec<CalibSample> {
        let max_g = ranges
            .iter()
            .map(|&r| range_factor(r, generating).unwrap())
            .fold(0.0, f64::max);
        let level = headroom / (max_g * generating.kappa);
        let mut out = Vec::new();
        for &r in ranges {
            for &ca in cos_alphas {
                let g = range_factor(r, generating).unwrap();
                out.push(CalibSample {
                    intensity: level * g * ca * generating.kappa,
                    range: r,
                    cos_alpha: ca,
                    material_id,
                });
            }
        }
        out
    }

    fn grid() -> (Vec<f64>, Vec<f64>) {
        let ranges: Vec<f64> = (0..30).map(|i| 1.0 + i as f64).collect();
        let cos_alphas: Vec<f64> = (0..=12)
            .map(|i| (i as f64 * 5.0f64).to_radians().cos())
            .collect();
        (ranges, cos_alphas)
    }

    #[test]
    fn fit_recovers_generating_factor_shape() {
        let generating = CompensationParams {
            alpha: 0.9,
            beta: 0.3,
            gamma: 2.0,
            lambda: 0.12,
            kappa: 1.3,
            ..defaults()
        };
        let (ranges, cos_alphas) = grid();
        let samples = synthesize(&generating, 0.8, &ranges, &cos_alphas, 0);
        let (fitted, report) = fit_params(&samples, &defaults(), &FitOptions::default()).unwrap();
        assert!(report.residual_rms < 1e-6, "rms {}", report.residual_rms);

        // The product g * kappa is identified up to one global scale; compare
        // its shape across the sampled ranges.
        let ratios: Vec<f64> = ranges
            .iter()
            .map(|&r| {
                let fitted_g = range_factor(r, &fitted).unwrap() * fitted.kappa;
                let true_g = range_factor(r, &generating).unwrap() * generating.kappa;
                fitted_g / true_g
            })
            .collect();
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        for (r, ratio) in ranges.iter().zip(&ratios) {
            assert!(
                (ratio / mean - 1.0).abs() < 1e-3,
                "factor shape off by {:.4e} at R = {r}",
                (ratio / mean - 1.0).abs()
            );
        }
    }

    #[test]
    fn fit_on_closed_form_data_recovers_quadratic_shape() {
        // Intensities generated by the exact closed-form factor R^2 / eta.
        let generating = defaults();
        let (ranges, cos_alphas) = grid();
        let samples = synthesize(&generating, 0.8, &ranges, &cos_alphas, 0);
        let start = CompensationParams {
            alpha: 0.5,
            beta: 1.0,
            gamma: 0.5,
            lambda: 0.05,
            ..defaults()
        };
        let (fitted, _) = fit_params(&samples, &start, &FitOptions::default()).unwrap();
        for &r in &ranges {
            let expected = r * r / near_field_factor(r, &fitted.eta);
            let got = range_factor(r, &fitted).unwrap();
            assert!(
                (got / expected - 1.0).abs() < 5e-3,
                "shape off by {:.4e} at R = {r}",
                (got / expected - 1.0).abs()
            );
        }
    }

    #[test]
    fn fit_objective_monotonically_non_increasing() {
        let generating = CompensationParams {
            alpha: 0.7,
            beta: 0.1,
            gamma: 3.0,
            lambda: 0.08,
            kappa: 0.9,
            ..defaults()
        };
        let (ranges, cos_alphas) = grid();
        let mut samples = synthesize(&generating, 0.8, &ranges, &cos_alphas, 0);
        // mild deterministic perturbation so the fit has real work to do
        for (i, s) in samples.iter_mut().enumerate() {
            let wiggle = 1.0 + 0.03 * ((i as f64 * 0.7).sin());
            s.intensity = (s.intensity * wiggle).clamp(0.0, 1.0);
        }
        let (_, report) = fit_params(&samples, &defaults(), &FitOptions::default()).unwrap();
        for pair in report.cost_history.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-12), "cost increased: {pair:?}");
        }
    }

    #[test]
    fn fit_rejects_degenerate_spread() {
        let generating = defaults();
        // all samples at one range
        let samples = synthesize(&generating, 0.8, &[5.0], &grid().1, 0);
        let extended: Vec<CalibSample> = samples
            .iter()
            .cycle()
            .take(40)
            .cloned()
            .collect();
        let err = fit_params(&extended, &defaults(), &FitOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
        assert!(err.to_string().contains("rank"));
    }

    #[test]
    fn fit_is_deterministic() {
        let generating = CompensationParams {
            alpha: 0.9,
            beta: 0.3,
            gamma: 2.0,
            lambda: 0.12,
            kappa: 1.3,
            ..defaults()
        };
        let (ranges, cos_alphas) = grid();
        let samples = synthesize(&generating, 0.8, &ranges, &cos_alphas, 0);
        let (a, ra) = fit_params(&samples, &defaults(), &FitOptions::default()).unwrap();
        let (b, rb) = fit_params(&samples, &defaults(), &FitOptions::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.cost_history, rb.cost_history);
    }

    #[test]
    fn multi_material_fit_flattens_each_material() {
        let generating = CompensationParams {
            alpha: 1.1,
            beta: 0.0,
            gamma: 1.0,
            lambda: 0.07,
            kappa: 1.0,
            ..defaults()
        };
        let (ranges, cos_alphas) = grid();
        let mut samples = synthesize(&generating, 0.8, &ranges, &cos_alphas, 0);
        samples.extend(synthesize(&generating, 0.4, &ranges, &cos_alphas, 1));
        let (fitted, _) = fit_params(&samples, &defaults(), &FitOptions::default()).unwrap();
        for material in [0u32, 1] {
            let corrected: Vec<f64> = samples
                .iter()
                .filter(|s| s.material_id == material)
                .map(|s| {
                    s.intensity
                        / (range_factor(s.range, &fitted).unwrap() * s.cos_alpha * fitted.kappa)
                })
                .collect();
            let mean = corrected.iter().sum::<f64>() / corrected.len() as f64;
            let var = corrected.iter().map(|c| (c - mean).powi(2)).sum::<f64>()
                / corrected.len() as f64;
            let cov = var.sqrt() / mean;
            assert!(cov < 1e-6, "material {material} CoV {cov}");
        }
    }

    proptest::proptest! {
        #[test]
        fn closed_form_inverts_forward_model(
            range in 0.1f64..100.0,
            cos_alpha in 0.01f64..1.0,
            rho in 0.05f64..1.0,
            emission in 0.1f64..2.0,
        ) {
            let params = CompensationParams::default();
            let measured = forward_intensity(range, cos_alpha, rho, emission, &params.eta).unwrap();
            let sample = CalibSample {
                intensity: measured,
                range,
                cos_alpha,
                material_id: 0,
            };
            let corrected = correct_closed_form(&sample, rho, &params).unwrap();
            proptest::prop_assert!((corrected - emission).abs() < 1e-9 * emission.max(1.0));
        }
    }

    #[test]
    fn compensate_image_identity_configuration() {
        // Constant range R0: choose gamma so g(R0) = 1, normals at cos = 1.
        use crate::image::NormalImage;
        let r0 = 6.0;
        let k = EtaConstants::default();
        let params = CompensationParams {
            alpha: 0.0,
            beta: 0.0,
            gamma: near_field_factor(r0, &k), // g(R0) = gamma / eta = 1
            lambda: 0.0,
            kappa: 1.0,
            ..defaults()
        };
        let (w, h) = (8, 4);
        let mut refl = ReflectanceImage::new(w, h);
        let mut depth = DepthImage::new(w, h);
        let mut normals = NormalImage::new(w, h);
        for row in 0..h {
            for col in 0..w {
                refl.set(row, col, 0.3 + 0.05 * row as f64);
                depth.set(row, col, r0);
                normals.set(row, col, [-1.0, 0.0, 0.0], 1.0);
            }
        }
        let out = compensate_image(&refl, &depth, &normals, &params).unwrap();
        for row in 0..h {
            for col in 0..w {
                assert_relative_eq!(
                    out.get(row, col).unwrap(),
                    refl.get(row, col).unwrap(),
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn compensate_image_drops_grazing_pixels() {
        use crate::image::NormalImage;
        let params = defaults();
        let mut refl = ReflectanceImage::new(4, 2);
        let mut depth = DepthImage::new(4, 2);
        let mut normals = NormalImage::new(4, 2);
        refl.set(0, 0, 0.5);
        depth.set(0, 0, 5.0);
        normals.set(0, 0, [-1.0, 0.0, 0.0], 0.05); // below cos_min = 0.1
        refl.set(0, 1, 0.5);
        depth.set(0, 1, 5.0);
        normals.set(0, 1, [-1.0, 0.0, 0.0], 0.9);
        let out = compensate_image(&refl, &depth, &normals, &params).unwrap();
        assert!(!out.is_valid(0, 0));
        assert!(out.is_valid(0, 1));
    }

    #[test]
    fn compensate_image_rejects_shape_mismatch() {
        use crate::image::NormalImage;
        let refl = ReflectanceImage::new(4, 2);
        let depth = DepthImage::new(5, 2);
        let normals = NormalImage::new(4, 2);
        assert!(compensate_image(&refl, &depth, &normals, &defaults()).is_err());
    }

    #[test]
    fn compensated_output_stays_in_unit_range() {
        use crate::image::NormalImage;
        let params = defaults();
        let mut refl = ReflectanceImage::new(8, 2);
        let mut depth = DepthImage::new(8, 2);
        let mut normals = NormalImage::new(8, 2);
        for col in 0..8 {
            refl.set(0, col, 0.9);
            depth.set(0, col, 0.2 + col as f64 * 4.0);
            normals.set(0, col, [-1.0, 0.0, 0.0], 0.2 + 0.1 * col as f64);
        }
        let out = compensate_image(&refl, &depth, &normals, &params).unwrap();
        for col in 0..8 {
            if let Some(v) = out.get(0, col) {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        // Valid output pixels always have valid reflectance, depth and normal.
        for (i, valid) in out.mask().iter().enumerate() {
            if *valid {
                assert!(refl.mask()[i] && depth.mask()[i]);
                assert!(normals.is_valid(i / out.width(), i % out.width()));
            }
        }
    }
}
