//! End-to-end pipeline: ingest or synthesize scans, accumulate, project,
//! compensate, densify, and evaluate against dense ground truth.
//!
//! A run is described by a TOML config (schema-validated before any
//! processing) and produces images, `report.csv`, and a `manifest.json`
//! capturing the resolved config, all seeds, per-stage wall times and the
//! output list. Re-running from a manifest reproduces every output file
//! bit-exactly; wall times are recorded in the manifest only, never in the
//! data files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::accumulation::{fuse_static, fuse_with_poses, FusedCloud};
use crate::augmentation::{augment, AugmentConfig, OdomPattern};
use crate::compensation::{compensate_image, CompensationParams};
use crate::densify::{densify, DensifyConfig};
use crate::error::{Error, Result};
use crate::geometry::{estimate_normals, PoseSE3, Scan};
use crate::image::{DepthImage, ReflectanceImage};
use crate::io::{read_params_toml, read_pose_csv, read_scan_dir, read_scene_json};
use crate::metrics::{evaluate, MaskPolicy, MetricReport};
use crate::pgm::write_image_set;
use crate::projection::{project, ProjectionConfig, ProjectionMode};
use crate::synth::{simulate_scans, RosetteConfig};

fn default_sparse_n() -> usize {
    crate::accumulation::DEFAULT_SPARSE_SCANS
}

fn default_dense_n() -> usize {
    crate::accumulation::DEFAULT_DENSE_SCANS
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoSection {
    /// Directory of `scan_*.csv` files; omit when `[synth]` is present.
    #[serde(default)]
    pub scans: Option<PathBuf>,
    /// Pose CSV mapping scan ids to rigid transforms; identity if omitted.
    #[serde(default)]
    pub poses: Option<PathBuf>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub scene: PathBuf,
    #[serde(default = "default_dense_n")]
    pub scans: usize,
    #[serde(default = "default_points_per_scan")]
    pub points_per_scan: usize,
    #[serde(default = "default_emission")]
    pub emission: f64,
}

fn default_points_per_scan() -> usize {
    RosetteConfig::default().points_per_scan
}

fn default_emission() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AccumulateSection {
    pub sparse_n: usize,
    pub dense_n: usize,
}

impl Default for AccumulateSection {
    fn default() -> Self {
        AccumulateSection {
            sparse_n: default_sparse_n(),
            dense_n: default_dense_n(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionSection {
    pub mode: ProjectionMode,
    pub width: usize,
    pub height: usize,
    pub phi_min_deg: f64,
    pub phi_max_deg: f64,
    pub hfov_deg: f64,
    pub camera_yaw_deg: f64,
}

impl Default for ProjectionSection {
    fn default() -> Self {
        ProjectionSection {
            mode: ProjectionMode::Panoramic,
            width: 1380,
            height: 240,
            phi_min_deg: -29.5,
            phi_max_deg: 29.5,
            hfov_deg: 90.0,
            camera_yaw_deg: 0.0,
        }
    }
}

impl ProjectionSection {
    pub fn to_config(&self) -> Result<ProjectionConfig> {
        match self.mode {
            ProjectionMode::Panoramic => ProjectionConfig::panoramic(
                self.width,
                self.height,
                self.phi_min_deg.to_radians(),
                self.phi_max_deg.to_radians(),
            ),
            ProjectionMode::VirtualCamera => ProjectionConfig::virtual_camera(
                self.width,
                self.height,
                self.phi_min_deg.to_radians(),
                self.phi_max_deg.to_radians(),
                self.hfov_deg.to_radians(),
                self.camera_yaw_deg.to_radians(),
            ),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub enabled: bool,
    pub seed: u64,
    pub trans_std: f64,
    pub rot_std_deg: f64,
    pub noise_std: f64,
    pub keep_n: usize,
    pub pool_n: usize,
    pub pattern: OdomPattern,
    pub magnitude: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        let base = AugmentConfig::default();
        AugmentSection {
            enabled: true,
            seed: base.seed,
            trans_std: base.trans_std,
            rot_std_deg: base.rot_std.to_degrees(),
            noise_std: base.noise_std,
            keep_n: base.keep_n,
            pool_n: base.pool_n,
            pattern: base.odom_pattern,
            magnitude: base.odom_magnitude,
        }
    }
}

impl AugmentSection {
    pub fn to_config(&self) -> AugmentConfig {
        AugmentConfig {
            seed: self.seed,
            trans_std: self.trans_std,
            rot_std: self.rot_std_deg.to_radians(),
            noise_std: self.noise_std,
            keep_n: self.keep_n,
            pool_n: self.pool_n,
            odom_pattern: self.pattern,
            odom_magnitude: self.magnitude,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompensationSection {
    /// Params TOML; built-in defaults when omitted.
    pub params: Option<PathBuf>,
    pub enabled: bool,
}

impl Default for CompensationSection {
    fn default() -> Self {
        CompensationSection {
            params: None,
            enabled: default_true(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub mask_policy: MaskPolicy,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            mask_policy: MaskPolicy::GtOnly,
        }
    }
}

/// Full pipeline description, loadable from TOML.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub io: IoSection,
    #[serde(default)]
    pub synth: Option<SynthSection>,
    #[serde(default)]
    pub accumulate: AccumulateSection,
    #[serde(default)]
    pub projection: ProjectionSection,
    #[serde(default)]
    pub augment: Option<AugmentSection>,
    #[serde(default)]
    pub compensation: CompensationSection,
    #[serde(default)]
    pub densify: DensifyConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

impl PipelineConfig {
    /// Checks cross-field invariants and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        match (&self.io.scans, &self.synth) {
            (None, None) => {
                return Err(Error::validation(
                    "config needs either io.scans or a [synth] section",
                ))
            }
            (Some(_), Some(_)) => {
                return Err(Error::validation(
                    "io.scans and [synth] are mutually exclusive",
                ))
            }
            _ => {}
        }
        if let Some(dir) = &self.io.scans {
            if !dir.is_dir() {
                return Err(Error::validation(format!(
                    "scan directory {} does not exist",
                    dir.display()
                )));
            }
        }
        if let Some(poses) = &self.io.poses {
            if !poses.is_file() {
                return Err(Error::validation(format!(
                    "pose file {} does not exist",
                    poses.display()
                )));
            }
        }
        if let Some(synth) = &self.synth {
            if !synth.scene.is_file() {
                return Err(Error::validation(format!(
                    "scene file {} does not exist",
                    synth.scene.display()
                )));
            }
            if synth.scans < self.accumulate.dense_n {
                return Err(Error::validation(format!(
                    "synth.scans ({}) must cover dense_n ({})",
                    synth.scans, self.accumulate.dense_n
                )));
            }
        }
        if let Some(params) = &self.compensation.params {
            if !params.is_file() {
                return Err(Error::validation(format!(
                    "params file {} does not exist",
                    params.display()
                )));
            }
        }
        let acc = &self.accumulate;
        if acc.sparse_n == 0 || acc.sparse_n > acc.dense_n {
            return Err(Error::validation(
                "accumulate requires 1 <= sparse_n <= dense_n",
            ));
        }
        self.projection.to_config()?;
        self.densify.validate()?;
        if let Some(aug) = &self.augment {
            if aug.enabled {
                aug.to_config().validate()?;
            }
        }
        Ok(())
    }
}

/// Loads a pipeline config, resolving relative paths against the config
/// file's directory and validating the schema and referenced files.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg: PipelineConfig =
        toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&p);
        }
    };
    if let Some(p) = cfg.io.scans.as_mut() {
        resolve(p);
    }
    if let Some(p) = cfg.io.poses.as_mut() {
        resolve(p);
    }
    resolve(&mut cfg.io.out_dir);
    if let Some(s) = cfg.synth.as_mut() {
        resolve(&mut s.scene);
    }
    if let Some(p) = cfg.compensation.params.as_mut() {
        resolve(p);
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTiming {
    pub name: String,
    pub wall_ms: f64,
}

/// Run record: everything needed to reproduce the outputs, plus timings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config: PipelineConfig,
    pub stages: Vec<StageTiming>,
    /// File names written under the output directory.
    pub outputs: Vec<String>,
    pub failed_stage: Option<String>,
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

fn write_manifest(out_dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = out_dir.join("manifest.json");
    let text =
        serde_json::to_string_pretty(manifest).map_err(|e| Error::parse(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

struct StageClock {
    stages: Vec<StageTiming>,
}

impl StageClock {
    fn run<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f();
        self.stages.push(StageTiming {
            name: name.to_string(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        out
    }
}

fn ingest(cfg: &PipelineConfig) -> Result<(Vec<Scan>, Vec<PoseSE3>)> {
    let scans = if let Some(synth) = &cfg.synth {
        let scene = read_scene_json(&synth.scene)?;
        let rosette = RosetteConfig {
            points_per_scan: synth.points_per_scan,
            ..RosetteConfig::default()
        };
        simulate_scans(
            &scene.primitives,
            &rosette,
            synth.scans,
            synth.emission,
            &CompensationParams::default().eta,
        )
    } else {
        read_scan_dir(cfg.io.scans.as_ref().expect("validated"))?
    };
    if scans.len() < cfg.accumulate.dense_n {
        return Err(Error::validation(format!(
            "need {} scans for the dense side, found {}",
            cfg.accumulate.dense_n,
            scans.len()
        )));
    }
    let poses = match &cfg.io.poses {
        Some(path) => {
            let table = read_pose_csv(path)?;
            scans
                .iter()
                .take(cfg.accumulate.sparse_n)
                .map(|scan| {
                    table
                        .iter()
                        .find(|(id, _)| *id == scan.scan_id)
                        .map(|(_, pose)| *pose)
                        .ok_or_else(|| {
                            Error::validation(format!("no pose for scan {}", scan.scan_id))
                        })
                })
                .chain(
                    scans
                        .iter()
                        .skip(cfg.accumulate.sparse_n)
                        .map(|_| Ok(PoseSE3::identity())),
                )
                .collect::<Result<Vec<_>>>()?
        }
        None => vec![PoseSE3::identity(); scans.len()],
    };
    Ok((scans, poses))
}

fn compensate_pair(
    reflectance: &ReflectanceImage,
    depth: &DepthImage,
    proj: &ProjectionConfig,
    params: &CompensationParams,
) -> Result<ReflectanceImage> {
    let normals = estimate_normals(depth, proj);
    compensate_image(reflectance, depth, &normals, params)
}

/// One evaluated comparison in `report.csv`.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub label: String,
    pub report: MetricReport,
}

fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut text = String::from("label,psnr_db,ssim,rmse,mae,n_pixels\n");
    for row in rows {
        let r = &row.report;
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.label, r.psnr_db, r.ssim, r.rmse, r.mae, r.n_pixels
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs the full pipeline; `out_override` redirects the output directory
/// (used when replaying a manifest into a fresh location).
pub fn run_pipeline(cfg: &PipelineConfig, out_override: Option<&Path>) -> Result<Manifest> {
    cfg.validate()?;
    let out_dir = out_override.unwrap_or(&cfg.io.out_dir).to_path_buf();
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let mut manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        stages: Vec::new(),
        outputs: Vec::new(),
        failed_stage: None,
    };
    let mut clock = StageClock { stages: Vec::new() };

    let result = run_stages(cfg, &out_dir, &mut clock, &mut manifest.outputs);
    manifest.stages = clock.stages;
    if let Err(stage) = &result {
        manifest.failed_stage = Some(stage.0.clone());
    }
    write_manifest(&out_dir, &manifest)?;
    match result {
        Ok(()) => Ok(manifest),
        Err((_, e)) => Err(e),
    }
}

/// Replays a run from its manifest; outputs are bit-identical to the
/// original run's.
pub fn run_from_manifest(manifest_path: &Path, out_override: Option<&Path>) -> Result<Manifest> {
    let manifest = load_manifest(manifest_path)?;
    run_pipeline(&manifest.config, out_override)
}

type StageResult = std::result::Result<(), (String, Error)>;

fn run_stages(
    cfg: &PipelineConfig,
    out_dir: &Path,
    clock: &mut StageClock,
    outputs: &mut Vec<String>,
) -> StageResult {
    let stage = |name: &str, e: Error| (name.to_string(), e);

    let (scans, poses) = clock
        .run("ingest", || ingest(cfg))
        .map_err(|e| stage("ingest", e))?;

    let acc = &cfg.accumulate;
    let (sparse_cloud, dense_cloud) = clock
        .run("accumulate", || {
            let sparse: FusedCloud = match &cfg.augment {
                Some(aug) if aug.enabled => augment(&scans, &aug.to_config())?.0,
                _ => fuse_with_poses(&scans[..acc.sparse_n], &poses[..acc.sparse_n])?,
            };
            let dense = fuse_static(&scans[..acc.dense_n])?;
            Ok((sparse, dense))
        })
        .map_err(|e| stage("accumulate", e))?;

    let proj = cfg.projection.to_config().map_err(|e| stage("project", e))?;
    let (sparse_pair, dense_pair) = clock
        .run("project", || {
            let s = project(&sparse_cloud.points, &proj)?;
            let d = project(&dense_cloud.points, &proj)?;
            Ok((s, d))
        })
        .map_err(|e| stage("project", e))?;

    // Densification precedes compensation: the correction needs surface
    // normals, and normal estimation needs dense depth neighborhoods, which
    // a few-scan sparse image cannot provide.
    let (densified_refl, densified_depth) = clock
        .run("densify", || densify(&sparse_pair.0, &sparse_pair.1, &cfg.densify))
        .map_err(|e| stage("densify", e))?;

    let params = match &cfg.compensation.params {
        Some(path) => read_params_toml(path).map_err(|e| stage("compensate", e))?,
        None => CompensationParams::neutral(),
    };
    let (densified_comp, dense_comp) = clock
        .run("compensate", || {
            if cfg.compensation.enabled {
                let s = compensate_pair(&densified_refl, &densified_depth, &proj, &params)?;
                let d = compensate_pair(&dense_pair.0, &dense_pair.1, &proj, &params)?;
                Ok((s, d))
            } else {
                Ok((densified_refl.clone(), dense_pair.0.clone()))
            }
        })
        .map_err(|e| stage("compensate", e))?;

    clock
        .run("write_images", || {
            let sets = [
                ("sparse_raw", &sparse_pair.0, &sparse_pair.1),
                ("densified", &densified_refl, &densified_depth),
                ("densified_compensated", &densified_comp, &densified_depth),
                ("dense_gt_raw", &dense_pair.0, &dense_pair.1),
                ("dense_gt_compensated", &dense_comp, &dense_pair.1),
            ];
            for (name, refl, depth) in sets {
                for path in write_image_set(out_dir, name, refl, depth, &proj)? {
                    if let Some(file) = path.file_name().and_then(|n| n.to_str()) {
                        outputs.push(file.to_string());
                    }
                }
            }
            Ok(())
        })
        .map_err(|e| stage("write_images", e))?;

    clock
        .run("eval", || {
            let rows = vec![
                ReportRow {
                    label: "sparse".to_string(),
                    report: evaluate(&sparse_pair.0, &dense_pair.0, cfg.eval.mask_policy)?,
                },
                ReportRow {
                    label: "densified".to_string(),
                    report: evaluate(&densified_refl, &dense_pair.0, cfg.eval.mask_policy)?,
                },
                ReportRow {
                    label: "densified_compensated".to_string(),
                    report: evaluate(&densified_comp, &dense_comp, cfg.eval.mask_policy)?,
                },
            ];
            write_report_csv(&out_dir.join("report.csv"), &rows)?;
            outputs.push("report.csv".to_string());
            Ok(())
        })
        .map_err(|e| stage("eval", e))?;

    Ok(())
}

/// Per-stage timing statistics over repeated frames.
#[derive(Debug, Clone, Serialize)]
pub struct BenchStage {
    pub name: String,
    pub mean_ms: f64,
    pub p95_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub frames: usize,
    pub stages: Vec<BenchStage>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut text = String::from("stage,mean_ms,p95_ms\n");
        for s in &self.stages {
            text.push_str(&format!("{},{},{}\n", s.name, s.mean_ms, s.p95_ms));
        }
        text
    }

    pub fn stage_mean(&self, name: &str) -> Option<f64> {
        self.stages.iter().find(|s| s.name == name).map(|s| s.mean_ms)
    }
}

fn percentile_95(samples: &[f64]) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = ((0.95 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

/// Times the per-frame inference path (accumulate, project, compensate,
/// densify) over `frames` repetitions of one frame. Reports statistics only;
/// asserts nothing.
pub fn run_bench(cfg: &PipelineConfig, frames: usize) -> Result<BenchReport> {
    if frames == 0 {
        return Err(Error::validation("frames must be >= 1"));
    }
    cfg.validate()?;
    let (scans, poses) = ingest(cfg)?;
    let proj = cfg.projection.to_config()?;
    let params = match &cfg.compensation.params {
        Some(path) => read_params_toml(path)?,
        None => CompensationParams::neutral(),
    };
    let acc = &cfg.accumulate;

    let names = ["accumulate", "project", "densify", "compensate", "total"];
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(frames); names.len()];

    for _ in 0..frames {
        let t0 = Instant::now();
        let sparse = fuse_with_poses(&scans[..acc.sparse_n], &poses[..acc.sparse_n])?;
        let t1 = Instant::now();
        let (refl, depth) = project(&sparse.points, &proj)?;
        let t2 = Instant::now();
        let (dense_refl, dense_depth) = densify(&refl, &depth, &cfg.densify)?;
        let t3 = Instant::now();
        let _ = compensate_pair(&dense_refl, &dense_depth, &proj, &params)?;
        let t4 = Instant::now();

        let ms = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e3;
        samples[0].push(ms(t0, t1));
        samples[1].push(ms(t1, t2));
        samples[2].push(ms(t2, t3));
        samples[3].push(ms(t3, t4));
        samples[4].push(ms(t0, t4));
    }

    let stages = names
        .iter()
        .zip(&samples)
        .map(|(name, series)| BenchStage {
            name: name.to_string(),
            mean_ms: series.iter().sum::<f64>() / series.len() as f64,
            p95_ms: percentile_95(series),
        })
        .collect();
    Ok(BenchReport { frames, stages })
}
