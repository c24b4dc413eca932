//! `reflectance`: command-line front end for the LiDAR reflectance pipeline.
//!
//! Subcommands mirror the library stages (`synth`, `project`, `accumulate`,
//! `augment`, `fit-compensation`, `compensate`, `densify`, `eval`) plus the
//! end-to-end `pipeline` and `bench` runners. Logs go to stderr, data goes to
//! files only. Exit codes: 0 success, 2 usage error, 3 data/validation
//! error, 4 numerical failure. `RF_THREADS` caps the worker pool.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use reflectance_core::accumulation::{fuse_static, fuse_with_poses, FusedCloud};
use reflectance_core::augmentation::{augment, AugmentConfig, OdomPattern};
use reflectance_core::compensation::{
    compensate_image, fit_params, CompensationParams, FitOptions,
};
use reflectance_core::densify::{densify, DensifyConfig, DensifyMethod, FillGuide, Smoothing};
use reflectance_core::error::Error;
use reflectance_core::geometry::{estimate_normals, PoseSE3};
use reflectance_core::io;
use reflectance_core::metrics::{evaluate, MaskPolicy};
use reflectance_core::pgm;
use reflectance_core::pipeline::{load_config, run_bench, run_from_manifest, run_pipeline};
use reflectance_core::projection::{
    project, project_four_views, ProjectionConfig, ProjectionMode,
};
use reflectance_core::synth::{controlled_samples, simulate_scans, RosetteConfig};

#[derive(Parser)]
#[command(
    name = "reflectance",
    version,
    about = "Sparse-to-dense LiDAR reflectance imaging toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ProjArgs {
    /// Projection model: panoramic | virtual_camera
    #[arg(long, default_value = "panoramic")]
    mode: String,
    /// Image width in pixels (default 1380 panoramic, 480 virtual camera)
    #[arg(long)]
    width: Option<usize>,
    /// Image height in pixels
    #[arg(long, default_value_t = 240)]
    height: usize,
    /// Lower vertical FoV bound, degrees
    #[arg(long, default_value_t = -29.5)]
    phi_min_deg: f64,
    /// Upper vertical FoV bound, degrees
    #[arg(long, default_value_t = 29.5)]
    phi_max_deg: f64,
    /// Horizontal FoV of a virtual camera, degrees
    #[arg(long, default_value_t = 90.0)]
    hfov_deg: f64,
    /// Virtual camera yaw, degrees
    #[arg(long, default_value_t = 0.0)]
    camera_yaw_deg: f64,
}

impl ProjArgs {
    fn to_config(&self) -> Result<ProjectionConfig, Error> {
        match self.mode.as_str() {
            "panoramic" => ProjectionConfig::panoramic(
                self.width.unwrap_or(1380),
                self.height,
                self.phi_min_deg.to_radians(),
                self.phi_max_deg.to_radians(),
            ),
            "virtual_camera" => ProjectionConfig::virtual_camera(
                self.width.unwrap_or(480),
                self.height,
                self.phi_min_deg.to_radians(),
                self.phi_max_deg.to_radians(),
                self.hfov_deg.to_radians(),
                self.camera_yaw_deg.to_radians(),
            ),
            other => Err(Error::validation(format!("unknown projection mode `{other}`"))),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate non-repeating scans of a synthetic scene
    Synth {
        /// Scene description (JSON)
        #[arg(long)]
        scene: PathBuf,
        /// Number of consecutive scans to simulate
        #[arg(long, default_value_t = 500)]
        scans: usize,
        /// Output directory for scan CSVs, poses and the manifest
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20_000)]
        points_per_scan: usize,
        /// Laser emission power (system constant folded in)
        #[arg(long, default_value_t = 1.0)]
        emission: f64,
        /// Also write a controlled calibration sweep to this CSV
        #[arg(long)]
        calib: Option<PathBuf>,
    },
    /// Project a point-cloud CSV into reflectance and depth images
    Project {
        /// Cloud CSV (fused-cloud or scan format, normalized intensities)
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Output file stem
        #[arg(long, default_value = "projected")]
        stem: String,
        /// Project into four virtual cameras at 0/90/180/270 degrees
        #[arg(long)]
        four_views: bool,
        #[command(flatten)]
        proj: ProjArgs,
    },
    /// Fuse the first N scans into one cloud
    Accumulate {
        /// Directory of scan_*.csv files
        #[arg(long)]
        scans: PathBuf,
        /// Pose CSV (scan_id,tx,ty,tz,qw,qx,qy,qz); identity if omitted
        #[arg(long)]
        poses: Option<PathBuf>,
        /// Number of leading scans to fuse
        #[arg(long)]
        n: usize,
        /// Ignore poses and fuse untransformed (ground-truth path)
        #[arg(long = "static")]
        static_fuse: bool,
        /// Fused cloud CSV destination
        #[arg(long)]
        out_cloud: PathBuf,
        /// Also project the fused cloud into this directory
        #[arg(long)]
        project_out: Option<PathBuf>,
        #[command(flatten)]
        proj: ProjArgs,
    },
    /// Simulate motion degradation of a stationary sequence
    Augment {
        #[arg(long)]
        scans: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Translation noise std, meters
        #[arg(long, default_value_t = 0.02)]
        trans_std: f64,
        /// Rotation noise std, degrees
        #[arg(long, default_value_t = 0.5)]
        rot_std: f64,
        /// Intensity noise std on the normalized intensity scale
        #[arg(long, default_value_t = 0.01)]
        noise_std: f64,
        /// Scans kept after random sampling
        #[arg(long, default_value_t = 5)]
        keep: usize,
        /// Leading pool size sampled from
        #[arg(long, default_value_t = 5)]
        pool: usize,
        /// Odometry pattern: none | accel_jump | sharp_turn
        #[arg(long, default_value = "none")]
        pattern: String,
        /// Pattern strength
        #[arg(long, default_value_t = 1.0)]
        magnitude: f64,
        #[arg(long)]
        out_cloud: PathBuf,
        /// Write the applied per-scan perturbations here
        #[arg(long)]
        poses_out: Option<PathBuf>,
    },
    /// Fit compensation parameters from calibration samples
    FitCompensation {
        /// Calibration CSV (intensity,range,cos_alpha,material_id)
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Initial parameters TOML; built-in defaults if omitted
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        max_iterations: usize,
        #[arg(long, default_value_t = 1e-8)]
        gradient_tol: f64,
    },
    /// Apply intensity compensation to a projected image pair
    Compensate {
        /// Reflectance PGM (with sidecar and mask alongside)
        #[arg(long)]
        reflectance: PathBuf,
        /// Depth PGM from the same image set
        #[arg(long)]
        depth: PathBuf,
        /// Parameters TOML
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "compensated")]
        stem: String,
    },
    /// Fill invalid pixels of a sparse reflectance/depth pair
    Densify {
        #[arg(long)]
        reflectance: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "densified")]
        stem: String,
        /// Densification method
        #[arg(long, default_value = "multiscale_morph")]
        method: String,
        /// Comma-separated odd window sizes, ascending
        #[arg(long, default_value = "3,5,9")]
        scales: String,
        /// Fill guide: depth | none
        #[arg(long, default_value = "depth")]
        guide: String,
        /// Smoothing: edge_aware | none
        #[arg(long, default_value = "edge_aware")]
        smooth: String,
        #[arg(long, default_value_t = 0.1)]
        edge_sigma_r: f64,
    },
    /// Compare a prediction against ground truth
    Eval {
        /// Predicted reflectance PGM
        #[arg(long)]
        pred: PathBuf,
        /// Ground-truth reflectance PGM
        #[arg(long)]
        gt: PathBuf,
        /// Mask policy: intersection | gt_only
        #[arg(long, default_value = "intersection")]
        mask_policy: String,
        /// Report CSV destination
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline from a config or an existing manifest
    Pipeline {
        /// Pipeline config TOML
        #[arg(long, conflicts_with = "from_manifest")]
        config: Option<PathBuf>,
        /// Replay a previous run bit-exactly
        #[arg(long)]
        from_manifest: Option<PathBuf>,
        /// Override the output directory
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Time the per-frame stages over repeated runs
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        /// Timing CSV destination (stage,mean_ms,p95_ms)
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_scales(text: &str) -> Result<Vec<usize>, Error> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::validation(format!("bad scale `{t}`")))
        })
        .collect()
}

fn read_pair(
    reflectance: &Path,
    depth: &Path,
) -> Result<(reflectance_core::image::MaskedImage, reflectance_core::image::MaskedImage, ProjectionConfig), Error> {
    let (refl, sidecar) = pgm::read_channel(reflectance)?;
    let (depth_img, _) = pgm::read_channel(depth)?;
    if !refl.same_shape(&depth_img) {
        return Err(Error::shape("reflectance and depth files disagree on shape"));
    }
    Ok((refl, depth_img, sidecar.projection_config()?))
}

fn load_poses_for(
    scans: &[reflectance_core::geometry::Scan],
    poses_path: Option<&Path>,
    n: usize,
) -> Result<Vec<PoseSE3>, Error> {
    match poses_path {
        Some(path) => {
            let table = io::read_pose_csv(path)?;
            scans
                .iter()
                .take(n)
                .map(|scan| {
                    table
                        .iter()
                        .find(|(id, _)| *id == scan.scan_id)
                        .map(|(_, p)| *p)
                        .ok_or_else(|| {
                            Error::validation(format!("no pose for scan {}", scan.scan_id))
                        })
                })
                .collect()
        }
        None => Ok(vec![PoseSE3::identity(); n]),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth {
            scene,
            scans,
            out,
            points_per_scan,
            emission,
            calib,
        } => {
            let scene_data = io::read_scene_json(&scene)?;
            let rosette = RosetteConfig {
                points_per_scan,
                ..RosetteConfig::default()
            };
            let eta = CompensationParams::default().eta;
            eprintln!("simulating {scans} scans x {points_per_scan} points");
            let simulated = simulate_scans(&scene_data.primitives, &rosette, scans, emission, &eta);
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            io::write_scan_dir(&out, &simulated, &io::ScanDirMeta { intensity_max: 1.0 })?;
            let poses: Vec<(u64, PoseSE3)> = simulated
                .iter()
                .map(|s| (s.scan_id, PoseSE3::identity()))
                .collect();
            io::write_pose_csv(&out.join("poses.csv"), &poses)?;
            // Ground truth for oracle checks downstream.
            let manifest = serde_json::json!({
                "emission": emission,
                "eta": eta,
                "rosette": rosette,
                "materials": scene_data
                    .primitives
                    .iter()
                    .enumerate()
                    .map(|(i, p)| serde_json::json!({"material_id": i, "rho": p.rho}))
                    .collect::<Vec<_>>(),
            });
            let manifest_path = out.join("synth_manifest.json");
            std::fs::write(
                &manifest_path,
                serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
            )
            .map_err(|e| Error::io(&manifest_path, e))?;
            if let Some(calib_path) = calib {
                let ranges: Vec<f64> = (1..=30).map(|i| i as f64).collect();
                let cos_alphas: Vec<f64> = (0..=12)
                    .map(|i| (i as f64 * 5.0f64).to_radians().cos())
                    .collect();
                let mut samples = Vec::new();
                for (i, prim) in scene_data.primitives.iter().enumerate() {
                    samples.extend(controlled_samples(
                        &ranges,
                        &cos_alphas,
                        prim.rho,
                        emission,
                        &eta,
                        i as u32,
                    ));
                }
                io::write_calib_csv(&calib_path, &samples)?;
            }
            eprintln!("wrote {} scans to {}", simulated.len(), out.display());
            Ok(())
        }
        Command::Project {
            cloud,
            out,
            stem,
            four_views,
            proj,
        } => {
            let points = io::read_cloud_csv(&cloud)?;
            let cfg = proj.to_config()?;
            if four_views {
                if cfg.mode != ProjectionMode::VirtualCamera {
                    return Err(Error::validation("--four-views requires --mode virtual_camera"));
                }
                for (view, (refl, depth)) in project_four_views(&points, &cfg)?.into_iter().enumerate() {
                    let yaw = view as f64 * std::f64::consts::FRAC_PI_2;
                    let view_cfg = cfg.with_camera_yaw(yaw);
                    pgm::write_image_set(&out, &format!("{stem}_view{view}"), &refl, &depth, &view_cfg)?;
                }
            } else {
                let (refl, depth) = project(&points, &cfg)?;
                pgm::write_image_set(&out, &stem, &refl, &depth, &cfg)?;
            }
            Ok(())
        }
        Command::Accumulate {
            scans,
            poses,
            n,
            static_fuse,
            out_cloud,
            project_out,
            proj,
        } => {
            let all = io::read_scan_dir(&scans)?;
            if n == 0 || n > all.len() {
                return Err(Error::validation(format!(
                    "--n must lie in [1, {}]",
                    all.len()
                )));
            }
            let fused: FusedCloud = if static_fuse || poses.is_none() {
                fuse_static(&all[..n])?
            } else {
                let pose_list = load_poses_for(&all, poses.as_deref(), n)?;
                fuse_with_poses(&all[..n], &pose_list)?
            };
            io::write_fused_csv(&out_cloud, &fused)?;
            eprintln!("fused {} points from {} scans", fused.len(), fused.n_scans);
            if let Some(dir) = project_out {
                let cfg = proj.to_config()?;
                let (refl, depth) = project(&fused.points, &cfg)?;
                pgm::write_image_set(&dir, "accumulated", &refl, &depth, &cfg)?;
            }
            Ok(())
        }
        Command::Augment {
            scans,
            seed,
            trans_std,
            rot_std,
            noise_std,
            keep,
            pool,
            pattern,
            magnitude,
            out_cloud,
            poses_out,
        } => {
            let all = io::read_scan_dir(&scans)?;
            let cfg = AugmentConfig {
                seed,
                trans_std,
                rot_std: rot_std.to_radians(),
                noise_std,
                keep_n: keep,
                pool_n: pool,
                odom_pattern: pattern.parse::<OdomPattern>()?,
                odom_magnitude: magnitude,
            };
            let (cloud, applied) = augment(&all, &cfg)?;
            io::write_fused_csv(&out_cloud, &cloud)?;
            if let Some(path) = poses_out {
                let rows: Vec<(u64, PoseSE3)> = applied
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i as u64, *p))
                    .collect();
                io::write_pose_csv(&path, &rows)?;
            }
            eprintln!(
                "augmented {} scans into {} points (seed {seed})",
                cloud.n_scans,
                cloud.len()
            );
            Ok(())
        }
        Command::FitCompensation {
            samples,
            out,
            init,
            max_iterations,
            gradient_tol,
        } => {
            let data = io::read_calib_csv(&samples)?;
            let init_params = match init {
                Some(path) => io::read_params_toml(&path)?,
                None => CompensationParams::default(),
            };
            let opts = FitOptions {
                max_iterations,
                gradient_tol,
            };
            let (fitted, report) = fit_params(&data, &init_params, &opts)?;
            io::write_params_toml(&out, &fitted)?;
            eprintln!(
                "fit: {} iterations, residual RMS {:.3e}, gradient {:.3e}, converged: {}",
                report.iterations, report.residual_rms, report.gradient_norm, report.converged
            );
            if !report.converged {
                eprintln!("warning: fit did not reach the gradient tolerance; best iterate written");
            }
            Ok(())
        }
        Command::Compensate {
            reflectance,
            depth,
            params,
            out,
            stem,
        } => {
            let (refl, depth_img, cfg) = read_pair(&reflectance, &depth)?;
            let p = io::read_params_toml(&params)?;
            let normals = estimate_normals(&depth_img, &cfg);
            let compensated = compensate_image(&refl, &depth_img, &normals, &p)?;
            pgm::write_image_set(&out, &stem, &compensated, &depth_img, &cfg)?;
            Ok(())
        }
        Command::Densify {
            reflectance,
            depth,
            out,
            stem,
            method,
            scales,
            guide,
            smooth,
            edge_sigma_r,
        } => {
            let (refl, depth_img, cfg) = read_pair(&reflectance, &depth)?;
            let dcfg = DensifyConfig {
                method: match method.as_str() {
                    "multiscale_morph" => DensifyMethod::MultiscaleMorph,
                    other => {
                        return Err(Error::validation(format!("unknown method `{other}`")))
                    }
                },
                scales: parse_scales(&scales)?,
                smoothing: match smooth.as_str() {
                    "none" => Smoothing::None,
                    "edge_aware" => Smoothing::EdgeAware,
                    other => {
                        return Err(Error::validation(format!("unknown smoothing `{other}`")))
                    }
                },
                edge_sigma_r,
                guide: match guide.as_str() {
                    "none" => FillGuide::None,
                    "depth" => FillGuide::Depth,
                    other => return Err(Error::validation(format!("unknown guide `{other}`"))),
                },
            };
            let (dense_refl, dense_depth) = densify(&refl, &depth_img, &dcfg)?;
            pgm::write_image_set(&out, &stem, &dense_refl, &dense_depth, &cfg)?;
            Ok(())
        }
        Command::Eval {
            pred,
            gt,
            mask_policy,
            out,
        } => {
            let (pred_img, _) = pgm::read_channel(&pred)?;
            let (gt_img, _) = pgm::read_channel(&gt)?;
            let policy = mask_policy.parse::<MaskPolicy>()?;
            let report = evaluate(&pred_img, &gt_img, policy)?;
            let text = format!(
                "psnr_db,ssim,rmse,mae,n_pixels\n{},{},{},{},{}\n",
                report.psnr_db, report.ssim, report.rmse, report.mae, report.n_pixels
            );
            std::fs::write(&out, text).map_err(|e| Error::io(&out, e))?;
            eprintln!(
                "psnr {:.3} dB  ssim {:.4}  rmse {:.5}  mae {:.5}  ({} px)",
                report.psnr_db, report.ssim, report.rmse, report.mae, report.n_pixels
            );
            Ok(())
        }
        Command::Pipeline {
            config,
            from_manifest,
            out_dir,
        } => {
            let manifest = match (config, from_manifest) {
                (Some(cfg_path), None) => {
                    let cfg = load_config(&cfg_path)?;
                    run_pipeline(&cfg, out_dir.as_deref())?
                }
                (None, Some(manifest_path)) => {
                    run_from_manifest(&manifest_path, out_dir.as_deref())?
                }
                _ => {
                    return Err(Error::validation(
                        "pipeline needs exactly one of --config or --from-manifest",
                    ))
                }
            };
            for stage in &manifest.stages {
                eprintln!("{:<14} {:8.2} ms", stage.name, stage.wall_ms);
            }
            Ok(())
        }
        Command::Bench {
            config,
            frames,
            out,
        } => {
            let cfg = load_config(&config)?;
            let report = run_bench(&cfg, frames)?;
            std::fs::write(&out, report.to_csv()).map_err(|e| Error::io(&out, e))?;
            for s in &report.stages {
                eprintln!("{:<12} mean {:8.3} ms  p95 {:8.3} ms", s.name, s.mean_ms, s.p95_ms);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("RF_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numerical(_) => ExitCode::from(4),
                _ => ExitCode::from(3),
            }
        }
    }
}
