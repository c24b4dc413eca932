//! Text-format I/O: scan and pose CSVs, fused clouds, calibration samples,
//! compensation parameter files, and scene descriptions.
//!
//! Scan files are `scan_NNNNNN.csv` with header `x,y,z,intensity,timestamp`;
//! the directory-level `meta.json` declares the raw intensity range
//! (`intensity_max`, default 255) used to normalize intensities into `[0, 1]`
//! at ingestion. Floats are written in Rust's shortest round-trip form, so
//! our own files re-parse bit-exactly.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accumulation::FusedCloud;
use crate::compensation::{CalibSample, CompensationParams};
use crate::error::{Error, Result};
use crate::geometry::{Point3, PoseRecord, PoseSE3, Scan};
use crate::synth::Scene;

/// Raw intensity range assumed when a scan directory has no `meta.json`.
pub const DEFAULT_INTENSITY_MAX: f64 = 255.0;

/// Per-directory scan metadata.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanDirMeta {
    /// Raw intensity value that maps to 1.0.
    pub intensity_max: f64,
}

impl Default for ScanDirMeta {
    fn default() -> Self {
        ScanDirMeta {
            intensity_max: DEFAULT_INTENSITY_MAX,
        }
    }
}

/// `scan_000123.csv` style file name for a scan id.
pub fn scan_file_name(scan_id: u64) -> String {
    format!("scan_{scan_id:06}.csv")
}

fn parse_scan_id(path: &Path) -> Result<u64> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::parse(path, "non-UTF8 file name"))?;
    let digits = stem
        .strip_prefix("scan_")
        .ok_or_else(|| Error::parse(path, "scan files must be named scan_<id>.csv"))?;
    digits
        .parse::<u64>()
        .map_err(|_| Error::parse(path, format!("bad scan id `{digits}`")))
}

/// Writes one scan; intensities are de-normalized by `intensity_max`.
pub fn write_scan_csv(path: &Path, scan: &Scan, intensity_max: f64) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "x,y,z,intensity,timestamp").map_err(|e| Error::io(path, e))?;
    for p in &scan.points {
        writeln!(
            w,
            "{},{},{},{},{}",
            p.x,
            p.y,
            p.z,
            p.intensity * intensity_max,
            scan.timestamp
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads one scan, normalizing raw intensities by `intensity_max` and
/// validating every point.
pub fn read_scan_csv(path: &Path, intensity_max: f64) -> Result<Scan> {
    let scan_id = parse_scan_id(path)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header.trim() == "x,y,z,intensity,timestamp" => {}
        _ => return Err(Error::parse(path, "expected header `x,y,z,intensity,timestamp`")),
    }
    let mut points = Vec::new();
    let mut timestamp = 0.0;
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let mut next_f64 = |name: &str| -> Result<f64> {
            fields
                .next()
                .ok_or_else(|| Error::parse(path, format!("line {}: missing {name}", lineno + 2)))?
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::parse(path, format!("line {}: bad {name}", lineno + 2)))
        };
        let x = next_f64("x")?;
        let y = next_f64("y")?;
        let z = next_f64("z")?;
        let raw = next_f64("intensity")?;
        let ts = next_f64("timestamp")?;
        if points.is_empty() {
            timestamp = ts;
        }
        let point = Point3::new(x, y, z, raw / intensity_max);
        point
            .validate()
            .map_err(|e| Error::parse(path, format!("line {}: {e}", lineno + 2)))?;
        points.push(point);
    }
    Ok(Scan::new(scan_id, timestamp, points))
}

/// Writes a scan directory: one CSV per scan plus `meta.json`.
pub fn write_scan_dir(dir: &Path, scans: &[Scan], meta: &ScanDirMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta_text = serde_json::to_string_pretty(meta).expect("meta serializes");
    fs::write(dir.join("meta.json"), meta_text).map_err(|e| Error::io(dir, e))?;
    for scan in scans {
        write_scan_csv(&dir.join(scan_file_name(scan.scan_id)), scan, meta.intensity_max)?;
    }
    Ok(())
}

/// Reads every `scan_*.csv` in a directory, sorted by scan id.
pub fn read_scan_dir(dir: &Path) -> Result<Vec<Scan>> {
    let meta_path = dir.join("meta.json");
    let meta: ScanDirMeta = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(&meta_path, e.to_string()))?
    } else {
        ScanDirMeta::default()
    };
    if !(meta.intensity_max.is_finite() && meta.intensity_max > 0.0) {
        return Err(Error::parse(&meta_path, "intensity_max must be > 0"));
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().map(|e| e == "csv").unwrap_or(false)
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .map(|n| n.starts_with("scan_"))
                    .unwrap_or(false)
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::validation(format!("no scan_*.csv files in {}", dir.display())));
    }
    let mut scans: Vec<Scan> = paths
        .iter()
        .map(|p| read_scan_csv(p, meta.intensity_max))
        .collect::<Result<_>>()?;
    scans.sort_by_key(|s| s.scan_id);
    for pair in scans.windows(2) {
        if pair[0].scan_id == pair[1].scan_id {
            return Err(Error::validation(format!(
                "duplicate scan id {} in {}",
                pair[0].scan_id,
                dir.display()
            )));
        }
    }
    Ok(scans)
}

/// Writes poses as `scan_id,tx,ty,tz,qw,qx,qy,qz`.
pub fn write_pose_csv(path: &Path, poses: &[(u64, PoseSE3)]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "scan_id,tx,ty,tz,qw,qx,qy,qz").map_err(|e| Error::io(path, e))?;
    for (scan_id, pose) in poses {
        let r = PoseRecord::from(*pose);
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            scan_id, r.tx, r.ty, r.tz, r.qw, r.qx, r.qy, r.qz
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_pose_csv(path: &Path) -> Result<Vec<(u64, PoseSE3)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "scan_id,tx,ty,tz,qw,qx,qy,qz" => {}
        _ => {
            return Err(Error::parse(
                path,
                "expected header `scan_id,tx,ty,tz,qw,qx,qy,qz`",
            ))
        }
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 8 {
            return Err(Error::parse(
                path,
                format!("line {}: expected 8 fields, got {}", lineno + 2, fields.len()),
            ));
        }
        let parse = |i: usize, name: &str| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|_| Error::parse(path, format!("line {}: bad {name}", lineno + 2)))
        };
        let scan_id = fields[0]
            .parse::<u64>()
            .map_err(|_| Error::parse(path, format!("line {}: bad scan_id", lineno + 2)))?;
        let pose = PoseSE3::new(
            parse(4, "qw")?,
            parse(5, "qx")?,
            parse(6, "qy")?,
            parse(7, "qz")?,
            parse(1, "tx")?,
            parse(2, "ty")?,
            parse(3, "tz")?,
        )
        .map_err(|e| Error::parse(path, format!("line {}: {e}", lineno + 2)))?;
        out.push((scan_id, pose));
    }
    Ok(out)
}

/// Writes a fused cloud as `x,y,z,intensity,source_id`.
pub fn write_fused_csv(path: &Path, cloud: &FusedCloud) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "x,y,z,intensity,source_id").map_err(|e| Error::io(path, e))?;
    for (p, id) in cloud.points.iter().zip(&cloud.source_ids) {
        writeln!(w, "{},{},{},{},{}", p.x, p.y, p.z, p.intensity, id)
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a point cloud CSV. Accepts both fused-cloud files
/// (`x,y,z,intensity,source_id`) and plain scan files
/// (`x,y,z,intensity,timestamp`, intensities already normalized).
pub fn read_cloud_csv(path: &Path) -> Result<Vec<Point3>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().map(str::trim);
    if !matches!(
        header,
        Some("x,y,z,intensity,source_id") | Some("x,y,z,intensity,timestamp")
    ) {
        return Err(Error::parse(path, "unrecognized cloud CSV header"));
    }
    let mut points = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 4 {
            return Err(Error::parse(path, format!("line {}: too few fields", lineno + 2)));
        }
        let mut vals = [0.0f64; 4];
        for (i, v) in vals.iter_mut().enumerate() {
            *v = fields[i]
                .parse()
                .map_err(|_| Error::parse(path, format!("line {}: bad field {}", lineno + 2, i)))?;
        }
        let p = Point3::new(vals[0], vals[1], vals[2], vals[3]);
        p.validate()
            .map_err(|e| Error::parse(path, format!("line {}: {e}", lineno + 2)))?;
        points.push(p);
    }
    Ok(points)
}

/// Writes calibration samples as `intensity,range,cos_alpha,material_id`.
pub fn write_calib_csv(path: &Path, samples: &[CalibSample]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "intensity,range,cos_alpha,material_id").map_err(|e| Error::io(path, e))?;
    for s in samples {
        writeln!(w, "{},{},{},{}", s.intensity, s.range, s.cos_alpha, s.material_id)
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_calib_csv(path: &Path) -> Result<Vec<CalibSample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "intensity,range,cos_alpha,material_id" => {}
        _ => {
            return Err(Error::parse(
                path,
                "expected header `intensity,range,cos_alpha,material_id`",
            ))
        }
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::parse(path, format!("line {}: expected 4 fields", lineno + 2)));
        }
        let sample = CalibSample {
            intensity: fields[0]
                .parse()
                .map_err(|_| Error::parse(path, format!("line {}: bad intensity", lineno + 2)))?,
            range: fields[1]
                .parse()
                .map_err(|_| Error::parse(path, format!("line {}: bad range", lineno + 2)))?,
            cos_alpha: fields[2]
                .parse()
                .map_err(|_| Error::parse(path, format!("line {}: bad cos_alpha", lineno + 2)))?,
            material_id: fields[3]
                .parse()
                .map_err(|_| Error::parse(path, format!("line {}: bad material_id", lineno + 2)))?,
        };
        sample
            .validate()
            .map_err(|e| Error::parse(path, format!("line {}: {e}", lineno + 2)))?;
        out.push(sample);
    }
    Ok(out)
}

/// Writes compensation parameters as flat TOML with the conventional keys
/// (`alpha..kappa`, `r_d`, `d`, `D`, `S_d`, `c`, `cos_min`, `r_ref`).
pub fn write_params_toml(path: &Path, params: &CompensationParams) -> Result<()> {
    params.validate().map_err(|e| Error::validation(format!("refusing to write: {e}")))?;
    let text = toml::to_string(params).map_err(|e| Error::parse(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_params_toml(path: &Path) -> Result<CompensationParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let params: CompensationParams =
        toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    params.validate()?;
    Ok(params)
}

pub fn write_scene_json(path: &Path, scene: &Scene) -> Result<()> {
    scene.validate()?;
    let text = serde_json::to_string_pretty(scene).map_err(|e| Error::parse(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_scene_json(path: &Path) -> Result<Scene> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let scene: Scene = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    scene.validate()?;
    Ok(scene)
}
