//! Binary PGM (P5) image files with JSON sidecars.
//!
//! Reflectance and depth are stored as 16-bit PGM (maxval 65535, big-endian
//! samples) with `physical = stored * scale`; intensity uses
//! `scale = 1/65535`, depth defaults to 1 mm per unit. Masks are 8-bit PGM
//! with 0/255. The sidecar records the projection geometry so downstream
//! tools can rebuild rays from the files alone.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::MaskedImage;
use crate::projection::{ProjectionConfig, ProjectionMode};

/// Default depth quantization: 1 mm per stored unit.
pub const DEFAULT_DEPTH_SCALE: f64 = 0.001;
/// Intensity quantization over the full 16-bit span.
pub const INTENSITY_SCALE: f64 = 1.0 / 65535.0;

/// Sidecar metadata stored next to each PGM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageSidecar {
    pub width: usize,
    pub height: usize,
    pub mode: ProjectionMode,
    pub phi_min_deg: f64,
    pub phi_max_deg: f64,
    pub hfov_deg: f64,
    pub camera_yaw_deg: f64,
    /// `reflectance`, `depth`, or `mask`.
    pub channel: String,
    /// Physical value per stored unit.
    pub scale: f64,
}

impl ImageSidecar {
    pub fn for_channel(cfg: &ProjectionConfig, channel: &str, scale: f64) -> Self {
        ImageSidecar {
            width: cfg.width,
            height: cfg.height,
            mode: cfg.mode,
            phi_min_deg: cfg.phi_min.to_degrees(),
            phi_max_deg: cfg.phi_max.to_degrees(),
            hfov_deg: cfg.horizontal_fov.to_degrees(),
            camera_yaw_deg: cfg.camera_yaw.to_degrees(),
            channel: channel.to_string(),
            scale,
        }
    }

    pub fn projection_config(&self) -> Result<ProjectionConfig> {
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

fn sidecar_path(pgm: &Path) -> PathBuf {
    pgm.with_extension("json")
}

/// Writes a 16-bit PGM; invalid pixels store 0 and the mask file is the
/// source of truth for validity.
pub fn write_pgm16(path: &Path, img: &MaskedImage, scale: f64) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = format!("P5\n{} {}\n65535\n", img.width(), img.height());
    w.write_all(header.as_bytes()).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(img.width() * img.height() * 2);
    for (value, valid) in img.values().iter().zip(img.mask()) {
        let stored = if *valid {
            (value / scale).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        buf.extend_from_slice(&stored.to_be_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the validity mask as an 8-bit PGM (0 invalid, 255 valid).
pub fn write_mask_pgm(path: &Path, img: &MaskedImage) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = format!("P5\n{} {}\n255\n", img.width(), img.height());
    w.write_all(header.as_bytes()).map_err(|e| Error::io(path, e))?;
    let buf: Vec<u8> = img.mask().iter().map(|&m| if m { 255 } else { 0 }).collect();
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

struct PgmRaw {
    width: usize,
    height: usize,
    maxval: u32,
    data: Vec<u8>,
}

fn read_pgm_raw(path: &Path) -> Result<PgmRaw> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if !bytes.starts_with(b"P5") {
        return Err(Error::parse(path, "missing P5 magic"));
    }
    // Header: magic, width, height, maxval as whitespace-separated ASCII
    // tokens, with # comments allowed; a single whitespace byte then
    // separates the header from the sample data.
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(path, "truncated PGM header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(path, "bad PGM header field"))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::parse(path, "missing header terminator"));
    }
    pos += 1;
    let (width, height, maxval) = (fields[0], fields[1], fields[2] as u32);
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(Error::parse(path, "unsupported PGM dimensions or maxval"));
    }
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let expected = width * height * bytes_per;
    if bytes.len() - pos < expected {
        return Err(Error::parse(
            path,
            format!("expected {expected} sample bytes, found {}", bytes.len() - pos),
        ));
    }
    Ok(PgmRaw {
        width,
        height,
        maxval,
        data: bytes[pos..pos + expected].to_vec(),
    })
}

/// Reads a 16-bit PGM back into raw stored units.
pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let raw = read_pgm_raw(path)?;
    if raw.maxval <= 255 {
        return Err(Error::parse(path, "expected a 16-bit PGM"));
    }
    let samples = raw
        .data
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((raw.width, raw.height, samples))
}

/// Reads an 8-bit mask PGM; any nonzero sample counts as valid.
pub fn read_mask_pgm(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let raw = read_pgm_raw(path)?;
    if raw.maxval > 255 {
        return Err(Error::parse(path, "expected an 8-bit mask PGM"));
    }
    Ok((raw.width, raw.height, raw.data.iter().map(|&b| b != 0).collect()))
}

/// Writes `<stem>_<channel>.pgm` plus its JSON sidecar.
pub fn write_channel(
    dir: &Path,
    stem: &str,
    channel: &str,
    img: &MaskedImage,
    cfg: &ProjectionConfig,
    scale: f64,
) -> Result<PathBuf> {
    let path = dir.join(format!("{stem}_{channel}.pgm"));
    write_pgm16(&path, img, scale)?;
    let sidecar = ImageSidecar::for_channel(cfg, channel, scale);
    let text = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::parse(&path, e.to_string()))?;
    fs::write(sidecar_path(&path), text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Quantization step that keeps every valid depth within the 16-bit span:
/// the 1 mm default, widened only when the scene exceeds 65.535 m.
pub fn depth_scale_for(depth: &MaskedImage) -> f64 {
    let max = depth
        .values()
        .iter()
        .zip(depth.mask())
        .filter(|(_, m)| **m)
        .map(|(v, _)| *v)
        .fold(0.0f64, f64::max);
    if max <= 65535.0 * DEFAULT_DEPTH_SCALE {
        DEFAULT_DEPTH_SCALE
    } else {
        max / 65535.0
    }
}

/// Writes reflectance, depth and mask files for one projected pair.
/// Returns the paths written.
pub fn write_image_set(
    dir: &Path,
    stem: &str,
    reflectance: &MaskedImage,
    depth: &MaskedImage,
    cfg: &ProjectionConfig,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    written.push(write_channel(dir, stem, "reflectance", reflectance, cfg, INTENSITY_SCALE)?);
    written.push(write_channel(dir, stem, "depth", depth, cfg, depth_scale_for(depth))?);
    let mask_path = dir.join(format!("{stem}_mask.pgm"));
    write_mask_pgm(&mask_path, reflectance)?;
    written.push(mask_path);
    Ok(written)
}

/// Reads one channel written by [`write_channel`], applying the sidecar
/// scale and the given mask.
pub fn read_channel(path: &Path) -> Result<(MaskedImage, ImageSidecar)> {
    let sidecar_file = sidecar_path(path);
    let text = fs::read_to_string(&sidecar_file).map_err(|e| Error::io(&sidecar_file, e))?;
    let sidecar: ImageSidecar =
        serde_json::from_str(&text).map_err(|e| Error::parse(&sidecar_file, e.to_string()))?;
    let (w, h, stored) = read_pgm16(path)?;
    if w != sidecar.width || h != sidecar.height {
        return Err(Error::parse(path, "sidecar dimensions disagree with the PGM"));
    }
    // The companion mask lives at <stem>_mask.pgm.
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::parse(path, "non-UTF8 file name"))?;
    let stem = name
        .rsplit_once('_')
        .map(|(s, _)| s)
        .ok_or_else(|| Error::parse(path, "expected <stem>_<channel>.pgm naming"))?;
    let mask_path = path.with_file_name(format!("{stem}_mask.pgm"));
    let (mw, mh, mask) = read_mask_pgm(&mask_path)?;
    if mw != w || mh != h {
        return Err(Error::parse(&mask_path, "mask dimensions disagree with the image"));
    }
    let values = stored
        .iter()
        .zip(&mask)
        .map(|(&s, &m)| if m { s as f64 * sidecar.scale } else { 0.0 })
        .collect();
    let img = MaskedImage::from_parts(w, h, values, mask)?;
    Ok((img, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn demo_image() -> MaskedImage {
        let mut img = MaskedImage::new(12, 7);
        for r in 0..7 {
            for c in 0..12 {
                if (r + c) % 3 != 0 {
                    img.set(r, c, (r * 12 + c) as f64 / 100.0);
                }
            }
        }
        img
    }

    #[test]
    fn image_set_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ProjectionConfig::panoramic(
            12,
            7,
            (-29.5f64).to_radians(),
            (29.5f64).to_radians(),
        )
        .unwrap();
        let refl = demo_image();
        let mut depth = MaskedImage::new(12, 7);
        for r in 0..7 {
            for c in 0..12 {
                if refl.is_valid(r, c) {
                    depth.set(r, c, 1.0 + (r + c) as f64);
                }
            }
        }
        write_image_set(dir.path(), "frame0", &refl, &depth, &cfg).unwrap();

        let (refl_back, sidecar) = read_channel(&dir.path().join("frame0_reflectance.pgm")).unwrap();
        assert_eq!(sidecar.channel, "reflectance");
        assert_eq!(sidecar.mode, ProjectionMode::Panoramic);
        assert_eq!(refl_back.mask(), refl.mask());
        for (a, b) in refl_back.values().iter().zip(refl.values()) {
            assert!((a - b).abs() <= 0.5 * INTENSITY_SCALE + 1e-12);
        }

        let (depth_back, sidecar_d) = read_channel(&dir.path().join("frame0_depth.pgm")).unwrap();
        assert_eq!(sidecar_d.scale, DEFAULT_DEPTH_SCALE);
        for (a, b) in depth_back.values().iter().zip(depth.values()) {
            assert!((a - b).abs() <= 0.5 * DEFAULT_DEPTH_SCALE + 1e-12);
        }
        let cfg_back = sidecar.projection_config().unwrap();
        assert_eq!(cfg_back.width, cfg.width);
        assert!((cfg_back.phi_min - cfg.phi_min).abs() < 1e-12);
    }

    #[test]
    fn far_depth_widens_the_quantization_step() {
        let mut depth = MaskedImage::new(4, 1);
        depth.set(0, 0, 30.0);
        assert_eq!(depth_scale_for(&depth), DEFAULT_DEPTH_SCALE);
        depth.set(0, 1, 120.0); // beyond the 65.535 m span of 1 mm units
        let scale = depth_scale_for(&depth);
        assert!(scale > DEFAULT_DEPTH_SCALE);
        assert!((120.0 / scale).round() <= 65535.0);

        let dir = tempfile::tempdir().unwrap();
        let cfg = ProjectionConfig::panoramic(
            4,
            1,
            (-29.5f64).to_radians(),
            (29.5f64).to_radians(),
        )
        .unwrap();
        let mut refl = MaskedImage::new(4, 1);
        refl.set(0, 0, 0.5);
        refl.set(0, 1, 0.5);
        write_image_set(dir.path(), "far", &refl, &depth, &cfg).unwrap();
        let (back, sidecar) = read_channel(&dir.path().join("far_depth.pgm")).unwrap();
        assert_eq!(sidecar.scale, scale);
        assert!((back.get(0, 1).unwrap() - 120.0).abs() <= 0.5 * scale);
    }

    #[test]
    fn rejects_malformed_headers() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.pgm");
        std::fs::write(&bad, b"P6\n2 2\n255\n....").unwrap();
        assert!(read_pgm16(&bad).is_err());
        std::fs::write(&bad, b"P5\n2 2\n65535\nxx").unwrap();
        assert!(read_pgm16(&bad).is_err());
    }

    #[test]
    fn determinism_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let img = demo_image();
        let a = dir.path().join("a.pgm");
        let b = dir.path().join("b.pgm");
        write_pgm16(&a, &img, INTENSITY_SCALE).unwrap();
        write_pgm16(&b, &img, INTENSITY_SCALE).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    proptest! {
        #[test]
        fn stored_units_roundtrip_exactly(
            values in proptest::collection::vec(0u16..=65535, 24),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let mut img = MaskedImage::new(6, 4);
            for (i, v) in values.iter().enumerate() {
                img.set(i / 6, i % 6, *v as f64 * INTENSITY_SCALE);
            }
            let path = dir.path().join("t.pgm");
            write_pgm16(&path, &img, INTENSITY_SCALE).unwrap();
            let (w, h, back) = read_pgm16(&path).unwrap();
            prop_assert_eq!((w, h), (6, 4));
            prop_assert_eq!(back, values);
        }
    }
}
