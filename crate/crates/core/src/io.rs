//! File formats: cameras, PGM/PBM images, JSON documents, scene
//! directories and trace CSVs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Camera, GrayImage, LikelihoodMaps, Mask, Scene, ShapeParams};
use crate::topology_search::TraceRow;

/// One camera per line: the 3×4 matrix row-major, then width and height.
pub fn format_cameras(cams: &[Camera]) -> String {
    let mut out = String::new();
    for c in cams {
        let vals: Vec<String> = (0..3)
            .flat_map(|r| (0..4).map(move |k| (r, k)))
            .map(|(r, k)| format!("{}", c.p[(r, k)]))
            .collect();
        let _ = writeln!(out, "{} {} {}", vals.join(" "), c.width, c.height);
    }
    out
}

pub fn parse_cameras(text: &str) -> Result<Vec<Camera>> {
    let mut cams = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 14 {
            return Err(Error::Format(format!("cameras line {}: expected 14 fields, got {}", n + 1, tok.len())));
        }
        let mut p = Matrix3x4::zeros();
        for k in 0..12 {
            p[(k / 4, k % 4)] = tok[k]
                .parse()
                .map_err(|_| Error::Format(format!("cameras line {}: bad number {:?}", n + 1, tok[k])))?;
        }
        let dim = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("cameras line {}: bad size {s:?}", n + 1)))
        };
        cams.push(Camera::new(p, dim(tok[12])?, dim(tok[13])?)?);
    }
    Ok(cams)
}

pub fn write_cameras(path: &Path, cams: &[Camera]) -> Result<()> {
    Ok(fs::write(path, format_cameras(cams))?)
}

pub fn read_cameras(path: &Path) -> Result<Vec<Camera>> {
    parse_cameras(&fs::read_to_string(path)?)
}

/// Header of a binary netpbm file: magic, width, height, maxval (PGM only)
/// and the offset of the pixel data.
fn netpbm_header(bytes: &[u8], n_fields: usize) -> Result<(Vec<String>, usize)> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < n_fields {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'#' {
            i += 1;
        }
        if start == i {
            return Err(Error::Format("truncated netpbm header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the data
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(Error::Format("netpbm header not terminated".into()));
    }
    Ok((fields, i + 1))
}

fn dims(fields: &[String]) -> Result<(usize, usize)> {
    let p = |s: &String| s.parse::<usize>().map_err(|_| Error::Format(format!("bad image size {s:?}")));
    Ok((p(&fields[1])?, p(&fields[2])?))
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let (fields, off) = netpbm_header(bytes, 4)?;
    if fields[0] != "P5" {
        return Err(Error::Format(format!("expected P5, got {}", fields[0])));
    }
    let (width, height) = dims(&fields)?;
    if fields[3] != "255" {
        return Err(Error::Format(format!("unsupported maxval {}", fields[3])));
    }
    let data = bytes
        .get(off..off + width * height)
        .ok_or_else(|| Error::Format("truncated PGM data".into()))?
        .to_vec();
    Ok(GrayImage { width, height, data })
}

/// P4 with foreground as 1 (black), rows padded to whole bytes.
pub fn encode_pbm(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P4\n{} {}\n", mask.width, mask.height).into_bytes();
    let row_bytes = mask.width.div_ceil(8);
    for v in 0..mask.height {
        let mut row = vec![0u8; row_bytes];
        for u in 0..mask.width {
            if mask.get(u, v) {
                row[u / 8] |= 0x80 >> (u % 8);
            }
        }
        out.extend_from_slice(&row);
    }
    out
}

pub fn decode_pbm(bytes: &[u8]) -> Result<Mask> {
    let (fields, off) = netpbm_header(bytes, 3)?;
    if fields[0] != "P4" {
        return Err(Error::Format(format!("expected P4, got {}", fields[0])));
    }
    let (width, height) = dims(&fields)?;
    let row_bytes = width.div_ceil(8);
    let data = bytes
        .get(off..off + row_bytes * height)
        .ok_or_else(|| Error::Format("truncated PBM data".into()))?;
    let mut mask = Mask::new(width, height);
    for v in 0..height {
        for u in 0..width {
            mask.set(u, v, data[v * row_bytes + u / 8] & (0x80 >> (u % 8)) != 0);
        }
    }
    Ok(mask)
}

/// A mask from PBM (P4) or a {0, 255} PGM (P5).
pub fn decode_mask(bytes: &[u8]) -> Result<Mask> {
    match bytes.get(..2) {
        Some(b"P4") => decode_pbm(bytes),
        Some(b"P5") => {
            let img = decode_pgm(bytes)?;
            if let Some(bad) = img.data.iter().find(|&&d| d != 0 && d != 255) {
                return Err(Error::Format(format!("mask PGM has level {bad}")));
            }
            Ok(Mask {
                width: img.width,
                height: img.height,
                data: img.data.iter().map(|&d| d == 255).collect(),
            })
        }
        _ => Err(Error::Format("not a PBM or PGM file".into())),
    }
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    Ok(fs::write(path, encode_pgm(img))?)
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    decode_pgm(&fs::read(path)?)
}

pub fn write_pbm(path: &Path, mask: &Mask) -> Result<()> {
    Ok(fs::write(path, encode_pbm(mask))?)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    decode_mask(&fs::read(path)?)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(fs::write(path, s)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Scene settings stored next to the cameras and maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub times: Vec<f64>,
    pub stem_diameter: f64,
    /// Per-level log densities of the map values under each class.
    pub log_fg: Vec<f64>,
    pub log_bg: Vec<f64>,
}

pub const CAMERAS_FILE: &str = "cameras.txt";
pub const SCENE_FILE: &str = "scene.json";

pub fn map_file_name(view: usize) -> String {
    format!("map_{view:03}.pgm")
}

/// Writes `cameras.txt`, `scene.json` and one `map_NNN.pgm` per view.
pub fn write_scene_dir(dir: &Path, cameras: &[Camera], maps: &[GrayImage], meta: &SceneMeta) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_cameras(&dir.join(CAMERAS_FILE), cameras)?;
    write_json(&dir.join(SCENE_FILE), meta)?;
    for (i, m) in maps.iter().enumerate() {
        write_pgm(&dir.join(map_file_name(i)), m)?;
    }
    Ok(())
}

pub fn read_scene_dir(dir: &Path) -> Result<Scene> {
    let cameras = read_cameras(&dir.join(CAMERAS_FILE))?;
    let meta: SceneMeta = read_json(&dir.join(SCENE_FILE))?;
    let maps = (0..cameras.len())
        .map(|i| read_pgm(&dir.join(map_file_name(i))))
        .collect::<Result<Vec<_>>>()?;
    let maps = LikelihoodMaps::from_tables(maps, &meta.log_fg, &meta.log_bg)?;
    Scene::new(
        cameras,
        maps,
        meta.times,
        ShapeParams {
            stem_diameter: meta.stem_diameter,
        },
    )
}

pub const TRACE_HEADER: &str = "stage,action,log_marginal,n_curves,n_sites,wall_ms";

pub fn format_trace(rows: &[TraceRow]) -> String {
    let mut out = format!("{TRACE_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.stage, r.action, r.log_marginal, r.n_curves, r.n_sites, r.wall_ms
        );
    }
    out
}

/// Row-major 3×3 blocks, `[frame][site]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceFile {
    pub covariances: Vec<Vec<[f64; 9]>>,
}

impl CovarianceFile {
    pub fn from_blocks(blocks: &[Vec<Matrix3<f64>>]) -> Self {
        CovarianceFile {
            covariances: blocks
                .iter()
                .map(|f| {
                    f.iter()
                        .map(|c| std::array::from_fn(|k| c[(k / 3, k % 3)]))
                        .collect()
                })
                .collect(),
        }
    }
}
