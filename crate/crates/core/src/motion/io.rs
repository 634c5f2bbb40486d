//! Motion files (JSON header plus raw little-endian f32 blob) and the
//! JSON-lines corpus manifest.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{MotionSequence, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionHeader {
    pub id: String,
    pub frames: usize,
    pub dims: usize,
    pub fps: f64,
    pub normalized: bool,
    pub stats_id: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Path of the motion header, relative to the manifest's directory.
    pub motion_path: PathBuf,
    pub text: String,
    pub split: Split,
}

fn blob_path(header: &Path) -> PathBuf {
    header.with_extension("bin")
}

/// Writes `<dir>/<id>.json` and `<dir>/<id>.bin`; returns the header path.
pub fn write_motion(dir: &Path, id: &str, seq: &MotionSequence) -> Result<PathBuf> {
    let header = MotionHeader {
        id: id.to_string(),
        frames: seq.rows(),
        dims: FEATURE_DIM,
        fps: seq.fps,
        normalized: seq.is_normalized(),
        stats_id: seq.stats_id.clone(),
    };
    let hpath = dir.join(format!("{id}.json"));
    let text = serde_json::to_string_pretty(&header).map_err(Error::json(&hpath))?;
    fs::write(&hpath, text + "\n").map_err(Error::io(&hpath))?;
    let mut bytes = Vec::with_capacity(seq.features.numel() * 4);
    for v in seq.features.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let bpath = blob_path(&hpath);
    fs::write(&bpath, bytes).map_err(Error::io(&bpath))?;
    Ok(hpath)
}

pub fn read_motion(header_path: &Path) -> Result<(MotionHeader, MotionSequence)> {
    let text = fs::read_to_string(header_path).map_err(Error::io(header_path))?;
    let header: MotionHeader = serde_json::from_str(&text).map_err(Error::json(header_path))?;
    if header.dims != FEATURE_DIM {
        return Err(Error::invalid(format!(
            "{}: expected {FEATURE_DIM} dims, header says {}",
            header_path.display(),
            header.dims
        )));
    }
    if header.normalized != header.stats_id.is_some() {
        return Err(Error::invalid(format!(
            "{}: normalized flag disagrees with stats_id",
            header_path.display()
        )));
    }
    let bpath = blob_path(header_path);
    let bytes = fs::read(&bpath).map_err(Error::io(&bpath))?;
    if bytes.len() != header.frames * FEATURE_DIM * 4 {
        return Err(Error::invalid(format!(
            "{}: blob holds {} bytes, header implies {}",
            bpath.display(),
            bytes.len(),
            header.frames * FEATURE_DIM * 4
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let mut seq =
        MotionSequence::new(Tensor::new([header.frames, FEATURE_DIM], data)?, header.fps)?;
    seq.stats_id = header.stats_id.clone();
    Ok((header, seq))
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e).map_err(Error::json(path))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(Error::io(path))?;
    f.write_all(&out).map_err(Error::io(path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path).map_err(Error::io(path))?;
    let mut entries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(&line).map_err(Error::json(path))?;
        if !seen.insert(e.id.clone()) {
            return Err(Error::invalid(format!("duplicate manifest id {}", e.id)));
        }
        entries.push(e);
    }
    Ok(entries)
}
