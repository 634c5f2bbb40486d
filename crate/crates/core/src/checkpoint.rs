//! Checkpoint directories: `index.json` plus one little-endian f32 blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub blob: String,
    pub offset: u64,
    pub digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Index {
    pub format_version: u32,
    pub stage: String,
    pub tensors: BTreeMap<String, TensorEntry>,
    /// Side files stored next to the index, name → sha256.
    pub files: BTreeMap<String, String>,
    pub freeze: BTreeMap<String, bool>,
    pub config: serde_json::Value,
}

/// In-memory checkpoint. `files` holds small JSON side files such as the
/// vocabulary and feature statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub params: ParamSet<f32>,
    pub freeze: BTreeMap<String, bool>,
    pub config: serde_json::Value,
    pub files: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn tensor_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

impl Checkpoint {
    pub fn new(stage: impl Into<String>, params: ParamSet<f32>) -> Self {
        Checkpoint {
            stage: stage.into(),
            params,
            freeze: BTreeMap::new(),
            config: serde_json::Value::Null,
            files: BTreeMap::new(),
        }
    }

    pub fn index_path(dir: &Path) -> PathBuf {
        dir.join(INDEX_FILE)
    }

    pub fn exists(dir: &Path) -> bool {
        Self::index_path(dir).is_file()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let mut blob = Vec::new();
        let mut tensors = BTreeMap::new();
        for (name, t) in self.params.iter() {
            let bytes = tensor_bytes(t);
            tensors.insert(
                name.to_string(),
                TensorEntry {
                    shape: t.shape().to_vec(),
                    dtype: "f32".into(),
                    blob: BLOB_FILE.into(),
                    offset: blob.len() as u64,
                    digest: sha256_hex(&bytes),
                },
            );
            blob.extend(bytes);
        }
        let mut files = BTreeMap::new();
        for (name, text) in &self.files {
            if name == INDEX_FILE || name == BLOB_FILE || name.contains(['/', '\\']) {
                return Err(bad(dir, format!("invalid side file name {name}")));
            }
            let p = dir.join(name);
            fs::write(&p, text).map_err(Error::io(&p))?;
            files.insert(name.clone(), sha256_hex(text.as_bytes()));
        }
        let index = Index {
            format_version: FORMAT_VERSION,
            stage: self.stage.clone(),
            tensors,
            files,
            freeze: self.freeze.clone(),
            config: self.config.clone(),
        };
        let p = dir.join(BLOB_FILE);
        fs::write(&p, &blob).map_err(Error::io(&p))?;
        let p = Self::index_path(dir);
        let text = serde_json::to_string_pretty(&index).map_err(Error::json(&p))? + "\n";
        fs::write(&p, text).map_err(Error::io(&p))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = Self::index_path(dir);
        let text = fs::read_to_string(&p).map_err(Error::io(&p))?;
        let index: Index = serde_json::from_str(&text).map_err(|e| bad(&p, e.to_string()))?;
        if index.format_version != FORMAT_VERSION {
            return Err(bad(
                dir,
                format!("unsupported format version {}", index.format_version),
            ));
        }
        let mut blobs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        let mut entries: Vec<(&String, &TensorEntry)> = index.tensors.iter().collect();
        entries.sort_by_key(|(_, e)| (e.blob.clone(), e.offset));
        let mut params = ParamSet::new();
        for (name, e) in entries {
            if e.dtype != "f32" {
                return Err(bad(dir, format!("{name}: unsupported dtype {}", e.dtype)));
            }
            if e.blob.contains(['/', '\\']) {
                return Err(bad(dir, format!("{name}: invalid blob name")));
            }
            if !blobs.contains_key(&e.blob) {
                let bp = dir.join(&e.blob);
                blobs.insert(e.blob.clone(), fs::read(&bp).map_err(Error::io(&bp))?);
            }
            let blob = &blobs[&e.blob];
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let bytes = blob
                .get(start..start + 4 * n)
                .ok_or_else(|| bad(dir, format!("{name}: blob too short")))?;
            if sha256_hex(bytes) != e.digest {
                return Err(bad(dir, format!("{name}: digest mismatch")));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.insert(name.clone(), Tensor::new(e.shape.clone(), data)?);
        }
        let mut files = BTreeMap::new();
        for (name, digest) in &index.files {
            let fp = dir.join(name);
            let text = fs::read_to_string(&fp).map_err(Error::io(&fp))?;
            if &sha256_hex(text.as_bytes()) != digest {
                return Err(bad(dir, format!("{name}: digest mismatch")));
            }
            files.insert(name.clone(), text);
        }
        Ok(Checkpoint {
            stage: index.stage,
            params,
            freeze: index.freeze,
            config: index.config,
            files,
        })
    }

    pub fn file(&self, name: &str) -> Result<&str> {
        self.files
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| Error::invalid(format!("checkpoint has no {name}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut p = ParamSet::new();
        p.insert("llm.b", Tensor::from_fn([2, 3], |i| i as f32 * 0.5 - 1.0));
        p.insert("mlp.a", Tensor::from_fn([4], |i| (i as f32).sin()));
        p.insert("tokenizer.codebook", Tensor::full([3, 2], 0.25f32));
        let mut c = Checkpoint::new("pretrain", p);
        c.freeze.insert("tokenizer".into(), true);
        c.freeze.insert("mlp".into(), false);
        c.config = serde_json::json!({"seed": 3});
        c.files.insert("vocab.json".into(), "{\"a\": 1}\n".into());
        c
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let c = sample();
        c.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, c);
        let names: Vec<&str> = back.params.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["llm.b", "mlp.a", "tokenizer.codebook"]);
    }

    #[test]
    fn load_then_save_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        sample().save(a.path()).unwrap();
        Checkpoint::load(a.path()).unwrap().save(b.path()).unwrap();
        for f in [INDEX_FILE, BLOB_FILE, "vocab.json"] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        let p = dir.path().join(BLOB_FILE);
        let mut bytes = fs::read(&p).unwrap();
        bytes[5] ^= 0x40;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(
            Checkpoint::load(dir.path()),
            Err(Error::Checkpoint { .. })
        ));
    }

    #[test]
    fn tampered_side_file_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        fs::write(dir.path().join("vocab.json"), "{}").unwrap();
        assert!(Checkpoint::load(dir.path()).is_err());
    }

    #[test]
    fn blob_is_little_endian_f32() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamSet::new();
        p.insert("x.v", Tensor::new([1], vec![1.0f32]).unwrap());
        Checkpoint::new("s", p).save(dir.path()).unwrap();
        assert_eq!(
            fs::read(dir.path().join(BLOB_FILE)).unwrap(),
            vec![0, 0, 0x80, 0x3f]
        );
    }
}
