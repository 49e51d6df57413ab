//! Single-file model archive.
//!
//! Layout: the magic bytes `SCCK`, a little-endian `u32` manifest length, the
//! JSON manifest, then every parameter array as little-endian `f64` values in
//! manifest order.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{ModelConfig, ModelPair, SemanticCodec};
use crate::error::{Error, Result};
use crate::kan::CrClass;
use crate::tape::Parameterized;

pub const MAGIC: &[u8; 4] = b"SCCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset in `f64` elements from the start of the data block.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub name: String,
    pub cr: CrClass,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub config: ModelConfig,
    pub models: Vec<ModelEntry>,
}

fn named_models(pair: &ModelPair) -> Vec<(&'static str, &SemanticCodec)> {
    let mut v = vec![("mentor", &pair.mentor), ("student", &pair.student)];
    if let Some(c) = &pair.student_no_kd {
        v.push(("student_no_kd", c));
    }
    v
}

pub fn save_checkpoint(pair: &ModelPair, seed: u64, path: &Path) -> Result<()> {
    let mut models = Vec::new();
    let mut offset = 0;
    for (name, codec) in named_models(pair) {
        let arrays = codec
            .params()
            .iter()
            .map(|p| {
                let e = ArrayEntry {
                    name: p.name.clone(),
                    rows: p.rows,
                    cols: p.cols,
                    offset,
                };
                offset += p.len();
                e
            })
            .collect();
        models.push(ModelEntry {
            name: name.to_string(),
            cr: codec.cr,
            arrays,
        });
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        seed,
        config_hash: pair.config.hash(),
        config: pair.config.clone(),
        models,
    };
    let json = serde_json::to_vec(&manifest)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&(json.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for (_, codec) in named_models(pair) {
        for p in codec.params() {
            for v in &p.data {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

/// Reads only the manifest.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    Ok(read_parts(path)?.0)
}

fn read_parts(path: &Path) -> Result<(Manifest, Vec<f64>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + len {
        return Err(Error::Checkpoint("truncated manifest".into()));
    }
    let manifest: Manifest =
        serde_json::from_slice(&bytes[8..8 + len]).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", manifest.version)));
    }
    let data = &bytes[8 + len..];
    if data.len() % 8 != 0 {
        return Err(Error::Checkpoint("data block not a whole number of f64".into()));
    }
    let values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((manifest, values))
}

/// Loads a pair, checking the stored hash and, if given, the expected model config.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<(ModelPair, Manifest)> {
    let (manifest, values) = read_parts(path)?;
    if manifest.config.hash() != manifest.config_hash {
        return Err(Error::Checkpoint("stored config does not match its hash".into()));
    }
    if let Some(cfg) = expected {
        if cfg.hash() != manifest.config_hash {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: run config {} vs checkpoint {}",
                cfg.hash(),
                manifest.config_hash
            )));
        }
    }
    let mut pair = ModelPair::new(manifest.config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    if manifest.models.iter().any(|m| m.name == "student_no_kd") {
        pair.student_no_kd = Some(pair.student.clone());
    }
    for entry in &manifest.models {
        let codec = match entry.name.as_str() {
            "mentor" => &mut pair.mentor,
            "student" => &mut pair.student,
            "student_no_kd" => pair.student_no_kd.as_mut().expect("created above"),
            other => return Err(Error::Checkpoint(format!("unknown model {other:?}"))),
        };
        if codec.cr != entry.cr {
            return Err(Error::Checkpoint(format!("model {} has wrong class", entry.name)));
        }
        let mut params = codec.params_mut();
        if params.len() != entry.arrays.len() {
            return Err(Error::Checkpoint(format!(
                "model {}: {} arrays, expected {}",
                entry.name,
                entry.arrays.len(),
                params.len()
            )));
        }
        for (p, a) in params.iter_mut().zip(&entry.arrays) {
            if p.name != a.name || p.rows != a.rows || p.cols != a.cols {
                return Err(Error::Checkpoint(format!(
                    "array {} ({}x{}) does not match {} ({}x{})",
                    a.name, a.rows, a.cols, p.name, p.rows, p.cols
                )));
            }
            let end = a.offset + a.rows * a.cols;
            if end > values.len() {
                return Err(Error::Checkpoint(format!("array {} out of bounds", a.name)));
            }
            p.data.copy_from_slice(&values[a.offset..end]);
        }
    }
    Ok((pair, manifest))
}
