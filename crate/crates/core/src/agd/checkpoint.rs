//! Directory checkpoints: `manifest.json` plus one little-endian tensor blob.

use std::fs;
use std::path::Path;

use imp_tensor::{ParamTree, Scalar, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::Moments;
use super::plan::{PlanCache, PlanCacheSnapshot};
use super::trainer::{RngStreams, TrainState};
use crate::error::{CoreError, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorGroup {
    Params,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub group: TensorGroup,
    pub path: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    pub len: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since the position is 128 bits wide.
    pub word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self, path: &str) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |detail: String| CoreError::Checkpoint {
            path: path.to_string(),
            detail,
        };
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|e| bad(format!("rng seed: {e}")))?
            .try_into()
            .map_err(|_| bad("rng seed must be 32 bytes".into()))?;
        let word_pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| bad(format!("rng position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngManifest {
    pub sampling: RngState,
    pub data: RngState,
    pub drop: RngState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    /// Completed optimizer updates.
    pub step: u64,
    #[serde(default)]
    pub config_hash: Option<String>,
    pub entries: Vec<TensorEntry>,
    pub rng: RngManifest,
    pub plan_cache: PlanCacheSnapshot,
}

/// Everything needed to resume a run.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub step: u64,
    pub params: ParamTree<T>,
    pub moments: Moments<T>,
    pub rng: RngStreams,
    pub plan_cache: PlanCacheSnapshot,
    pub config_hash: Option<String>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Fails if `reference` has a parameter the checkpoint lacks, or a shape differs.
    pub fn check_compatible(&self, reference: &ParamTree<T>, dir: &Path) -> Result<()> {
        for (path, t) in reference.iter() {
            let stored = self.params.get(path).map_err(|_| CoreError::Checkpoint {
                path: dir.display().to_string(),
                detail: format!("missing parameter {path}"),
            })?;
            if stored.shape() != t.shape() {
                return Err(CoreError::Checkpoint {
                    path: dir.display().to_string(),
                    detail: format!(
                        "parameter {path} has shape {:?}, expected {:?}",
                        stored.shape(),
                        t.shape()
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn into_state<P>(self) -> TrainState<T, P> {
        TrainState {
            params: self.params,
            moments: self.moments,
            step: self.step,
            rng: self.rng,
            cache: PlanCache::restore(&self.plan_cache),
        }
    }
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save_checkpoint<T: Scalar, P>(
    dir: &Path,
    state: &TrainState<T, P>,
    config_hash: Option<&str>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    let groups = [
        (TensorGroup::Params, &state.params),
        (TensorGroup::AdamM, &state.moments.m),
        (TensorGroup::AdamV, &state.moments.v),
    ];
    for (group, tree) in groups {
        for (path, t) in tree.iter() {
            let start = blob.len();
            for &x in t.data() {
                x.write_le(&mut blob);
            }
            entries.push(TensorEntry {
                group,
                path: path.to_string(),
                shape: t.shape().to_vec(),
                offset: start as u64,
                len: (blob.len() - start) as u64,
                sha256: digest(&blob[start..]),
            });
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.name().to_string(),
        step: state.step,
        config_hash: config_hash.map(str::to_string),
        entries,
        rng: RngManifest {
            sampling: RngState::capture(&state.rng.sampling),
            data: RngState::capture(&state.rng.data),
            drop: RngState::capture(&state.rng.drop),
        },
        plan_cache: state.cache.snapshot(),
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| CoreError::Serde(e.to_string()))?;
    // Blob first, manifest last: a directory with a manifest is complete.
    write_atomic(&dir.join(TENSORS_FILE), &blob)?;
    write_atomic(&dir.join(MANIFEST_FILE), &json)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| CoreError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CoreError::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| CoreError::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CoreError::Checkpoint {
        path: path.display().to_string(),
        detail: format!("malformed manifest: {e}"),
    })
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let name = dir.display().to_string();
    let bad = |detail: String| CoreError::Checkpoint {
        path: name.clone(),
        detail,
    };
    let manifest = read_manifest(dir)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "format version {} (this build reads {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    if manifest.dtype != T::DTYPE.name() {
        return Err(bad(format!(
            "stored as {} but loading as {}",
            manifest.dtype,
            T::DTYPE.name()
        )));
    }
    let blob_path = dir.join(TENSORS_FILE);
    let blob = fs::read(&blob_path).map_err(|e| CoreError::io(&blob_path, e))?;
    let width = T::DTYPE.size_of();
    let mut params = ParamTree::new();
    let mut m = ParamTree::new();
    let mut v = ParamTree::new();
    for e in &manifest.entries {
        let (start, end) = (e.offset as usize, (e.offset + e.len) as usize);
        let numel: usize = e.shape.iter().product();
        if end > blob.len() || e.len as usize != numel * width {
            return Err(bad(format!("entry {} out of bounds", e.path)));
        }
        let bytes = &blob[start..end];
        if digest(bytes) != e.sha256 {
            return Err(bad(format!("checksum mismatch for {}", e.path)));
        }
        let data = bytes.chunks_exact(width).map(T::read_le).collect();
        let t = Tensor::new(&e.shape, data)?;
        let tree = match e.group {
            TensorGroup::Params => &mut params,
            TensorGroup::AdamM => &mut m,
            TensorGroup::AdamV => &mut v,
        };
        tree.insert(e.path.clone(), t)?;
    }
    for (path, _) in params.iter() {
        if !m.contains(path) || !v.contains(path) {
            return Err(bad(format!("optimizer state missing for {path}")));
        }
    }
    Ok(Checkpoint {
        step: manifest.step,
        params,
        moments: Moments { m, v },
        rng: RngStreams {
            sampling: manifest.rng.sampling.restore(&name)?,
            data: manifest.rng.data.restore(&name)?,
            drop: manifest.rng.drop.restore(&name)?,
        },
        plan_cache: manifest.plan_cache,
        config_hash: manifest.config_hash,
    })
}
