//! Binary checkpoint format.
//!
//! ```text
//! "NCAL" | u32 version | u64 meta length | meta JSON | sha256(meta ‖ body) | body
//! ```
//!
//! The body is a sequence of little-endian `f64` blobs whose names and shapes
//! are listed, in order, in the meta block.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{PtModel, PtModelConfig};
use super::optim::{Adam, AdamState, LrMap, OptimizerState, PlateauScheduler};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NCAL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: PtModel,
    pub optimizer: Option<OptimizerState>,
    /// Number of completed training epochs.
    pub epoch: u64,
    /// Free-form run metadata (training configuration, config hash).
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct BlobMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct OptimMeta {
    adam: Adam,
    step: u64,
    lr: LrMap,
    scheduler: PlateauScheduler,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model: PtModelConfig,
    epoch: u64,
    optimizer: Option<OptimMeta>,
    extra: serde_json::Value,
    blobs: Vec<BlobMeta>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blobs: Vec<(String, &[usize], &[f64])> = vec![
            ("nominal".into(), self.model.nominal.shape(), self.model.nominal.data()),
            ("cie".into(), self.model.cie.shape(), self.model.cie.data()),
        ];
        for p in &self.model.store.params {
            blobs.push((format!("param:{}", p.name), p.value.shape(), p.value.data()));
        }
        if let Some(opt) = &self.optimizer {
            for (p, (m, v)) in self.model.store.params.iter().zip(opt.moments.m.iter().zip(&opt.moments.v)) {
                blobs.push((format!("adam.m:{}", p.name), p.value.shape(), m));
                blobs.push((format!("adam.v:{}", p.name), p.value.shape(), v));
            }
        }
        let meta = Meta {
            model: self.model.config.clone(),
            epoch: self.epoch,
            optimizer: self.optimizer.as_ref().map(|o| OptimMeta {
                adam: o.adam,
                step: o.moments.step,
                lr: o.lr,
                scheduler: o.scheduler,
            }),
            extra: self.extra.clone(),
            blobs: blobs
                .iter()
                .map(|(name, shape, _)| BlobMeta {
                    name: name.clone(),
                    shape: shape.to_vec(),
                })
                .collect(),
        };
        let meta = serde_json::to_vec(&meta)?;
        let mut body = Vec::with_capacity(blobs.iter().map(|b| b.2.len() * 8).sum());
        for (_, _, data) in &blobs {
            for v in data.iter() {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut hasher = Sha256::new();
        hasher.update(&meta);
        hasher.update(&body);
        let hash = hasher.finalize();

        let mut out = Vec::with_capacity(16 + meta.len() + 32 + body.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&hash);
        out.extend_from_slice(&body);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing NCAL magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let meta_end = usize::try_from(meta_len)
            .ok()
            .and_then(|l| l.checked_add(16))
            .filter(|end| end.checked_add(32).is_some_and(|e| e <= bytes.len()))
            .ok_or_else(|| corrupt("truncated header"))?;
        let meta_bytes = &bytes[16..meta_end];
        let hash = &bytes[meta_end..meta_end + 32];
        let body = &bytes[meta_end + 32..];
        let mut hasher = Sha256::new();
        hasher.update(meta_bytes);
        hasher.update(body);
        if hasher.finalize().as_slice() != hash {
            return Err(corrupt("content hash mismatch"));
        }
        let meta: Meta = serde_json::from_slice(meta_bytes).map_err(|e| corrupt(format!("meta block: {e}")))?;

        let mut offset = 0usize;
        let mut tensors = Vec::with_capacity(meta.blobs.len());
        for b in &meta.blobs {
            let n: usize = b.shape.iter().product();
            let end = offset + n * 8;
            if end > body.len() {
                return Err(corrupt(format!("blob {} runs past the end of the file", b.name)));
            }
            let data = body[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((b.name.clone(), Tensor::new(b.shape.clone(), data)?));
            offset = end;
        }
        if offset != body.len() {
            return Err(corrupt("trailing bytes after the last blob"));
        }

        let mut nominal = None;
        let mut cie = None;
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in tensors {
            match name.split_once(':') {
                None if name == "nominal" => nominal = Some(t),
                None if name == "cie" => cie = Some(t),
                Some(("param", p)) => params.push((p.to_string(), t)),
                Some(("adam.m", _)) => m.push(t.into_data()),
                Some(("adam.v", _)) => v.push(t.into_data()),
                _ => return Err(corrupt(format!("unknown blob {name}"))),
            }
        }
        let (Some(nominal), Some(cie)) = (nominal, cie) else {
            return Err(corrupt("missing model buffers"));
        };
        let model = PtModel::from_parts(meta.model, nominal, cie, params).map_err(|e| corrupt(e.to_string()))?;
        let optimizer = match meta.optimizer {
            None => None,
            Some(o) => {
                if m.len() != model.store.len() || v.len() != model.store.len() {
                    return Err(corrupt("optimizer moments do not match the parameters"));
                }
                Some(OptimizerState {
                    adam: o.adam,
                    moments: AdamState { step: o.step, m, v },
                    lr: o.lr,
                    scheduler: o.scheduler,
                })
            }
        };
        Ok(Self {
            model,
            optimizer,
            epoch: meta.epoch,
            extra: meta.extra,
        })
    }
}

/// Writes atomically via a sibling temporary file.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
}
