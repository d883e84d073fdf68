//! Checkpoint and adapter-bank files.
//!
//! A file is one line of JSON (the manifest) followed by raw little-endian `f64` blocks.
//! The manifest lists each block's name, byte offset from the end of the manifest line and
//! element count, plus a SHA-256 over the manifest (with an empty hash field) and payload.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{AdapterBank, AdapterLayout, AdapterPair, AttributeAdapter};
use crate::config::ScheduleConfig;
use crate::error::{Error, Result};
use crate::nn::{DenoiserModel, ModelConfig};
use crate::train::TrainConfig;
use crate::world::{AttributeSpec, ConditionVocab};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest<M> {
    kind: String,
    version: u32,
    meta: M,
    blocks: Vec<BlockInfo>,
    hash: String,
}

fn content_hash<M: Serialize>(manifest: &Manifest<M>, payload: &[u8]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(manifest)?);
    h.update(payload);
    Ok(hex::encode(h.finalize()))
}

fn encode<M: Serialize>(kind: &str, meta: M, blocks: &[(String, &[f64])]) -> Result<(Vec<u8>, String)> {
    let mut payload = Vec::new();
    let mut infos = Vec::with_capacity(blocks.len());
    for (name, data) in blocks {
        infos.push(BlockInfo { name: name.clone(), offset: payload.len() as u64, len: data.len() as u64 });
        for v in data.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut manifest =
        Manifest { kind: kind.to_string(), version: FORMAT_VERSION, meta, blocks: infos, hash: String::new() };
    manifest.hash = content_hash(&manifest, &payload)?;
    let mut out = serde_json::to_vec(&manifest)?;
    out.push(b'\n');
    out.extend_from_slice(&payload);
    Ok((out, manifest.hash))
}

fn decode<M: Serialize + DeserializeOwned>(
    kind: &str,
    bytes: &[u8],
    path: &str,
) -> Result<(M, Vec<(String, Vec<f64>)>, String)> {
    let bad = |m: String| Error::Format { path: path.to_string(), message: m };
    let nl = bytes.iter().position(|b| *b == b'\n').ok_or_else(|| bad("missing manifest line".into()))?;
    let mut manifest: Manifest<M> = serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(format!("manifest: {e}")))?;
    if manifest.kind != kind {
        return Err(bad(format!("expected a {kind} file, found {}", manifest.kind)));
    }
    if manifest.version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", manifest.version)));
    }
    let payload = &bytes[nl + 1..];
    let stored = std::mem::take(&mut manifest.hash);
    let actual = content_hash(&manifest, payload)?;
    if stored != actual {
        return Err(bad("content hash mismatch (file corrupted or edited)".into()));
    }
    let mut blocks = Vec::with_capacity(manifest.blocks.len());
    let mut expected_offset = 0u64;
    for b in &manifest.blocks {
        let start = b.offset as usize;
        let end = start + 8 * b.len as usize;
        if b.offset != expected_offset || end > payload.len() {
            return Err(bad(format!("block `{}` out of bounds", b.name)));
        }
        expected_offset = end as u64;
        let data =
            payload[start..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        blocks.push((b.name.clone(), data));
    }
    if expected_offset as usize != payload.len() {
        return Err(bad("trailing bytes after the last block".into()));
    }
    Ok((manifest.meta, blocks, stored))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    architecture: ModelConfig,
    schedule: ScheduleConfig,
    vocab: Vec<String>,
    config_hash: String,
}

/// Trained base model plus everything needed to sample from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DenoiserModel<f64>,
    pub schedule: ScheduleConfig,
    pub vocab: ConditionVocab,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<(Vec<u8>, String)> {
        let meta = CheckpointMeta {
            architecture: self.model.config().clone(),
            schedule: self.schedule.clone(),
            vocab: self.vocab.tokens().to_vec(),
            config_hash: self.config_hash.clone(),
        };
        let params = self.model.params();
        let blocks: Vec<(String, &[f64])> = params.into_iter().collect();
        encode("checkpoint", meta, &blocks)
    }

    /// Returns the parsed checkpoint and its content hash.
    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<(Self, String)> {
        let (meta, blocks, hash): (CheckpointMeta, _, _) = decode("checkpoint", bytes, path)?;
        let template = DenoiserModel::<f64>::from_params(
            meta.architecture.clone(),
            blocks.iter().map(|(_, d)| d.clone()).collect(),
        )
        .map_err(|e| Error::Format { path: path.to_string(), message: e.to_string() })?;
        for ((want, _), (got, _)) in template.params().iter().zip(&blocks) {
            if want != got {
                return Err(Error::Format {
                    path: path.to_string(),
                    message: format!("block `{got}` where `{want}` was expected"),
                });
            }
        }
        Ok((
            Self {
                model: template,
                schedule: meta.schedule,
                vocab: ConditionVocab::from_tokens(meta.vocab),
                config_hash: meta.config_hash,
            },
            hash,
        ))
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let (bytes, hash) = self.to_bytes()?;
        std::fs::write(path, bytes)?;
        Ok(hash)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankMeta {
    pub attribute: AttributeSpec,
    pub layout: AdapterLayout,
    pub architecture: ModelConfig,
    pub train: TrainConfig,
    /// Content hash of the checkpoint the bank was trained against.
    pub base_hash: String,
    pub orth: f64,
    pub orth_baseline: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankFile {
    pub meta: BankMeta,
    pub bank: AdapterBank<f64>,
}

impl BankFile {
    pub fn to_bytes(&self) -> Result<(Vec<u8>, String)> {
        let mut blocks: Vec<(String, &[f64])> = Vec::new();
        for a in &self.bank.adapters {
            for p in &a.pairs {
                blocks.push((format!("{}.{}.p", a.category, p.target), &p.p));
                blocks.push((format!("{}.{}.q", a.category, p.target), &p.q));
            }
        }
        encode("bank", self.meta.clone(), &blocks)
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<(Self, String)> {
        let (meta, blocks, hash): (BankMeta, _, _) = decode("bank", bytes, path)?;
        let bad = |m: String| Error::Format { path: path.to_string(), message: m };
        let r = meta.layout.len();
        if blocks.len() != 2 * r * meta.attribute.len() {
            return Err(bad(format!("expected {} blocks, found {}", 2 * r * meta.attribute.len(), blocks.len())));
        }
        let mut it = blocks.into_iter();
        let mut adapters = Vec::with_capacity(meta.attribute.len());
        for c in &meta.attribute.categories {
            let mut pairs = Vec::with_capacity(r);
            for (target, m, n) in &meta.layout.targets {
                let (pn, p) = it.next().expect("counted");
                let (qn, q) = it.next().expect("counted");
                if pn != format!("{c}.{target}.p") || qn != format!("{c}.{target}.q") || p.len() != *m || q.len() != *n
                {
                    return Err(bad(format!("unexpected block `{pn}`")));
                }
                pairs.push(AdapterPair { target: *target, p, q });
            }
            adapters.push(AttributeAdapter { category: c.clone(), pairs });
        }
        Ok((
            Self {
                bank: AdapterBank { attribute: meta.attribute.name.clone(), layout: meta.layout.clone(), adapters },
                meta,
            },
            hash,
        ))
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let (bytes, hash) = self.to_bytes()?;
        std::fs::write(path, bytes)?;
        Ok(hash)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Architecture must match exactly; a different base hash only means transfer.
    /// Returns `true` when the bank was trained against a different checkpoint.
    pub fn check_against(&self, model: &DenoiserModel<f64>, checkpoint_hash: &str) -> Result<bool> {
        if &self.meta.architecture != model.config() {
            return Err(Error::ArchitectureMismatch(format!(
                "bank `{}` was trained for a different model architecture",
                self.meta.attribute.name
            )));
        }
        self.meta.layout.check_model(model).map_err(|e| Error::ArchitectureMismatch(e.to_string()))?;
        Ok(self.meta.base_hash != checkpoint_hash)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::Placement;
    use crate::nn::Projection;
    use crate::rng::seeded;

    fn model() -> DenoiserModel<f64> {
        let cfg = ModelConfig {
            tokens: 2,
            channels: 4,
            cond_dim: 4,
            attn_dim: 4,
            time_dim: 4,
            vocab_size: 4,
            ..ModelConfig::default()
        };
        DenoiserModel::init(cfg, &mut seeded(3)).unwrap()
    }

    fn checkpoint() -> Checkpoint {
        Checkpoint {
            model: model(),
            schedule: ScheduleConfig::default(),
            vocab: ConditionVocab::from_tokens(vec!["".into(), "worker".into(), "g:a".into(), "g:b".into()]),
            config_hash: "cfg".into(),
        }
    }

    fn bank_file(m: &DenoiserModel<f64>, base_hash: &str) -> BankFile {
        let layout = AdapterLayout::for_model(m, Placement::CrossAttention, &Projection::ALL).unwrap();
        let bank = AdapterBank::new("g", &["a".into(), "b".into()], layout.clone(), 0.3, &mut seeded(1)).unwrap();
        BankFile {
            meta: BankMeta {
                attribute: AttributeSpec::new("g", &["a", "b"]),
                layout,
                architecture: m.config().clone(),
                train: TrainConfig::default(),
                base_hash: base_hash.into(),
                orth: 0.1,
                orth_baseline: 1.0 / 3.0,
                config_hash: "cfg".into(),
            },
            bank,
        }
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let c = checkpoint();
        let (bytes, hash) = c.to_bytes().unwrap();
        let (back, h2) = Checkpoint::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(hash, h2);
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap().0, bytes);
        let x = [0.2, -0.7];
        assert_eq!(c.model.forward(&x, 1, 4, None).unwrap(), back.model.forward(&x, 1, 4, None).unwrap());
    }

    #[test]
    fn bank_round_trip_is_byte_identical() {
        let m = model();
        let b = bank_file(&m, "base");
        let (bytes, _) = b.to_bytes().unwrap();
        let (back, _) = BankFile::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back, b);
        assert_eq!(back.to_bytes().unwrap().0, bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let (mut bytes, _) = checkpoint().to_bytes().unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes, "mem"), Err(Error::Format { .. })));
        assert!(Checkpoint::from_bytes(b"not a manifest", "mem").is_err());
        let (bank_bytes, _) = bank_file(&model(), "x").to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bank_bytes, "mem").is_err());
    }

    #[test]
    fn architecture_mismatch_and_transfer() {
        let m = model();
        let b = bank_file(&m, "base");
        assert!(!b.check_against(&m, "base").unwrap());
        assert!(b.check_against(&m, "other").unwrap());
        let other = DenoiserModel::init(ModelConfig { channels: 6, ..m.config().clone() }, &mut seeded(1)).unwrap();
        assert!(matches!(b.check_against(&other, "base"), Err(Error::ArchitectureMismatch(_))));
    }

    #[test]
    fn manifest_is_a_plain_json_line() {
        let (bytes, hash) = checkpoint().to_bytes().unwrap();
        let nl = bytes.iter().position(|b| *b == b'\n').unwrap();
        let v: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(v["kind"], "checkpoint");
        assert_eq!(v["hash"], hash.as_str());
        let total: u64 = v["blocks"].as_array().unwrap().iter().map(|b| b["len"].as_u64().unwrap()).sum();
        assert_eq!((bytes.len() - nl - 1) as u64, 8 * total);
    }
}
