//! Checkpoint container: magic, JSON header, raw `f32` parameter values and
//! a trailing SHA-256 over everything before it.
//!
//! Loading verifies the digest before parsing anything, then checks the
//! stored configuration against the caller's and rebuilds the parameter
//! store from the stored manifest.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dataset::ProbmapMode;
use crate::error::{Error, Result};
use crate::network::{MultiTaskNet, NetworkConfig};
use crate::nn::{ParamGroup, ParamStore};
use crate::segmenter::{SegSchedule, SegmenterConfig, UNet3d};
use crate::training::{LossWeights, TaskMode, TrainSchedule, ValMetrics};

const MAGIC: &[u8; 8] = b"NVCKPT01";
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header<H> {
    kind: String,
    meta: H,
    params: Vec<ParamMeta>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn encode<H: Serialize>(kind: &str, meta: &H, store: &ParamStore<f32>) -> Result<Vec<u8>> {
    let header = Header {
        kind: kind.to_string(),
        meta,
        params: store
            .params()
            .iter()
            .map(|p| ParamMeta {
                name: p.name.clone(),
                group: p.group,
                shape: p.shape.clone(),
                trainable: p.trainable,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * store.params().iter().map(|p| p.value.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in store.params() {
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Decoded<H> {
    meta: H,
    params: Vec<ParamMeta>,
    values: Vec<Vec<f32>>,
}

fn decode<H: DeserializeOwned>(path: &Path, kind: &str) -> Result<Decoded<H>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Integrity {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("SHA-256 digest mismatch; file is corrupt or truncated"));
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let json = body.get(16..16 + hlen).ok_or_else(|| bad("header length exceeds file"))?;
    let header: Header<Value> = serde_json::from_slice(json).map_err(|e| bad(&format!("header: {e}")))?;
    if header.kind != kind {
        return Err(Error::ConfigMismatch(format!(
            "{} holds a `{}` checkpoint, expected `{kind}`",
            path.display(),
            header.kind
        )));
    }
    let mut rest = &body[16 + hlen..];
    let mut values = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        if rest.len() < 4 * n {
            return Err(bad("parameter block shorter than its manifest"));
        }
        let (chunk, tail) = rest.split_at(4 * n);
        values.push(chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect());
        rest = tail;
    }
    if !rest.is_empty() {
        return Err(bad("trailing bytes after parameter block"));
    }
    Ok(Decoded {
        meta: serde_json::from_value(header.meta).map_err(|e| bad(&format!("{kind} header: {e}")))?,
        params: header.params,
        values,
    })
}

/// Copies stored values into a freshly built store, checking that names,
/// groups and shapes line up one to one.
fn fill(store: &mut ParamStore<f32>, params: &[ParamMeta], values: Vec<Vec<f32>>) -> Result<()> {
    if store.params().len() != params.len() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint has {} parameter tensors, the configured model has {}",
            params.len(),
            store.params().len()
        )));
    }
    for ((p, meta), v) in store.params_mut().iter_mut().zip(params).zip(values) {
        if p.name != meta.name || p.shape != meta.shape || p.group != meta.group {
            return Err(Error::ConfigMismatch(format!(
                "parameter `{}` {:?} does not match stored `{}` {:?}",
                p.name, p.shape, meta.name, meta.shape
            )));
        }
        p.value = v;
    }
    Ok(())
}

/// Dotted paths whose values differ between two JSON documents.
pub fn json_diff(expected: &Value, found: &Value) -> Vec<String> {
    fn walk(path: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
                for k in keys {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    match (x.get(k), y.get(k)) {
                        (Some(u), Some(v)) => walk(&p, u, v, out),
                        (u, v) => out.push(format!("{p}: {} != {}", show(u), show(v))),
                    }
                }
            }
            _ if a != b => out.push(format!("{path}: {a} != {b}")),
            _ => {}
        }
    }
    fn show(v: Option<&Value>) -> String {
        v.map_or_else(|| "<absent>".to_string(), Value::to_string)
    }
    let mut out = Vec::new();
    walk("", expected, found, &mut out);
    out
}

fn check_config<C: Serialize>(path: &Path, expected: &C, found: &C) -> Result<()> {
    let diff = json_diff(&serde_json::to_value(expected)?, &serde_json::to_value(found)?);
    if diff.is_empty() {
        Ok(())
    } else {
        Err(Error::ConfigMismatch(format!(
            "{} was saved with a different configuration (configured != stored):\n  {}",
            path.display(),
            diff.join("\n  ")
        )))
    }
}

/// Everything a trained classifier needs to be reloaded and audited.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: NetworkConfig,
    pub schedule: TrainSchedule,
    pub task_mode: TaskMode,
    pub probmap_mode: ProbmapMode,
    pub epoch: usize,
    pub val_metrics: ValMetrics,
    pub selection_score: f64,
    pub loss_weights: LossWeights,
    pub data_fingerprint: String,
    pub seed: u64,
}

impl CheckpointMeta {
    /// Selection score recomputed from the stored validation metrics.
    pub fn recomputed_score(&self) -> f64 {
        self.val_metrics.selection_score(self.task_mode)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub meta: CheckpointMeta,
    pub store: ParamStore<f32>,
}

pub const CLASSIFIER_KIND: &str = "classifier";
pub const SEGMENTER_KIND: &str = "segmenter";

impl CheckpointRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &encode(CLASSIFIER_KIND, &self.meta, &self.store)?)
    }

    /// Loads and rebuilds the network. With `expected` set, any difference in
    /// the network configuration, including the manifestation count, is
    /// rejected with a key-level diff.
    pub fn load(path: &Path, expected: Option<&NetworkConfig>) -> Result<(Self, MultiTaskNet)> {
        let d: Decoded<CheckpointMeta> = decode(path, CLASSIFIER_KIND)?;
        if let Some(exp) = expected {
            if exp.k() != d.meta.config.k() {
                return Err(Error::ConfigMismatch(format!(
                    "{}: checkpoint has K = {} manifestations, configuration has K = {}",
                    path.display(),
                    d.meta.config.k(),
                    exp.k()
                )));
            }
            check_config(path, exp, &d.meta.config)?;
        }
        if (d.meta.recomputed_score() - d.meta.selection_score).abs() > 1e-12 {
            return Err(Error::Integrity {
                path: path.to_path_buf(),
                reason: "stored selection score disagrees with stored metrics".into(),
            });
        }
        let mut store = ParamStore::new();
        let net = MultiTaskNet::new(d.meta.config.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
        fill(&mut store, &d.params, d.values)?;
        Ok((CheckpointRecord { meta: d.meta, store }, net))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterMeta {
    pub config: SegmenterConfig,
    pub schedule: SegSchedule,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub data_fingerprint: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterCheckpoint {
    pub meta: SegmenterMeta,
    pub store: ParamStore<f32>,
}

impl SegmenterCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &encode(SEGMENTER_KIND, &self.meta, &self.store)?)
    }

    pub fn load(path: &Path, expected: Option<&SegmenterConfig>) -> Result<(Self, UNet3d)> {
        let d: Decoded<SegmenterMeta> = decode(path, SEGMENTER_KIND)?;
        if let Some(exp) = expected {
            check_config(path, exp, &d.meta.config)?;
        }
        let mut store = ParamStore::new();
        let net = UNet3d::new(d.meta.config.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
        fill(&mut store, &d.params, d.values)?;
        Ok((SegmenterCheckpoint { meta: d.meta, store }, net))
    }
}
