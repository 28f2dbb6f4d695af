//! In-memory classifier samples and batch assembly.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::ingest::PreparedSample;
use crate::nn::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierSample {
    pub id: String,
    /// Normalised patch, row-major over the patch extents.
    pub patch: Vec<f32>,
    /// Segmentation probability map on the same grid.
    pub probmap: Vec<f32>,
    pub diagnosis: u8,
    pub manifestations: Vec<u8>,
}

impl ClassifierSample {
    pub fn from_prepared(s: &PreparedSample, probmap: Vec<f32>) -> Self {
        ClassifierSample {
            id: s.id.clone(),
            patch: s.patch.iter().copied().collect(),
            probmap,
            diagnosis: s.diagnosis,
            manifestations: s.manifestations.clone(),
        }
    }
}

/// Source of the map fed to the anatomical branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbmapMode {
    #[default]
    Segmenter,
    /// Ablation: every voxel is 1.
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub extents: [usize; 3],
    pub manifestation_names: Vec<String>,
    pub samples: Vec<ClassifierSample>,
}

impl Dataset {
    pub fn new(extents: [usize; 3], manifestation_names: Vec<String>, samples: Vec<ClassifierSample>) -> Result<Self> {
        let v: usize = extents.iter().product();
        let k = manifestation_names.len();
        for s in &samples {
            ensure_shape(&[v, v, k], &[s.patch.len(), s.probmap.len(), s.manifestations.len()])?;
            if s.diagnosis > 1 || s.manifestations.iter().any(|&m| m > 1) {
                return Err(Error::invalid(format!("sample {}: labels must be 0 or 1", s.id)));
            }
        }
        Ok(Dataset {
            extents,
            manifestation_names,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn with_probmap_mode(mut self, mode: ProbmapMode) -> Self {
        if mode == ProbmapMode::Ones {
            for s in &mut self.samples {
                s.probmap.fill(1.0);
            }
        }
        self
    }

    /// `(patches, probmaps)` tensors of shape `len(indices) × 1 × extents`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Tensor<f32>) {
        let [d, h, w] = self.extents;
        let shape = [indices.len(), 1, d, h, w];
        let mut x = Vec::with_capacity(indices.len() * d * h * w);
        let mut p = Vec::with_capacity(x.capacity());
        for &i in indices {
            x.extend_from_slice(&self.samples[i].patch);
            p.extend_from_slice(&self.samples[i].probmap);
        }
        (
            Tensor::from_vec(shape, x).expect("validated lengths"),
            Tensor::from_vec(shape, p).expect("validated lengths"),
        )
    }

    /// SHA-256 over ids, labels, patches and probability maps, in order.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for n in &self.manifestation_names {
            h.update(n.as_bytes());
            h.update([0]);
        }
        for s in &self.samples {
            h.update(s.id.as_bytes());
            h.update([0, s.diagnosis]);
            h.update(&s.manifestations);
            for v in s.patch.iter().chain(&s.probmap) {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn diagnosis_labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.diagnosis).collect()
    }

    pub fn manifestation_labels(&self, m: usize) -> Vec<u8> {
        self.samples.iter().map(|s| s.manifestations[m]).collect()
    }
}
