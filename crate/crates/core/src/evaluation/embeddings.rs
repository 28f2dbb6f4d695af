use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::network::{Head, Mode, MultiTaskNet};
use crate::nn::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub record_id: String,
    pub label: u8,
    pub features: Vec<f64>,
}

/// Diagnosis-head fused vectors (the input of its final linear layer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub feature_len: usize,
    pub rows: Vec<EmbeddingRow>,
}

impl EmbeddingTable {
    /// Columns: `record_id, label, f0 .. f{n-1}`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
        let mut header = vec!["record_id".to_string(), "label".to_string()];
        header.extend((0..self.feature_len).map(|i| format!("f{i}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.record_id.clone(), r.label.to_string()];
            rec.extend(r.features.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn export_embeddings(net: &MultiTaskNet, store: &ParamStore<f32>, data: &Dataset, batch: usize) -> Result<EmbeddingTable> {
    let mut rows = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, p) = data.batch(chunk);
        let (out, _) = net.forward(store, &x, &p, &Mode::eval())?;
        for (b, &i) in chunk.iter().enumerate() {
            rows.push(EmbeddingRow {
                record_id: data.samples[i].id.clone(),
                label: data.samples[i].diagnosis,
                features: out.fused(Head::Diagnosis, b).iter().map(|&v| v as f64).collect(),
            });
        }
    }
    Ok(EmbeddingTable {
        feature_len: net.config.bottom_channels,
        rows,
    })
}
