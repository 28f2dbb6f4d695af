use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::ingest::normalize::percentile_sorted;
use crate::volume::{extents_of, Mask};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_N_BOOT: usize = 2000;
pub const DEFAULT_ALPHA: f64 = 0.05;

fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid(format!("labels must be 0 or 1, found {bad}")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Mann–Whitney AUC via midranks; ties count one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    ensure_shape(&[scores.len()], &[labels.len()])?;
    let (n_pos, n_neg) = class_counts(labels)?;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid(format!(
            "AUC needs both classes (positives {n_pos}, negatives {n_neg})"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score passed to roc_auc".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives, so that midranks stay integral.
    let mut rank2_pos: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share midrank (i + j + 2) / 2
        let mid2 = (i + j + 2) as u128;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        rank2_pos += mid2 * pos_in_tie;
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    let u2 = rank2_pos - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub acc: f64,
    pub sen: f64,
    pub prec: f64,
    pub f1: f64,
    /// Set when nothing was predicted positive; `prec` is then reported as 0.
    pub prec_undefined: bool,
    pub counts: ConfusionCounts,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl ConfusionMetrics {
    pub fn from_counts(c: ConfusionCounts) -> Self {
        let n = c.tp + c.fp + c.tn + c.fn_;
        let sen = ratio(c.tp, c.tp + c.fn_);
        let prec = ratio(c.tp, c.tp + c.fp);
        let f1 = if sen + prec > 0.0 { 2.0 * prec * sen / (prec + sen) } else { 0.0 };
        ConfusionMetrics {
            acc: ratio(c.tp + c.tn, n),
            sen,
            prec,
            f1,
            prec_undefined: c.tp + c.fp == 0,
            counts: c,
        }
    }
}

/// A score at or above `threshold` is a positive prediction.
pub fn confusion_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionMetrics> {
    ensure_shape(&[scores.len()], &[labels.len()])?;
    if scores.is_empty() {
        return Err(Error::invalid("confusion metrics need at least one sample"));
    }
    class_counts(labels)?;
    let mut c = ConfusionCounts { tp: 0, fp: 0, tn: 0, fn_: 0 };
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(ConfusionMetrics::from_counts(c))
}

/// Stratified percentile bootstrap of the AUC. Replicate `r` draws from its
/// own ChaCha stream, so results do not depend on evaluation order.
pub fn bootstrap_ci(scores: &[f64], labels: &[u8], n_boot: usize, alpha: f64, seed: u64) -> Result<(f64, f64)> {
    roc_auc(scores, labels)?;
    if n_boot == 0 || !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("bootstrap needs n_boot > 0 and alpha in (0, 1)"));
    }
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 0).map(|(&s, _)| s).collect();
    let mut resampled_labels = vec![1u8; pos.len()];
    resampled_labels.resize(pos.len() + neg.len(), 0);
    let mut aucs = Vec::with_capacity(n_boot);
    let mut buf = Vec::with_capacity(labels.len());
    for r in 0..n_boot {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        buf.clear();
        buf.extend((0..pos.len()).map(|_| pos[rng.random_range(0..pos.len())]));
        buf.extend((0..neg.len()).map(|_| neg[rng.random_range(0..neg.len())]));
        aucs.push(roc_auc(&buf, &resampled_labels)?);
    }
    aucs.sort_by(f64::total_cmp);
    Ok((
        percentile_sorted(&aucs, 100.0 * alpha / 2.0),
        percentile_sorted(&aucs, 100.0 * (1.0 - alpha / 2.0)),
    ))
}

/// `2|A∩B| / (|A| + |B|)` over nonzero voxels; two empty masks score 1.
pub fn dice_flat(pred: &[u8], truth: &[u8]) -> Result<f64> {
    ensure_shape(&[truth.len()], &[pred.len()])?;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        let (p, t) = (p != 0, t != 0);
        a += usize::from(p);
        b += usize::from(t);
        inter += usize::from(p && t);
    }
    Ok(if a + b == 0 { 1.0 } else { 2.0 * inter as f64 / (a + b) as f64 })
}

pub fn dice_metric(pred: &Mask, truth: &Mask) -> Result<f64> {
    ensure_shape(&extents_of(truth), &extents_of(pred))?;
    dice_flat(
        &pred.as_standard_layout().iter().copied().collect::<Vec<_>>(),
        &truth.as_standard_layout().iter().copied().collect::<Vec<_>>(),
    )
}
