use std::collections::BTreeMap;

use ndarray::Array3;

use super::record::{DiagnosisLabel, NoduleRecord};
use crate::error::{Error, Result};
use crate::volume::Mask;

pub const DEFAULT_CONSENSUS_FRACTION: f64 = 0.5;

/// Voxelwise agreement merge: a voxel is kept when at least
/// `threshold_fraction` of the masks mark it.
pub fn consolidate_consensus(masks: &[&Mask], threshold_fraction: f64) -> Result<Mask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::invalid("consensus needs at least one mask"))?;
    if !(threshold_fraction > 0.0 && threshold_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "threshold fraction {threshold_fraction} outside (0, 1]"
        )));
    }
    for m in &masks[1..] {
        crate::error::ensure_shape(first.shape(), m.shape())?;
    }
    let mut counts: Array3<u32> = Array3::zeros(first.raw_dim());
    for m in masks {
        ndarray::Zip::from(&mut counts)
            .and(*m)
            .for_each(|c, &v| *c += u32::from(v != 0));
    }
    let n = masks.len() as f64;
    // Compare counts, not fractions, so 2/4 against 0.5 is exact.
    let needed = (threshold_fraction * n - 1e-9).ceil().max(1.0) as u32;
    Ok(counts.mapv(|c| u8::from(c >= needed)))
}

/// Mean of ordinal malignancy scores: above 3 positive, exactly 3 indeterminate.
pub fn label_malignancy(scores: &[u8]) -> Result<DiagnosisLabel> {
    if scores.is_empty() {
        return Err(Error::invalid("malignancy labelling needs at least one score"));
    }
    if let Some(bad) = scores.iter().find(|s| !(1..=5).contains(*s)) {
        return Err(Error::invalid(format!("malignancy score {bad} outside 1..=5")));
    }
    // Integer comparison of the sum against 3n avoids float ties.
    let sum: u32 = scores.iter().map(|&s| u32::from(s)).sum();
    let pivot = 3 * scores.len() as u32;
    Ok(match sum.cmp(&pivot) {
        std::cmp::Ordering::Greater => DiagnosisLabel::Positive,
        std::cmp::Ordering::Equal => DiagnosisLabel::Indeterminate,
        std::cmp::Ordering::Less => DiagnosisLabel::Negative,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExcludeReason {
    Diameter,
    TooFewRaters,
    Indeterminate,
}

impl ExcludeReason {
    pub fn as_str(self) -> &'static str {
        match self {
            ExcludeReason::Diameter => "diameter",
            ExcludeReason::TooFewRaters => "too_few_raters",
            ExcludeReason::Indeterminate => "indeterminate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnrollDecision {
    Include,
    Exclude(ExcludeReason),
}

pub const MIN_DIAMETER_MM: f64 = 3.0;
pub const MIN_RATERS: usize = 2;

/// Cohort enrollment; the first failing criterion is reported.
pub fn enroll(record: &NoduleRecord) -> EnrollDecision {
    if !(record.diameter_mm > MIN_DIAMETER_MM) {
        EnrollDecision::Exclude(ExcludeReason::Diameter)
    } else if record.annotations.len() < MIN_RATERS {
        EnrollDecision::Exclude(ExcludeReason::TooFewRaters)
    } else if record.diagnosis_label == DiagnosisLabel::Indeterminate {
        EnrollDecision::Exclude(ExcludeReason::Indeterminate)
    } else {
        EnrollDecision::Include
    }
}

/// Equivalent-sphere diameter `2·(3V/4π)^(1/3)` of a mask.
pub fn equivalent_diameter_mm(mask: &Mask, voxel_volume_mm3: f64) -> f64 {
    let count = mask.iter().filter(|&&v| v != 0).count() as f64;
    let v = count * voxel_volume_mm3;
    2.0 * (3.0 * v / (4.0 * std::f64::consts::PI)).cbrt()
}

/// Ordinal-to-binary rule for one manifestation: the mean rater score must
/// exceed `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BinarizeRule {
    pub threshold: f64,
}

impl Default for BinarizeRule {
    /// Midpoint of the usual 1–5 scale.
    fn default() -> Self {
        BinarizeRule { threshold: 3.0 }
    }
}

/// Binarises mean rater attribute scores per manifestation.
pub fn binarize_manifestations(
    per_rater: &[&BTreeMap<String, f64>],
    names: &[String],
    rules: &BTreeMap<String, BinarizeRule>,
) -> Result<BTreeMap<String, u8>> {
    let mut out = BTreeMap::new();
    for name in names {
        let scores: Vec<f64> = per_rater.iter().filter_map(|m| m.get(name).copied()).collect();
        if scores.is_empty() {
            return Err(Error::invalid(format!("no rater scored manifestation `{name}`")));
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        let rule = rules.get(name).copied().unwrap_or_default();
        out.insert(name.clone(), u8::from(mean > rule.threshold));
    }
    Ok(out)
}
