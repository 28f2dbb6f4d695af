use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosisLabel {
    Negative,
    Positive,
    Indeterminate,
}

impl DiagnosisLabel {
    /// Binary target; `None` for indeterminate nodules.
    pub fn as_target(self) -> Option<u8> {
        match self {
            DiagnosisLabel::Negative => Some(0),
            DiagnosisLabel::Positive => Some(1),
            DiagnosisLabel::Indeterminate => None,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "0" | "negative" | "benign" => Ok(DiagnosisLabel::Negative),
            "1" | "positive" | "malignant" => Ok(DiagnosisLabel::Positive),
            "indeterminate" => Ok(DiagnosisLabel::Indeterminate),
            other => Err(Error::invalid(format!("unknown diagnosis label `{other}`"))),
        }
    }
}

impl fmt::Display for DiagnosisLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DiagnosisLabel::Negative => "negative",
            DiagnosisLabel::Positive => "positive",
            DiagnosisLabel::Indeterminate => "indeterminate",
        })
    }
}

/// One rater's reading of a nodule.
#[derive(Debug, Clone, PartialEq)]
pub struct RaterAnnotation {
    pub mask: Mask,
    pub attribute_scores: BTreeMap<String, f64>,
    pub malignancy_score: u8,
}

impl RaterAnnotation {
    pub fn validate(&self, extents: [usize; 3]) -> Result<()> {
        if !(1..=5).contains(&self.malignancy_score) {
            return Err(Error::invalid(format!(
                "malignancy score {} outside 1..=5",
                self.malignancy_score
            )));
        }
        crate::error::ensure_shape(&extents, self.mask.shape())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoduleRecord {
    pub id: String,
    pub center_voxel: [usize; 3],
    pub diameter_mm: f64,
    pub annotations: Vec<RaterAnnotation>,
    pub consensus_mask: Option<Mask>,
    pub diagnosis_label: DiagnosisLabel,
    pub manifestation_labels: BTreeMap<String, u8>,
    pub provenance: BTreeMap<String, String>,
}

impl NoduleRecord {
    /// Labels ordered by `names`; errors if any name is missing.
    pub fn ordered_labels(&self, names: &[String]) -> Result<Vec<u8>> {
        if self.manifestation_labels.len() != names.len() {
            return Err(Error::invalid(format!(
                "record `{}` has {} manifestation labels, cohort declares {}",
                self.id,
                self.manifestation_labels.len(),
                names.len()
            )));
        }
        names
            .iter()
            .map(|n| {
                self.manifestation_labels.get(n).copied().ok_or_else(|| {
                    Error::invalid(format!("record `{}` lacks manifestation `{n}`", self.id))
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// Enrolled records plus their split assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortManifest {
    pub records: Vec<String>,
    pub split: BTreeMap<String, Split>,
    pub manifestation_names: Vec<String>,
}

impl CohortManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for id in &self.records {
            if !seen.insert(id) {
                return Err(Error::invalid(format!("record `{id}` listed twice")));
            }
            if !self.split.contains_key(id) {
                return Err(Error::invalid(format!("record `{id}` has no split")));
            }
        }
        if self.split.len() != self.records.len() {
            return Err(Error::invalid("split assigns records that are not enrolled"));
        }
        let mut names = std::collections::BTreeSet::new();
        if !self.manifestation_names.iter().all(|n| names.insert(n)) {
            return Err(Error::invalid("duplicate manifestation name"));
        }
        Ok(())
    }

    pub fn ids_in(&self, split: Split) -> Vec<&str> {
        self.records
            .iter()
            .filter(|id| self.split.get(*id) == Some(&split))
            .map(String::as_str)
            .collect()
    }
}
