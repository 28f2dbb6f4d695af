//! Cohort manifest → model-ready patches.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::io::{read_patch, write_patch, VolumeReader};
use super::labels::{
    binarize_manifestations, consolidate_consensus, enroll, equivalent_diameter_mm, label_malignancy, BinarizeRule,
    EnrollDecision,
};
use super::manifest::{
    read_cohort_csv, read_prepared_manifest, write_prepared_manifest, AnnotationFile, CohortRow, PreparedRow,
};
use super::normalize::{normalize_intensity, NormalizeInfo};
use super::patch::extract_patch;
use super::record::{DiagnosisLabel, NoduleRecord, RaterAnnotation, Split};
use super::resample::{map_index, resample, resample_mask};
use crate::error::{Error, Result};
use crate::volume::{Mask, Spacing, VolumeGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    pub target_spacing: [f64; 3],
    pub lo_pct: f64,
    pub hi_pct: f64,
    pub patch_size: [usize; 3],
    pub consensus_fraction: f64,
    /// Per-manifestation ordinal thresholds; absent names use the 1–5 midpoint.
    #[serde(default)]
    pub binarize: BTreeMap<String, BinarizeRule>,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            target_spacing: [0.7, 0.7, 1.25],
            lo_pct: super::normalize::DEFAULT_LO_PCT,
            hi_pct: super::normalize::DEFAULT_HI_PCT,
            patch_size: super::patch::DEFAULT_PATCH,
            consensus_fraction: super::labels::DEFAULT_CONSENSUS_FRACTION,
            binarize: BTreeMap::new(),
        }
    }
}

/// Provenance sidecar written next to every patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSidecar {
    pub record_id: String,
    pub split: Split,
    pub diagnosis: DiagnosisLabel,
    pub manifestations: BTreeMap<String, u8>,
    pub diameter_mm: f64,
    pub source_spacing: [f64; 3],
    pub target_spacing: [f64; 3],
    pub center_voxel: [usize; 3],
    pub normalization: NormalizeInfo,
    pub patch_size: [usize; 3],
    pub rater_count: usize,
}

/// Result of preparing one record in memory.
#[derive(Debug, Clone)]
pub struct PreparedPatch {
    pub record: NoduleRecord,
    pub split: Split,
    pub patch: Array3<f32>,
    pub mask: Option<Array3<f32>>,
    pub sidecar: PatchSidecar,
}

impl PreparedPatch {
    /// The same record as it reads back from a prepared directory.
    pub fn to_sample(&self, names: &[String]) -> Result<PreparedSample> {
        Ok(PreparedSample {
            id: self.record.id.clone(),
            split: self.split,
            patch: self.patch.clone(),
            mask: self.mask.clone(),
            diagnosis: self
                .record
                .diagnosis_label
                .as_target()
                .ok_or_else(|| Error::invalid(format!("record `{}` is indeterminate", self.record.id)))?,
            manifestations: self.record.ordered_labels(names)?,
        })
    }
}

#[derive(Debug, Clone)]
pub enum PrepareOutcome {
    Prepared(Box<PreparedPatch>),
    Excluded { record_id: String, reason: String },
}

fn load_annotations(reader: &dyn VolumeReader, path: &Path) -> Result<Vec<RaterAnnotation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: AnnotationFile = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    file.raters
        .into_iter()
        .map(|r| {
            let mpath = if r.mask_path.is_absolute() { r.mask_path } else { base.join(r.mask_path) };
            Ok(RaterAnnotation {
                mask: reader.read_mask(&mpath)?,
                attribute_scores: r.attributes,
                malignancy_score: r.malignancy,
            })
        })
        .collect()
}

/// Assembles a [`NoduleRecord`] from a manifest row: consensus, labels and
/// diameter are derived from rater annotations when present.
pub fn build_record(
    row: &CohortRow,
    names: &[String],
    annotations: Vec<RaterAnnotation>,
    explicit_mask: Option<Mask>,
    volume: &VolumeGrid,
    cfg: &PrepareConfig,
) -> Result<NoduleRecord> {
    for a in &annotations {
        a.validate(volume.extents())?;
    }
    let consensus = if annotations.is_empty() {
        explicit_mask
    } else {
        let masks: Vec<&Mask> = annotations.iter().map(|a| &a.mask).collect();
        Some(consolidate_consensus(&masks, cfg.consensus_fraction)?)
    };
    let diagnosis = if annotations.is_empty() {
        row.diagnosis
            .ok_or_else(|| Error::invalid(format!("record `{}` has neither diagnosis nor annotations", row.record_id)))?
    } else {
        let scores: Vec<u8> = annotations.iter().map(|a| a.malignancy_score).collect();
        label_malignancy(&scores)?
    };
    let mut manifestation_labels = BTreeMap::new();
    let derived = if annotations.is_empty() {
        None
    } else {
        let per_rater: Vec<&BTreeMap<String, f64>> = annotations.iter().map(|a| &a.attribute_scores).collect();
        Some(binarize_manifestations(&per_rater, names, &cfg.binarize)?)
    };
    for (i, name) in names.iter().enumerate() {
        let v = match (row.manifestations.get(i).copied().flatten(), &derived) {
            (Some(v), _) => v,
            (None, Some(d)) => d[name],
            (None, None) => {
                return Err(Error::invalid(format!(
                    "record `{}` has no label for manifestation `{name}`",
                    row.record_id
                )))
            }
        };
        manifestation_labels.insert(name.clone(), v);
    }
    let diameter_mm = match (row.diameter_mm, &consensus) {
        (Some(d), _) => d,
        (None, Some(m)) => equivalent_diameter_mm(m, volume.spacing().voxel_volume()),
        (None, None) => {
            return Err(Error::invalid(format!(
                "record `{}` has no diameter and no mask to derive one",
                row.record_id
            )))
        }
    };
    let mut provenance = BTreeMap::new();
    provenance.insert("source_path".into(), row.source_path.display().to_string());
    Ok(NoduleRecord {
        id: row.record_id.clone(),
        center_voxel: row.center,
        diameter_mm,
        annotations,
        consensus_mask: consensus,
        diagnosis_label: diagnosis,
        manifestation_labels,
        provenance,
    })
}

/// Deterministic preprocessing of one record: resample, normalise, crop.
pub fn prepare_record(
    record: NoduleRecord,
    split: Split,
    volume: &VolumeGrid,
    cfg: &PrepareConfig,
) -> Result<PrepareOutcome> {
    // Rows without rater annotations are taken as enrolled upstream; only
    // the diameter and indeterminate rules apply to them.
    let decision = if record.annotations.is_empty() {
        if !(record.diameter_mm > super::labels::MIN_DIAMETER_MM) {
            EnrollDecision::Exclude(super::labels::ExcludeReason::Diameter)
        } else if record.diagnosis_label == DiagnosisLabel::Indeterminate {
            EnrollDecision::Exclude(super::labels::ExcludeReason::Indeterminate)
        } else {
            EnrollDecision::Include
        }
    } else {
        enroll(&record)
    };
    if let EnrollDecision::Exclude(reason) = decision {
        return Ok(PrepareOutcome::Excluded {
            record_id: record.id,
            reason: reason.as_str().to_string(),
        });
    }
    if !volume.contains(record.center_voxel) {
        return Err(Error::invalid(format!(
            "record `{}` center {:?} outside volume {:?}",
            record.id,
            record.center_voxel,
            volume.extents()
        )));
    }
    let target = Spacing(cfg.target_spacing);
    let resampled = resample(volume, target)?;
    let center = map_index(record.center_voxel, volume.spacing(), target, resampled.extents());
    let (normed, info) = normalize_intensity(&resampled, cfg.lo_pct, cfg.hi_pct)?;
    let patch = extract_patch(normed.voxels(), center, cfg.patch_size)?.mapv(|v| v as f32);
    let mask = match &record.consensus_mask {
        Some(m) => {
            crate::error::ensure_shape(&volume.extents(), m.shape())?;
            let rm = resample_mask(m, volume.spacing(), target)?;
            Some(extract_patch(&rm, center, cfg.patch_size)?.mapv(f32::from))
        }
        None => None,
    };
    let sidecar = PatchSidecar {
        record_id: record.id.clone(),
        split,
        diagnosis: record.diagnosis_label,
        manifestations: record.manifestation_labels.clone(),
        diameter_mm: record.diameter_mm,
        source_spacing: volume.spacing().0,
        target_spacing: cfg.target_spacing,
        center_voxel: center,
        normalization: info,
        patch_size: cfg.patch_size,
        rater_count: record.annotations.len(),
    };
    Ok(PrepareOutcome::Prepared(Box::new(PreparedPatch {
        record,
        split,
        patch,
        mask,
        sidecar,
    })))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrepareReport {
    pub prepared: usize,
    pub excluded: Vec<(String, String)>,
}

/// Writes prepared patches, masks and sidecars below `out_dir` and the
/// prepared manifest listing every enrolled record.
pub fn write_prepared(out_dir: &Path, names: &[String], prepared: &[PreparedPatch]) -> Result<()> {
    let patches = out_dir.join("patches");
    fs::create_dir_all(&patches).map_err(|e| Error::io(&patches, e))?;
    let mut rows = Vec::with_capacity(prepared.len());
    for p in prepared {
        let id = &p.record.id;
        let img_rel = PathBuf::from("patches").join(format!("{id}.img.bin"));
        write_patch(&out_dir.join(&img_rel), &p.patch)?;
        let mask_rel = match &p.mask {
            Some(m) => {
                let rel = PathBuf::from("patches").join(format!("{id}.mask.bin"));
                write_patch(&out_dir.join(&rel), m)?;
                Some(rel)
            }
            None => None,
        };
        let side = out_dir.join("patches").join(format!("{id}.json"));
        fs::write(&side, serde_json::to_string_pretty(&p.sidecar)?).map_err(|e| Error::io(&side, e))?;
        rows.push(PreparedRow {
            record_id: id.clone(),
            split: p.split,
            patch_path: img_rel,
            mask_path: mask_rel,
            diameter_mm: p.record.diameter_mm,
            diagnosis: p.record.diagnosis_label.as_target().expect("enrolled records are determinate"),
            manifestations: p.record.ordered_labels(names)?,
        });
    }
    write_prepared_manifest(out_dir, names, &rows)
}

/// Full ingest of a cohort CSV into `out_dir`.
pub fn prepare_cohort(
    cohort_csv: &Path,
    out_dir: &Path,
    reader: &dyn VolumeReader,
    cfg: &PrepareConfig,
) -> Result<PrepareReport> {
    let cohort = read_cohort_csv(cohort_csv)?;
    let names = &cohort.manifestation_names;
    let mut prepared = Vec::new();
    let mut report = PrepareReport::default();
    for row in &cohort.rows {
        let volume = reader.read_volume(&row.source_path)?;
        let annotations = match &row.annotations {
            Some(p) => load_annotations(reader, p)?,
            None => Vec::new(),
        };
        let explicit = match &row.mask_path {
            Some(p) => Some(reader.read_mask(p)?),
            None => None,
        };
        let record = build_record(row, names, annotations, explicit, &volume, cfg)?;
        match prepare_record(record, row.split, &volume, cfg)? {
            PrepareOutcome::Prepared(p) => prepared.push(*p),
            PrepareOutcome::Excluded { record_id, reason } => {
                log::info!("excluding `{record_id}`: {reason}");
                report.excluded.push((record_id, reason));
            }
        }
    }
    report.prepared = prepared.len();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_prepared(out_dir, names, &prepared)?;
    let rep = out_dir.join("enrollment.json");
    fs::write(&rep, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&rep, e))?;
    Ok(report)
}

/// A prepared record loaded back for training or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub split: Split,
    pub patch: Array3<f32>,
    pub mask: Option<Array3<f32>>,
    pub diagnosis: u8,
    pub manifestations: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCohort {
    pub manifestation_names: Vec<String>,
    pub samples: Vec<PreparedSample>,
}

impl PreparedCohort {
    pub fn split(&self, split: Split) -> Vec<&PreparedSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn patch_size(&self) -> Option<[usize; 3]> {
        self.samples.first().map(|s| crate::volume::extents_of(&s.patch))
    }
}

pub fn load_prepared(dir: &Path) -> Result<PreparedCohort> {
    let (names, rows) = read_prepared_manifest(dir)?;
    let mut samples = Vec::with_capacity(rows.len());
    for r in rows {
        samples.push(PreparedSample {
            patch: read_patch(&dir.join(&r.patch_path))?,
            mask: match &r.mask_path {
                Some(p) => Some(read_patch(&dir.join(p))?),
                None => None,
            },
            id: r.record_id,
            split: r.split,
            diagnosis: r.diagnosis,
            manifestations: r.manifestations,
        });
    }
    Ok(PreparedCohort {
        manifestation_names: names,
        samples,
    })
}
