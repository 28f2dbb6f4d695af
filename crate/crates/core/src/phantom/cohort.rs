//! Phantom cohorts: split assignment, in-memory preparation, and source
//! cohorts on disk that the regular ingest path reads back.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{balanced_specs, generate_phantom, manifestation_names, CohortSpec, PhantomGrid, PhantomSpec};
use crate::error::{Error, Result};
use crate::ingest::io::NiftiIo;
use crate::ingest::manifest::{write_cohort_csv, AnnotationFile, CohortCsv, CohortRow, RaterEntry};
use crate::ingest::prepare::{prepare_record, PrepareConfig, PrepareOutcome, PreparedPatch};
use crate::ingest::record::Split;
use crate::volume::Spacing;

pub const DESK_PATCH: [usize; 3] = [16, 16, 16];
const DESK_EXTENT: usize = 24;
const DESK_SPACING_MM: f64 = 1.25;

impl PhantomGrid {
    /// 24³ voxels at 1.25 mm, matching [`desk_prepare_config`].
    pub fn desk() -> Self {
        PhantomGrid {
            extents: [DESK_EXTENT; 3],
            spacing: Spacing([DESK_SPACING_MM; 3]),
        }
    }
}

impl Default for PhantomGrid {
    fn default() -> Self {
        PhantomGrid::desk()
    }
}

/// Preprocessing for desk-grid phantoms: isotropic 1.25 mm, 16³ patches.
pub fn desk_prepare_config() -> PrepareConfig {
    PrepareConfig {
        target_spacing: [DESK_SPACING_MM; 3],
        patch_size: DESK_PATCH,
        ..PrepareConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomCohortConfig {
    pub cohort: CohortSpec,
    pub grid: PhantomGrid,
    /// Train, validation and test fractions.
    pub split_fractions: [f64; 3],
}

impl Default for PhantomCohortConfig {
    fn default() -> Self {
        PhantomCohortConfig {
            cohort: CohortSpec {
                radius_mm: [2.8, 3.6],
                ..CohortSpec::default()
            },
            grid: PhantomGrid::desk(),
            split_fractions: [0.6, 0.2, 0.2],
        }
    }
}

impl PhantomCohortConfig {
    pub fn specs(&self) -> Vec<PhantomSpec> {
        balanced_specs(&self.cohort)
    }

    pub fn splits(&self) -> Result<Vec<Split>> {
        assign_splits(self.cohort.count, self.split_fractions, self.cohort.seed)
    }
}

/// Shuffled split labels with `round(f·n)` validation and test records and
/// the remainder in training.
pub fn assign_splits(n: usize, fractions: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let n_val = (fractions[1] * n as f64).round() as usize;
    let n_test = (fractions[2] * n as f64).round() as usize;
    if n_val + n_test >= n {
        return Err(Error::Config(format!("{n} records leave no training split at fractions {fractions:?}")));
    }
    let mut out: Vec<Split> = (0..n)
        .map(|i| match i {
            i if i < n_val => Split::Validation,
            i if i < n_val + n_test => Split::Test,
            _ => Split::Train,
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    out.shuffle(&mut rng);
    Ok(out)
}

/// Generates and preprocesses phantoms without touching the disk.
pub fn prepare_phantoms(specs: &[PhantomSpec], splits: &[Split], grid: &PhantomGrid, cfg: &PrepareConfig) -> Result<Vec<PreparedPatch>> {
    crate::error::ensure_shape(&[specs.len()], &[splits.len()])?;
    let mut out = Vec::with_capacity(specs.len());
    for (spec, &split) in specs.iter().zip(splits) {
        let ph = generate_phantom(spec, grid)?;
        match prepare_record(ph.record, split, &ph.volume, cfg)? {
            PrepareOutcome::Prepared(p) => out.push(*p),
            PrepareOutcome::Excluded { record_id, reason } => log::warn!("phantom `{record_id}` excluded: {reason}"),
        }
    }
    Ok(out)
}

/// Writes a source cohort below `dir`: NIfTI volumes, one rater-mask file per
/// phantom, rater annotation JSON and `cohort.csv`. Returns the CSV path.
pub fn write_phantom_cohort(dir: &Path, specs: &[PhantomSpec], splits: &[Split], grid: &PhantomGrid) -> Result<PathBuf> {
    crate::error::ensure_shape(&[specs.len()], &[splits.len()])?;
    let names = manifestation_names();
    for sub in ["volumes", "annotations"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let io = NiftiIo;
    let mut rows = Vec::with_capacity(specs.len());
    for (spec, &split) in specs.iter().zip(splits) {
        let ph = generate_phantom(spec, grid)?;
        let id = ph.record.id.clone();
        let vol_rel = PathBuf::from("volumes").join(format!("{id}.nii.gz"));
        io.write_volume(&dir.join(&vol_rel), &ph.volume)?;
        let mask_name = format!("{id}.mask.nii.gz");
        io.write_mask(&dir.join("annotations").join(&mask_name), &ph.mask, grid.spacing, [0.0; 3])?;
        let ann = AnnotationFile {
            raters: ph
                .record
                .annotations
                .iter()
                .map(|a| RaterEntry {
                    mask_path: PathBuf::from(&mask_name),
                    malignancy: a.malignancy_score,
                    attributes: a.attribute_scores.clone(),
                })
                .collect(),
        };
        let ann_rel = PathBuf::from("annotations").join(format!("{id}.json"));
        let ann_path = dir.join(&ann_rel);
        fs::write(&ann_path, serde_json::to_string_pretty(&ann)?).map_err(|e| Error::io(&ann_path, e))?;
        rows.push(CohortRow {
            record_id: id,
            source_path: vol_rel,
            center: ph.record.center_voxel,
            diameter_mm: Some(ph.record.diameter_mm),
            split,
            manifestations: vec![None; names.len()],
            diagnosis: None,
            mask_path: None,
            annotations: Some(ann_rel),
        });
    }
    let specs_path = dir.join("phantoms.json");
    fs::write(&specs_path, serde_json::to_string_pretty(specs)?).map_err(|e| Error::io(&specs_path, e))?;
    let csv = dir.join("cohort.csv");
    write_cohort_csv(
        &csv,
        &CohortCsv {
            manifestation_names: names,
            rows,
        },
    )?;
    Ok(csv)
}

/// Specs and splits for a cohort config, in record order.
pub fn cohort_plan(cfg: &PhantomCohortConfig) -> Result<(Vec<PhantomSpec>, Vec<Split>)> {
    Ok((cfg.specs(), cfg.splits()?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::prepare::{load_prepared, prepare_cohort};

    #[test]
    fn split_counts_are_exact() {
        let s = assign_splits(20, [0.6, 0.2, 0.2], 4).unwrap();
        let count = |k| s.iter().filter(|&&x| x == k).count();
        assert_eq!((count(Split::Train), count(Split::Validation), count(Split::Test)), (12, 4, 4));
        assert_eq!(s, assign_splits(20, [0.6, 0.2, 0.2], 4).unwrap());
        assert!(assign_splits(2, [0.0, 0.5, 0.5], 0).is_err());
        assert!(assign_splits(10, [0.5, 0.2, 0.2], 0).is_err());
    }

    #[test]
    fn disk_cohort_round_trips_through_ingest() {
        let cfg = PhantomCohortConfig {
            cohort: CohortSpec {
                count: 5,
                seed: 11,
                ..PhantomCohortConfig::default().cohort
            },
            split_fractions: [0.6, 0.2, 0.2],
            ..PhantomCohortConfig::default()
        };
        let (specs, splits) = cohort_plan(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let csv = write_phantom_cohort(&dir.path().join("src"), &specs, &splits, &cfg.grid).unwrap();
        let out = dir.path().join("prepared");
        let report = prepare_cohort(&csv, &out, &NiftiIo, &desk_prepare_config()).unwrap();
        assert_eq!(report.prepared, 5);
        let loaded = load_prepared(&out).unwrap();
        let mem = prepare_phantoms(&specs, &splits, &cfg.grid, &desk_prepare_config()).unwrap();
        assert_eq!(loaded.manifestation_names, manifestation_names());
        for (disk, m) in loaded.samples.iter().zip(&mem) {
            assert_eq!(disk.id, m.record.id);
            assert_eq!(disk.split, m.split);
            assert_eq!(disk.manifestations, m.record.ordered_labels(&loaded.manifestation_names).unwrap());
            assert_eq!(disk.mask, m.mask);
            assert_eq!(disk.patch.shape(), &DESK_PATCH);
            let max_diff = disk.patch.iter().zip(m.patch.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            assert!(max_diff < 1e-4, "{max_diff}");
        }
    }

    #[test]
    fn desk_patches_keep_calcification_above_soft_tissue() {
        let cfg = PhantomCohortConfig::default();
        let (specs, splits) = cohort_plan(&cfg).unwrap();
        let prepared = prepare_phantoms(&specs, &splits, &cfg.grid, &desk_prepare_config()).unwrap();
        for (spec, p) in specs.iter().zip(&prepared) {
            let m = p.mask.as_ref().unwrap();
            let inside = m.iter().filter(|&&v| v > 0.5).count() as f64;
            assert!(inside / m.len() as f64 <= 0.05, "mask fraction {}", inside / m.len() as f64);
            if spec.calcified {
                let peak = p.patch.iter().cloned().fold(f32::MIN, f32::max);
                assert!(peak > 0.8 && peak < 1.0, "calcified peak {peak}");
            } else if spec.texture == super::super::Texture::Solid {
                let peak = p.patch.iter().zip(m.iter()).filter(|(_, &v)| v > 0.5).map(|(&x, _)| x).fold(f32::MIN, f32::max);
                assert!(peak < 0.65, "solid peak {peak}");
            }
        }
    }
}
