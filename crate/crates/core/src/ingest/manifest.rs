//! Cohort CSV manifests and the prepared-patch manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::record::{DiagnosisLabel, Split};
use crate::error::{Error, Result};

const ID: &str = "record_id";
const SOURCE: &str = "source_path";
const CENTER: [&str; 3] = ["center_i", "center_j", "center_k"];
const DIAMETER: &str = "diameter_mm";
const SPLIT: &str = "split";
const DIAGNOSIS: &str = "diagnosis";
const MASK: &str = "mask_path";
const ANNOTATIONS: &str = "annotations";

const RESERVED: [&str; 10] = [
    ID, SOURCE, CENTER[0], CENTER[1], CENTER[2], DIAMETER, SPLIT, DIAGNOSIS, MASK, ANNOTATIONS,
];

/// One row of a source cohort manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortRow {
    pub record_id: String,
    pub source_path: PathBuf,
    pub center: [usize; 3],
    pub diameter_mm: Option<f64>,
    pub split: Split,
    /// Per-manifestation labels, `None` when left blank (derived from annotations).
    pub manifestations: Vec<Option<u8>>,
    pub diagnosis: Option<DiagnosisLabel>,
    pub mask_path: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortCsv {
    pub manifestation_names: Vec<String>,
    pub rows: Vec<CohortRow>,
}

fn opt(s: &str) -> Option<&str> {
    let t = s.trim();
    (!t.is_empty()).then_some(t)
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

/// Reads a cohort CSV. Every column that is not a reserved name is a
/// manifestation label column, in header order.
pub fn read_cohort_csv(path: &Path) -> Result<CohortCsv> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let req = |name: &str| {
        col(name).ok_or_else(|| Error::invalid(format!("{}: missing column `{name}`", path.display())))
    };
    let id_c = req(ID)?;
    let src_c = req(SOURCE)?;
    let center_c = [req(CENTER[0])?, req(CENTER[1])?, req(CENTER[2])?];
    let split_c = req(SPLIT)?;
    let diam_c = col(DIAMETER);
    let diag_c = col(DIAGNOSIS);
    let mask_c = col(MASK);
    let ann_c = col(ANNOTATIONS);
    let manif: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !RESERVED.contains(&h.trim()))
        .map(|(i, h)| (i, h.trim().to_string()))
        .collect();

    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let ctx = |msg: String| Error::invalid(format!("{} row {}: {msg}", path.display(), line + 2));
        let field = |i: usize| rec.get(i).unwrap_or("");
        let parse_idx = |i: usize| {
            field(i)
                .trim()
                .parse::<usize>()
                .map_err(|e| ctx(format!("bad center `{}`: {e}", field(i))))
        };
        let center = [parse_idx(center_c[0])?, parse_idx(center_c[1])?, parse_idx(center_c[2])?];
        let diameter_mm = match diam_c.and_then(|c| opt(field(c))) {
            Some(s) => Some(s.parse::<f64>().map_err(|e| ctx(format!("bad diameter `{s}`: {e}")))?),
            None => None,
        };
        let mut manifestations = Vec::with_capacity(manif.len());
        for (c, name) in &manif {
            manifestations.push(match opt(field(*c)) {
                None => None,
                Some("0") => Some(0),
                Some("1") => Some(1),
                Some(other) => return Err(ctx(format!("manifestation `{name}` must be 0/1, got `{other}`"))),
            });
        }
        let diagnosis = match diag_c.and_then(|c| opt(field(c))) {
            Some(s) => Some(DiagnosisLabel::parse(s).map_err(|e| ctx(e.to_string()))?),
            None => None,
        };
        rows.push(CohortRow {
            record_id: field(id_c).trim().to_string(),
            source_path: resolve(base, field(src_c).trim()),
            center,
            diameter_mm,
            split: Split::parse(field(split_c)).map_err(|e| ctx(e.to_string()))?,
            manifestations,
            diagnosis,
            mask_path: mask_c.and_then(|c| opt(field(c))).map(|p| resolve(base, p)),
            annotations: ann_c.and_then(|c| opt(field(c))).map(|p| resolve(base, p)),
        });
    }
    Ok(CohortCsv {
        manifestation_names: manif.into_iter().map(|(_, n)| n).collect(),
        rows,
    })
}

/// Writes a cohort CSV; paths are written as given.
pub fn write_cohort_csv(path: &Path, cohort: &CohortCsv) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = [ID, SOURCE, CENTER[0], CENTER[1], CENTER[2], DIAMETER, SPLIT, MASK, ANNOTATIONS]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(cohort.manifestation_names.iter().cloned());
    header.push(DIAGNOSIS.into());
    w.write_record(&header)?;
    for r in &cohort.rows {
        let mut rec = vec![
            r.record_id.clone(),
            r.source_path.display().to_string(),
            r.center[0].to_string(),
            r.center[1].to_string(),
            r.center[2].to_string(),
            r.diameter_mm.map(|d| d.to_string()).unwrap_or_default(),
            r.split.as_str().to_string(),
            r.mask_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            r.annotations.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        ];
        rec.extend(r.manifestations.iter().map(|m| m.map(|v| v.to_string()).unwrap_or_default()));
        rec.push(r.diagnosis.map(|d| d.to_string()).unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Rater annotation file referenced from the `annotations` column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub raters: Vec<RaterEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RaterEntry {
    pub mask_path: PathBuf,
    pub malignancy: u8,
    #[serde(default)]
    pub attributes: BTreeMap<String, f64>,
}

/// One prepared, model-ready record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedRow {
    pub record_id: String,
    pub split: Split,
    pub patch_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub diameter_mm: f64,
    pub diagnosis: u8,
    pub manifestations: Vec<u8>,
}

pub const PREPARED_MANIFEST: &str = "prepared.csv";

pub fn write_prepared_manifest(dir: &Path, names: &[String], rows: &[PreparedRow]) -> Result<()> {
    let path = dir.join(PREPARED_MANIFEST);
    let mut w = csv::Writer::from_path(&path)?;
    let mut header: Vec<String> = vec![ID.into(), SPLIT.into(), "patch_path".into(), MASK.into(), DIAMETER.into()];
    header.extend(names.iter().cloned());
    header.push(DIAGNOSIS.into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.record_id.clone(),
            r.split.as_str().to_string(),
            r.patch_path.display().to_string(),
            r.mask_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            format!("{}", r.diameter_mm),
        ];
        rec.extend(r.manifestations.iter().map(|v| v.to_string()));
        rec.push(r.diagnosis.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn read_prepared_manifest(dir: &Path) -> Result<(Vec<String>, Vec<PreparedRow>)> {
    let path = dir.join(PREPARED_MANIFEST);
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path,
            hint: "run `prepare` or `phantom-generate` first".into(),
        });
    }
    let mut rdr = csv::Reader::from_path(&path)?;
    let headers = rdr.headers()?.clone();
    let n = headers.len();
    if n < 6 || &headers[0] != ID || &headers[n - 1] != DIAGNOSIS {
        return Err(Error::invalid(format!("{}: unexpected header", path.display())));
    }
    let names: Vec<String> = headers.iter().skip(5).take(n - 6).map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let bit = |s: &str| -> Result<u8> {
            match s.trim() {
                "0" => Ok(0),
                "1" => Ok(1),
                o => Err(Error::invalid(format!("expected 0/1, got `{o}`"))),
            }
        };
        rows.push(PreparedRow {
            record_id: rec[0].to_string(),
            split: Split::parse(&rec[1])?,
            patch_path: PathBuf::from(&rec[2]),
            mask_path: opt(&rec[3]).map(PathBuf::from),
            diameter_mm: rec[4]
                .trim()
                .parse()
                .map_err(|e| Error::invalid(format!("bad diameter: {e}")))?,
            manifestations: (5..n - 1).map(|i| bit(&rec[i])).collect::<Result<_>>()?,
            diagnosis: bit(&rec[n - 1])?,
        });
    }
    Ok((names, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cohort_csv_roundtrip_and_dynamic_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cohort.csv");
        std::fs::write(
            &path,
            "record_id,source_path,center_i,center_j,center_k,diameter_mm,split,margin,texture,diagnosis\n\
             a,vol/a.nii,10,11,12,5.5,train,1,0,positive\n\
             b,/abs/b.nii,1,2,3,,test,,,\n",
        )
        .unwrap();
        let c = read_cohort_csv(&path).unwrap();
        assert_eq!(c.manifestation_names, vec!["margin", "texture"]);
        assert_eq!(c.rows[0].source_path, dir.path().join("vol/a.nii"));
        assert_eq!(c.rows[0].manifestations, vec![Some(1), Some(0)]);
        assert_eq!(c.rows[0].diagnosis, Some(DiagnosisLabel::Positive));
        assert_eq!(c.rows[1].source_path, PathBuf::from("/abs/b.nii"));
        assert_eq!(c.rows[1].diameter_mm, None);
        assert_eq!(c.rows[1].manifestations, vec![None, None]);
        assert_eq!(c.rows[1].split, Split::Test);

        let out = dir.path().join("again.csv");
        write_cohort_csv(&out, &c).unwrap();
        assert_eq!(read_cohort_csv(&out).unwrap(), c);
    }

    #[test]
    fn cohort_csv_rejects_bad_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cohort.csv");
        std::fs::write(
            &path,
            "record_id,source_path,center_i,center_j,center_k,split,margin\na,x.nii,1,1,1,train,4\n",
        )
        .unwrap();
        assert!(read_cohort_csv(&path).is_err());
        std::fs::write(&path, "record_id,center_i,center_j,center_k,split\n").unwrap();
        assert!(read_cohort_csv(&path).is_err());
    }

    #[test]
    fn prepared_manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let names = vec!["lobulation".to_string(), "spiculation".to_string()];
        let rows = vec![PreparedRow {
            record_id: "p0".into(),
            split: Split::Validation,
            patch_path: "patches/p0.img.bin".into(),
            mask_path: None,
            diameter_mm: 7.25,
            diagnosis: 1,
            manifestations: vec![0, 1],
        }];
        write_prepared_manifest(dir.path(), &names, &rows).unwrap();
        assert_eq!(read_prepared_manifest(dir.path()).unwrap(), (names, rows));
    }
}
