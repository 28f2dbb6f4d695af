//! Stage orchestration over a run directory.
//!
//! ```text
//! run/
//!   run_config.toml
//!   prepared/            prepared.csv, patches/, enrollment.json
//!   probmaps/            <id>.prob.bin
//!   segmenter.ckpt       segmentation.json
//!   classifier.ckpt      train_log.jsonl
//!   metrics.json         report.txt  embeddings.csv
//!   explain/             <id>_<task>_<view>.png, localization.json
//!   stages/<stage>.json  cache key, input fingerprints, outputs
//! ```
//!
//! A stage is skipped when its cache key (stage name, relevant config
//! subset and input fingerprints) matches the stored one and every recorded
//! output still exists.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{sha256_hex, CheckpointMeta, CheckpointRecord, SegmenterCheckpoint, SegmenterMeta};
use crate::config::RunConfig;
use crate::dataset::{ClassifierSample, Dataset, ProbmapMode};
use crate::error::{Error, Result};
use crate::evaluation::{dice_flat, evaluate_task, export_embeddings, format_report, MetricsReport};
use crate::explain::{localization_score, patch_resolution_map, render_overlay, save_png, OverlayStyle};
use crate::ingest::io::{read_patch, write_patch};
use crate::ingest::{load_prepared, prepare_cohort, NiftiIo, PreparedCohort, Split};
use crate::network::MultiTaskNet;
use crate::phantom::{cohort_plan, write_phantom_cohort, PhantomCohortConfig};
use crate::segmenter::{predict_batch, train_segmenter, SegSample};
use crate::training::{predict, train_two_phase, EpochLog};

pub const RUN_CONFIG: &str = "run_config.toml";
pub const PREPARED_DIR: &str = "prepared";
pub const PROBMAP_DIR: &str = "probmaps";
pub const SEG_CKPT: &str = "segmenter.ckpt";
pub const SEG_METRICS: &str = "segmentation.json";
pub const CLS_CKPT: &str = "classifier.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const METRICS: &str = "metrics.json";
pub const REPORT: &str = "report.txt";
pub const EMBEDDINGS: &str = "embeddings.csv";
pub const EXPLAIN_DIR: &str = "explain";
pub const LOCALIZATION: &str = "localization.json";
const STAGES_DIR: &str = "stages";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prepare,
    Segment,
    Train,
    Evaluate,
    Explain,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Prepare, Stage::Segment, Stage::Train, Stage::Evaluate, Stage::Explain];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Segment => "segment",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Explain => "explain",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StageRecord {
    stage: Stage,
    key: String,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub skipped: bool,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

/// SHA-256 over a file, or over the sorted relative paths and contents of
/// every file below a directory.
pub fn fingerprint(path: &Path) -> Result<String> {
    if path.is_file() {
        return Ok(sha256_hex(&fs::read(path).map_err(io_err(path))?));
    }
    let mut files = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let p = entry.map_err(io_err(&dir))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut listing = String::new();
    for f in &files {
        let rel = f.strip_prefix(path).unwrap_or(f);
        listing.push_str(&format!("{}\t{}\n", rel.display(), sha256_hex(&fs::read(f).map_err(io_err(f))?)));
    }
    Ok(sha256_hex(listing.as_bytes()))
}

fn require(path: PathBuf, stage: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact {
            path,
            hint: format!("run the `{stage}` stage first"),
        })
    }
}

/// Writes a phantom source cohort (volumes, annotations, `cohort.csv`).
pub fn generate_phantom_source(cfg: &PhantomCohortConfig, dir: &Path) -> Result<PathBuf> {
    let (specs, splits) = cohort_plan(cfg)?;
    write_phantom_cohort(dir, &specs, &splits, &cfg.grid)
}

struct Run<'a> {
    cfg: &'a RunConfig,
    dir: &'a Path,
}

impl Run<'_> {
    fn p(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn record_path(&self, stage: Stage) -> PathBuf {
        self.dir.join(STAGES_DIR).join(format!("{}.json", stage.name()))
    }

    fn inputs(&self, stage: Stage) -> Result<BTreeMap<String, String>> {
        let mut m = BTreeMap::new();
        let mut add = |name: &str, path: PathBuf, producer: &str| -> Result<()> {
            m.insert(name.to_string(), fingerprint(&require(path, producer)?)?);
            Ok(())
        };
        match stage {
            Stage::Prepare => {
                let csv = self.cfg.paths.cohort_csv.clone().ok_or_else(|| Error::MissingArtifact {
                    path: PathBuf::from("<paths.cohort_csv>"),
                    hint: "set `paths.cohort_csv` in the config or pass --cohort (see `phantom-generate`)".into(),
                })?;
                let src = csv.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
                add("cohort_csv", csv, "phantom-generate")?;
                add("source_dir", src, "phantom-generate")?;
            }
            Stage::Segment => add("prepared", self.p(PREPARED_DIR), "prepare")?,
            Stage::Train => {
                add("prepared", self.p(PREPARED_DIR), "prepare")?;
                add("probmaps", self.p(PROBMAP_DIR), "segment")?;
            }
            Stage::Evaluate | Stage::Explain => {
                add("prepared", self.p(PREPARED_DIR), "prepare")?;
                add("probmaps", self.p(PROBMAP_DIR), "segment")?;
                add("classifier", self.p(CLS_CKPT), "train")?;
                if stage == Stage::Evaluate {
                    add("segmentation", self.p(SEG_METRICS), "segment")?;
                }
            }
        }
        Ok(m)
    }

    fn config_subset(&self, stage: Stage) -> serde_json::Value {
        let c = self.cfg;
        match stage {
            Stage::Prepare => json!({ "prepare": c.prepare }),
            Stage::Segment => json!({ "segment": c.segment, "seed": c.seed }),
            Stage::Train => json!({ "network": c.network, "train": c.train, "seed": c.seed }),
            Stage::Evaluate => json!({
                "eval": c.eval, "network": c.network, "eval_batch": c.train.eval_batch,
                "probmap_mode": c.train.probmap_mode,
            }),
            Stage::Explain => json!({
                "explain": c.explain, "network": c.network, "eval_batch": c.train.eval_batch,
                "probmap_mode": c.train.probmap_mode,
            }),
        }
    }

    fn key(&self, stage: Stage, inputs: &BTreeMap<String, String>) -> Result<String> {
        let doc = json!({ "stage": stage, "config": self.config_subset(stage), "inputs": inputs });
        Ok(sha256_hex(&serde_json::to_vec(&doc)?))
    }

    fn cached(&self, stage: Stage, key: &str) -> bool {
        let Ok(text) = fs::read_to_string(self.record_path(stage)) else {
            return false;
        };
        match serde_json::from_str::<StageRecord>(&text) {
            Ok(r) => r.key == key && r.outputs.iter().all(|o| self.dir.join(o).exists()),
            Err(_) => false,
        }
    }

    fn run_stage(&self, stage: Stage) -> Result<StageOutcome> {
        let inputs = self.inputs(stage)?;
        let key = self.key(stage, &inputs)?;
        if self.cached(stage, &key) {
            log::info!("stage {}: inputs unchanged, skipping", stage.name());
            return Ok(StageOutcome { stage, skipped: true });
        }
        log::info!("stage {}: running", stage.name());
        let outputs = match stage {
            Stage::Prepare => self.prepare()?,
            Stage::Segment => self.segment()?,
            Stage::Train => self.train()?,
            Stage::Evaluate => self.evaluate()?,
            Stage::Explain => self.explain()?,
        };
        let rec = StageRecord {
            stage,
            key,
            inputs,
            outputs,
        };
        let path = self.record_path(stage);
        fs::create_dir_all(self.dir.join(STAGES_DIR)).map_err(io_err(self.dir))?;
        write_text(&path, &serde_json::to_string_pretty(&rec)?)?;
        Ok(StageOutcome { stage, skipped: false })
    }

    fn prepare(&self) -> Result<Vec<PathBuf>> {
        let csv = self.cfg.paths.cohort_csv.as_ref().expect("checked in inputs");
        let out = self.p(PREPARED_DIR);
        if out.exists() {
            fs::remove_dir_all(&out).map_err(io_err(&out))?;
        }
        let report = prepare_cohort(csv, &out, &NiftiIo, &self.cfg.prepare)?;
        log::info!("prepared {} records, excluded {}", report.prepared, report.excluded.len());
        Ok(vec![PREPARED_DIR.into()])
    }

    fn segment(&self) -> Result<Vec<PathBuf>> {
        let cohort = load_prepared(&self.p(PREPARED_DIR))?;
        let seg_split = |split: Split| -> Result<Vec<SegSample>> {
            cohort.split(split).into_iter().map(SegSample::from_prepared).collect()
        };
        let (train, val) = (seg_split(Split::Train)?, seg_split(Split::Validation)?);
        let sc = &self.cfg.segment;
        let model = train_segmenter(&train, &val, &sc.model, &sc.schedule, self.cfg.seed)?;
        SegmenterCheckpoint {
            meta: SegmenterMeta {
                config: sc.model.clone(),
                schedule: sc.schedule.clone(),
                best_epoch: model.best_epoch,
                best_val_dice: model.best_val_dice,
                data_fingerprint: fingerprint(&self.p(PREPARED_DIR))?,
                seed: self.cfg.seed,
            },
            store: model.store.clone(),
        }
        .save(&self.p(SEG_CKPT))?;

        let dir = self.p(PROBMAP_DIR);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let e = sc.model.patch_extents;
        let mut test_dice = Vec::new();
        for chunk in cohort.samples.chunks(sc.schedule.batch) {
            let flat: Vec<Vec<f32>> = chunk.iter().map(|s| s.patch.iter().copied().collect()).collect();
            let refs: Vec<&[f32]> = flat.iter().map(Vec::as_slice).collect();
            for (map, s) in predict_batch(&model.net, &model.store, &refs)?.into_iter().zip(chunk) {
                if let (Split::Test, Some(mask)) = (s.split, &s.mask) {
                    let truth: Vec<u8> = mask.iter().map(|&v| u8::from(v > 0.5)).collect();
                    test_dice.push(dice_flat(&map.threshold(sc.dice_threshold), &truth)?);
                }
                let arr = Array3::from_shape_vec((e[0], e[1], e[2]), map.into_values()).expect("patch extents");
                write_patch(&dir.join(format!("{}.prob.bin", s.id)), &arr)?;
            }
        }
        let mean_test = (!test_dice.is_empty()).then(|| test_dice.iter().sum::<f64>() / test_dice.len() as f64);
        let summary = json!({
            "best_epoch": model.best_epoch,
            "best_val_dice": model.best_val_dice,
            "test_dice": mean_test,
            "n_test": test_dice.len(),
            "history": model.history,
        });
        write_text(&self.p(SEG_METRICS), &serde_json::to_string_pretty(&summary)?)?;
        Ok(vec![SEG_CKPT.into(), SEG_METRICS.into(), PROBMAP_DIR.into()])
    }

    fn dataset(&self, cohort: &PreparedCohort, split: Split, mode: ProbmapMode) -> Result<Dataset> {
        let dir = self.p(PROBMAP_DIR);
        let mut samples = Vec::new();
        for s in cohort.split(split) {
            let path = require(dir.join(format!("{}.prob.bin", s.id)), "segment")?;
            let pm = read_patch(&path)?;
            samples.push(ClassifierSample::from_prepared(s, pm.iter().copied().collect()));
        }
        let extents = cohort.patch_size().unwrap_or(self.cfg.prepare.patch_size);
        Ok(Dataset::new(extents, cohort.manifestation_names.clone(), samples)?.with_probmap_mode(mode))
    }

    fn train(&self) -> Result<Vec<PathBuf>> {
        let cohort = load_prepared(&self.p(PREPARED_DIR))?;
        let tc = &self.cfg.train;
        let train = self.dataset(&cohort, Split::Train, tc.probmap_mode)?;
        let val = self.dataset(&cohort, Split::Validation, tc.probmap_mode)?;
        let mut log_lines = String::new();
        let mut on_epoch = |l: &EpochLog| {
            log_lines.push_str(&serde_json::to_string(l).expect("epoch log serialises"));
            log_lines.push('\n');
        };
        let seed = self.cfg.seed.wrapping_add(1);
        let out = train_two_phase(
            self.cfg.network.clone(),
            &tc.schedule,
            tc.task_mode,
            &train,
            &val,
            seed,
            Some(&mut on_epoch),
        )?;
        write_text(&self.p(TRAIN_LOG), &log_lines)?;
        CheckpointRecord {
            meta: CheckpointMeta {
                config: self.cfg.network.clone(),
                schedule: tc.schedule.clone(),
                task_mode: tc.task_mode,
                probmap_mode: tc.probmap_mode,
                epoch: out.best.epoch,
                val_metrics: out.best.val.clone(),
                selection_score: out.best.selection_score,
                loss_weights: out.weights.clone(),
                data_fingerprint: sha256_hex(format!("{}{}", train.fingerprint(), val.fingerprint()).as_bytes()),
                seed,
            },
            store: out.best.store,
        }
        .save(&self.p(CLS_CKPT))?;
        Ok(vec![CLS_CKPT.into(), TRAIN_LOG.into()])
    }

    fn load_classifier(&self) -> Result<(CheckpointRecord, MultiTaskNet)> {
        CheckpointRecord::load(&require(self.p(CLS_CKPT), "train")?, Some(&self.cfg.network))
    }

    fn evaluate(&self) -> Result<Vec<PathBuf>> {
        let (ck, net) = self.load_classifier()?;
        let cohort = load_prepared(&self.p(PREPARED_DIR))?;
        let test = self.dataset(&cohort, Split::Test, ck.meta.probmap_mode)?;
        if test.is_empty() {
            return Err(Error::invalid("the test split is empty"));
        }
        let batch = self.cfg.train.eval_batch;
        let p = predict(&net, &ck.store, &test, batch)?;
        let ev = &self.cfg.eval;
        let manifestations = test
            .manifestation_names
            .iter()
            .enumerate()
            .map(|(m, name)| evaluate_task(name, &p.manifestations[m], &test.manifestation_labels(m), ev))
            .collect::<Result<Vec<_>>>()?;
        let seg: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(self.p(SEG_METRICS)).map_err(io_err(&self.p(SEG_METRICS)))?,
        )?;
        let report = MetricsReport {
            split: Split::Test.as_str().into(),
            n_samples: test.len(),
            diagnosis: evaluate_task("diagnosis", &p.diagnosis, &test.diagnosis_labels(), ev)?,
            manifestations,
            eval: *ev,
            segmentation_dice: seg["test_dice"].as_f64(),
        };
        write_text(&self.p(METRICS), &serde_json::to_string_pretty(&report)?)?;
        write_text(&self.p(REPORT), &format_report(&report))?;
        export_embeddings(&net, &ck.store, &test, batch)?.write_csv(&self.p(EMBEDDINGS))?;
        Ok(vec![METRICS.into(), REPORT.into(), EMBEDDINGS.into()])
    }

    fn explain(&self) -> Result<Vec<PathBuf>> {
        let (ck, net) = self.load_classifier()?;
        let cohort = load_prepared(&self.p(PREPARED_DIR))?;
        let mut test = self.dataset(&cohort, Split::Test, ck.meta.probmap_mode)?;
        if let Some(n) = self.cfg.explain.max_records {
            test.samples.truncate(n);
        }
        let masks: BTreeMap<&str, Vec<u8>> = cohort
            .split(Split::Test)
            .into_iter()
            .filter_map(|s| s.mask.as_ref().map(|m| (s.id.as_str(), m.iter().map(|&v| u8::from(v > 0.5)).collect())))
            .collect();
        let p = predict(&net, &ck.store, &test, self.cfg.train.eval_batch)?;
        let dir = self.p(EXPLAIN_DIR);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let ex = &self.cfg.explain;
        let style = OverlayStyle {
            cutoff: ex.cutoff,
            scale: ex.scale,
            contour: ex.contour,
            ..OverlayStyle::default()
        };
        let e = test.extents;
        let mut entries = Vec::new();
        for (b, s) in test.samples.iter().enumerate() {
            let diag = patch_resolution_map(&p.sam_diag[b], p.sam_extents, e)?;
            let manif = patch_resolution_map(&p.sam_manif[b], p.sam_extents, e)?;
            let mut tasks: Vec<(&str, &Vec<f64>)> = vec![("diagnosis", &diag)];
            tasks.extend(test.manifestation_names.iter().map(|n| (n.as_str(), &manif)));
            for (task, map) in tasks {
                for &view in &ex.views {
                    let img = render_overlay(&s.patch, map, e, view, &style)?;
                    save_png(&img, &dir.join(format!("{}_{}_{}.png", s.id, task, view.name())))?;
                }
            }
            let score = |map: &[f64]| -> Result<Option<f64>> {
                match masks.get(s.id.as_str()) {
                    Some(m) if m.contains(&1) => Ok(Some(localization_score(map, m, ex.top_fraction)?)),
                    _ => Ok(None),
                }
            };
            let predicted: BTreeMap<&str, f64> = test
                .manifestation_names
                .iter()
                .enumerate()
                .map(|(m, n)| (n.as_str(), p.manifestations[m][b]))
                .collect();
            entries.push(json!({
                "record_id": s.id,
                "diagnosis_probability": p.diagnosis[b],
                "manifestation_probabilities": predicted,
                "localization": { "diagnosis": score(&diag)?, "manifestation_head": score(&manif)? },
            }));
        }
        let doc = json!({ "top_fraction": ex.top_fraction, "cutoff": ex.cutoff, "records": entries });
        write_text(&dir.join(LOCALIZATION), &serde_json::to_string_pretty(&doc)?)?;
        Ok(vec![EXPLAIN_DIR.into()])
    }
}

/// Runs `stages` in pipeline order inside `run_dir`, writing the effective
/// configuration alongside the artifacts.
pub fn run_pipeline(cfg: &RunConfig, run_dir: &Path, stages: &[Stage]) -> Result<Vec<StageOutcome>> {
    cfg.validate()?;
    fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    cfg.save(&run_dir.join(RUN_CONFIG))?;
    let run = Run { cfg, dir: run_dir };
    let mut ordered = stages.to_vec();
    ordered.sort();
    ordered.dedup();
    ordered.into_iter().map(|s| run.run_stage(s)).collect()
}
