//! Run configuration: every tunable of every stage in one TOML document.
//! Missing keys take their defaults; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::ProbmapMode;
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::explain::{View, DEFAULT_CUTOFF, DEFAULT_TOP_FRACTION};
use crate::ingest::PrepareConfig;
use crate::network::NetworkConfig;
use crate::phantom::{desk_prepare_config, manifestation_names, PhantomCohortConfig};
use crate::segmenter::{SegSchedule, SegmenterConfig};
use crate::training::{TaskMode, TrainSchedule};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Source cohort CSV read by the `prepare` stage.
    pub cohort_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub cutoff: f64,
    pub top_fraction: f64,
    pub views: Vec<View>,
    pub scale: u32,
    pub contour: bool,
    /// Explain at most this many test records; all when absent.
    pub max_records: Option<usize>,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            cutoff: DEFAULT_CUTOFF,
            top_fraction: DEFAULT_TOP_FRACTION,
            views: View::ALL.to_vec(),
            scale: 8,
            contour: true,
            max_records: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: TrainSchedule,
    pub task_mode: TaskMode,
    pub probmap_mode: ProbmapMode,
    /// Mini-batch size for inference passes.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: TrainSchedule::default(),
            task_mode: TaskMode::MultiTask,
            probmap_mode: ProbmapMode::Segmenter,
            eval_batch: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentConfig {
    pub model: SegmenterConfig,
    pub schedule: SegSchedule,
    /// Probability cut used when scoring segmentation Dice.
    pub dice_threshold: f32,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            model: SegmenterConfig::default(),
            schedule: SegSchedule::default(),
            dice_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives segmenter and classifier initialisation and shuffling.
    pub seed: u64,
    /// Recorded with every run. All computation is single-threaded and
    /// seeded, so runs are reproducible either way.
    pub deterministic: bool,
    pub paths: PathsConfig,
    pub phantom: PhantomCohortConfig,
    pub prepare: PrepareConfig,
    pub segment: SegmentConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub explain: ExplainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            deterministic: true,
            paths: PathsConfig::default(),
            phantom: PhantomCohortConfig::default(),
            prepare: PrepareConfig::default(),
            segment: SegmentConfig::default(),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            explain: ExplainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Phantom-scale preset: 16³ patches, narrow networks and short
    /// schedules that finish in minutes on one CPU core.
    pub fn desk() -> Self {
        RunConfig {
            prepare: desk_prepare_config(),
            segment: SegmentConfig {
                model: SegmenterConfig::desk(),
                schedule: SegSchedule {
                    batch: 5,
                    max_epochs: 30,
                    ..SegSchedule::default()
                },
                ..SegmentConfig::default()
            },
            network: NetworkConfig::desk(manifestation_names()),
            train: TrainConfig {
                schedule: TrainSchedule::desk(),
                ..TrainConfig::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.segment.model.validate()?;
        self.train.schedule.validate()?;
        if self.network.patch_extents != self.prepare.patch_size || self.segment.model.patch_extents != self.prepare.patch_size {
            return Err(Error::Config(format!(
                "patch sizes disagree: prepare {:?}, segment {:?}, network {:?}",
                self.prepare.patch_size, self.segment.model.patch_extents, self.network.patch_extents
            )));
        }
        if self.train.eval_batch == 0 || self.segment.schedule.batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.explain.top_fraction > 0.0 && self.explain.top_fraction <= 1.0) {
            return Err(Error::Config("explain.top_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }
}
