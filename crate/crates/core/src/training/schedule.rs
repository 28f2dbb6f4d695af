use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub batch: usize,
    /// Phase-two epoch cap.
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    /// Phase one ends after this many epochs without a gain in mean
    /// manifestation validation AUC.
    pub phase1_patience: usize,
    pub phase1_max_epochs: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 3e-5,
            plateau_factor: 0.1,
            plateau_patience: 15,
            batch: 10,
            max_epochs: 500,
            early_stop_patience: 30,
            phase1_patience: 15,
            phase1_max_epochs: 150,
        }
    }
}

impl TrainSchedule {
    /// Shortened caps and patience values for phantom-scale runs.
    pub fn desk() -> Self {
        TrainSchedule {
            plateau_patience: 5,
            max_epochs: 30,
            early_stop_patience: 10,
            phase1_patience: 5,
            phase1_max_epochs: 15,
            ..TrainSchedule::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.plateau_patience == 0 || self.early_stop_patience == 0 || self.phase1_patience == 0 {
            return Err(Error::Config("patience values must be positive integers".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr0 > 0.0) || !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config("lr0 must be positive and plateau_factor in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1) and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// Tracks the best value of a maximised metric; ties do not count as gains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tracker {
    best: Option<f64>,
    bad_epochs: usize,
}

impl Tracker {
    fn new() -> Self {
        Tracker { best: None, bad_epochs: 0 }
    }

    fn observe(&mut self, metric: f64) -> bool {
        match self.best {
            Some(b) if metric <= b => {
                self.bad_epochs += 1;
                false
            }
            _ => {
                self.best = Some(metric);
                self.bad_epochs = 0;
                true
            }
        }
    }
}

/// Multiplies the learning rate by `factor` once `patience` consecutive
/// epochs pass without improvement, then starts counting again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    tracker: Tracker,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        PlateauScheduler {
            lr,
            factor,
            patience,
            tracker: Tracker::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch's metric; returns the learning rate for the next epoch.
    pub fn step(&mut self, metric: f64) -> f64 {
        self.tracker.observe(metric);
        if self.tracker.bad_epochs >= self.patience {
            self.lr *= self.factor;
            self.tracker.bad_epochs = 0;
        }
        self.lr
    }
}

/// Signals a stop after exactly `patience` consecutive non-improving epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    patience: usize,
    tracker: Tracker,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            tracker: Tracker::new(),
        }
    }

    /// Returns `(improved, stop)`.
    pub fn update(&mut self, metric: f64) -> (bool, bool) {
        let improved = self.tracker.observe(metric);
        (improved, self.tracker.bad_epochs >= self.patience)
    }

    pub fn best(&self) -> Option<f64> {
        self.tracker.best
    }
}
