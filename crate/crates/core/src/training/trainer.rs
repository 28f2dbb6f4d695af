use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{bce_logit, total_loss, weights_from_phase1_auc, LossWeights, SelectionWeights};
use super::schedule::{EarlyStopping, PlateauScheduler, TrainSchedule};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::roc_auc;
use crate::network::{Head, Mode, MultiTaskNet, NetworkConfig};
use crate::nn::ops::sigmoid;
use crate::nn::{ParamGroup, ParamStore, Sgd, Tensor};

/// Groups excluded from updates during phase one.
pub const PHASE1_FROZEN: [ParamGroup; 1] = [ParamGroup::DiagHead];

/// Phase-one AUCs below chance are raised to this value before weighting,
/// which caps every manifestation weight at 2.
pub const PHASE1_AUC_FLOOR: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    /// Two-phase joint training of both heads.
    #[default]
    MultiTask,
    /// Baseline: diagnosis loss only, manifestation head never trained.
    DiagnosisOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    One,
    Two,
}

/// Model outputs over a dataset, as probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub diagnosis: Vec<f64>,
    /// `k` columns, each with one probability per sample.
    pub manifestations: Vec<Vec<f64>>,
    pub sam_extents: [usize; 3],
    pub sam_diag: Vec<Vec<f32>>,
    pub sam_manif: Vec<Vec<f32>>,
}

/// Eval-mode forward over every sample, in dataset order.
pub fn predict(net: &MultiTaskNet, store: &ParamStore<f32>, data: &Dataset, batch: usize) -> Result<Predictions> {
    let k = net.config.k();
    let mut p = Predictions {
        diagnosis: Vec::with_capacity(data.len()),
        manifestations: vec![Vec::with_capacity(data.len()); k],
        sam_extents: net.config.sam_extents(),
        sam_diag: Vec::with_capacity(data.len()),
        sam_manif: Vec::with_capacity(data.len()),
    };
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, pm) = data.batch(chunk);
        let (out, _) = net.forward(store, &x, &pm, &Mode::eval())?;
        for b in 0..chunk.len() {
            p.diagnosis.push(sigmoid(out.diag_logit[b] as f64));
            for (m, col) in p.manifestations.iter_mut().enumerate() {
                col.push(sigmoid(out.manif_row(b)[m] as f64));
            }
            p.sam_diag.push(out.sam_map(Head::Diagnosis, b).to_vec());
            p.sam_manif.push(out.sam_map(Head::Manifestation, b).to_vec());
        }
    }
    Ok(p)
}

/// AUC with single-class splits mapped to chance level.
fn auc_or_chance(scores: &[f64], labels: &[u8]) -> f64 {
    if labels.contains(&0) && labels.contains(&1) {
        roc_auc(scores, labels).expect("two classes present")
    } else {
        0.5
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub diag_auc: f64,
    pub manif_auc: Vec<f64>,
}

impl ValMetrics {
    pub fn mean_manif_auc(&self) -> f64 {
        self.manif_auc.iter().sum::<f64>() / self.manif_auc.len() as f64
    }

    pub fn selection_score(&self, mode: TaskMode) -> f64 {
        match mode {
            TaskMode::MultiTask => {
                let w = SelectionWeights::uniform(self.manif_auc.len());
                super::losses::selection_score(self.diag_auc, &self.manif_auc, &w).expect("lengths agree")
            }
            TaskMode::DiagnosisOnly => self.diag_auc,
        }
    }
}

pub fn validation_metrics(net: &MultiTaskNet, store: &ParamStore<f32>, data: &Dataset, batch: usize) -> Result<ValMetrics> {
    let p = predict(net, store, data, batch)?;
    Ok(ValMetrics {
        diag_auc: auc_or_chance(&p.diagnosis, &data.diagnosis_labels()),
        manif_auc: p
            .manifestations
            .iter()
            .enumerate()
            .map(|(m, s)| auc_or_chance(s, &data.manifestation_labels(m)))
            .collect(),
    })
}

/// One line of the per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: Phase,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_l_d: f64,
    pub train_l_m: Vec<f64>,
    pub val: ValMetrics,
    pub selection_score: f64,
}

#[derive(Debug, Clone)]
pub struct Phase1Result {
    pub epochs: usize,
    pub final_val: ValMetrics,
    pub weights: LossWeights,
}

/// Owns the network, its parameters and the optimiser across both phases.
pub struct Trainer<'a> {
    pub net: MultiTaskNet,
    pub store: ParamStore<f32>,
    pub schedule: TrainSchedule,
    pub mode: TaskMode,
    pub history: Vec<EpochLog>,
    train: &'a Dataset,
    val: &'a Dataset,
    sgd: Sgd<f32>,
    rng: ChaCha8Rng,
    on_epoch: Option<Box<dyn FnMut(&EpochLog) + 'a>>,
}

struct BatchLosses {
    total: f64,
    l_d: f64,
    l_m: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: NetworkConfig,
        schedule: TrainSchedule,
        mode: TaskMode,
        train: &'a Dataset,
        val: &'a Dataset,
        seed: u64,
    ) -> Result<Self> {
        schedule.validate()?;
        if train.is_empty() || val.is_empty() {
            return Err(Error::invalid("training and validation splits must be nonempty"));
        }
        for d in [train, val] {
            if d.extents != config.patch_extents || d.manifestation_names != config.manifestation_names {
                return Err(Error::ConfigMismatch(format!(
                    "dataset grid {:?} / names {:?} differ from network {:?} / {:?}",
                    d.extents, d.manifestation_names, config.patch_extents, config.manifestation_names
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = MultiTaskNet::new(config, &mut store, &mut rng)?;
        let sgd = Sgd::new(&store, schedule.lr0, schedule.momentum, schedule.weight_decay);
        Ok(Trainer {
            net,
            store,
            schedule,
            mode,
            history: Vec::new(),
            train,
            val,
            sgd,
            rng,
            on_epoch: None,
        })
    }

    pub fn on_epoch(&mut self, f: impl FnMut(&EpochLog) + 'a) {
        self.on_epoch = Some(Box::new(f));
    }

    fn labels(&self, chunk: &[usize]) -> (Vec<u8>, Vec<Vec<u8>>) {
        let s = &self.train.samples;
        (
            chunk.iter().map(|&i| s[i].diagnosis).collect(),
            chunk.iter().map(|&i| s[i].manifestations.clone()).collect(),
        )
    }

    /// One optimiser step. `w_m = None` drops the manifestation loss,
    /// `with_diag = false` drops the diagnosis loss.
    fn step(&mut self, chunk: &[usize], with_diag: bool, w_m: Option<&LossWeights>, frozen: &[ParamGroup]) -> Result<BatchLosses> {
        let (x, p): (Tensor<f32>, Tensor<f32>) = self.train.batch(chunk);
        let (out, cache) = self.net.forward(&self.store, &x, &p, &Mode::train(frozen))?;
        let (yd, ym) = self.labels(chunk);
        let nb = chunk.len() as f64;
        let k = self.net.config.k();

        let mut l_d = 0.0;
        let mut g_diag = vec![0.0f32; chunk.len()];
        for (b, &y) in yd.iter().enumerate() {
            let (l, g) = bce_logit(out.diag_logit[b] as f64, y);
            l_d += l / nb;
            g_diag[b] = (g / nb) as f32;
        }
        let mut l_m = vec![0.0; k];
        let mut g_manif = vec![0.0f32; chunk.len() * k];
        for (b, ys) in ym.iter().enumerate() {
            for m in 0..k {
                let (l, g) = bce_logit(out.manif_row(b)[m] as f64, ys[m]);
                l_m[m] += l / nb;
                let w = w_m.map_or(0.0, |w| w.w[m]);
                g_manif[b * k + m] = (w * g / nb) as f32;
            }
        }
        let total = match w_m {
            Some(w) => total_loss(if with_diag { l_d } else { 0.0 }, &l_m, w)?,
            None => l_d,
        };
        if !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "classifier loss is {total} (L_D {l_d}, L_M {l_m:?}) at lr {}",
                self.sgd.lr
            )));
        }
        let mut grads = self.store.zeros_like();
        self.net.backward(
            &self.store,
            &cache,
            with_diag.then_some(g_diag.as_slice()),
            w_m.map(|_| g_manif.as_slice()),
            &mut grads,
        );
        if !grads.all_finite() {
            return Err(Error::NonFinite("non-finite classifier gradient".into()));
        }
        self.net.commit(&mut self.store, &cache);
        self.sgd.step(&mut self.store, &grads, frozen);
        Ok(BatchLosses { total, l_d, l_m })
    }

    fn epoch(&mut self, with_diag: bool, w_m: Option<&LossWeights>, frozen: &[ParamGroup]) -> Result<BatchLosses> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        let k = self.net.config.k();
        let mut acc = BatchLosses {
            total: 0.0,
            l_d: 0.0,
            l_m: vec![0.0; k],
        };
        let chunks: Vec<Vec<usize>> = order.chunks(self.schedule.batch).map(|c| c.to_vec()).collect();
        let n = chunks.len() as f64;
        for chunk in &chunks {
            let l = self.step(chunk, with_diag, w_m, frozen)?;
            acc.total += l.total / n;
            acc.l_d += l.l_d / n;
            for (a, b) in acc.l_m.iter_mut().zip(&l.l_m) {
                *a += b / n;
            }
        }
        Ok(acc)
    }

    fn record(&mut self, phase: Phase, lr: f64, losses: BatchLosses, val: ValMetrics) -> f64 {
        let score = val.selection_score(self.mode);
        let log = EpochLog {
            phase,
            epoch: self.history.len(),
            lr,
            train_loss: losses.total,
            train_l_d: losses.l_d,
            train_l_m: losses.l_m,
            val,
            selection_score: score,
        };
        log::info!(
            "{:?} epoch {}: loss {:.4} val diag AUC {:.3} mean manif AUC {:.3}",
            phase,
            log.epoch,
            log.train_loss,
            log.val.diag_auc,
            log.val.mean_manif_auc()
        );
        if let Some(f) = self.on_epoch.as_mut() {
            f(&log);
        }
        self.history.push(log);
        score
    }

    /// Manifestation pathway and shared trunk learn; the diagnosis block and
    /// head stay frozen. Ends after `phase1_patience` epochs without a gain in
    /// mean manifestation AUC or at `max_epochs`.
    pub fn phase1(&mut self, max_epochs: usize) -> Result<Phase1Result> {
        let k = self.net.config.k();
        let ones = LossWeights::ones(k);
        let mut plateau = PlateauScheduler::new(self.schedule.lr0, self.schedule.plateau_factor, self.schedule.plateau_patience);
        let mut stop = EarlyStopping::new(self.schedule.phase1_patience);
        let mut final_val = None;
        let mut epochs = 0;
        for _ in 0..max_epochs {
            self.sgd.lr = plateau.lr();
            let losses = self.epoch(false, Some(&ones), &PHASE1_FROZEN)?;
            let val = validation_metrics(&self.net, &self.store, self.val, self.schedule.batch)?;
            let mean = val.mean_manif_auc();
            self.record(Phase::One, plateau.lr(), losses, val.clone());
            plateau.step(mean);
            epochs += 1;
            final_val = Some(val);
            if stop.update(mean).1 {
                break;
            }
        }
        let final_val = match final_val {
            Some(v) => v,
            None => validation_metrics(&self.net, &self.store, self.val, self.schedule.batch)?,
        };
        let floored: Vec<f64> = final_val.manif_auc.iter().map(|&a| a.max(PHASE1_AUC_FLOOR)).collect();
        let weights = weights_from_phase1_auc(&floored)?;
        Ok(Phase1Result {
            epochs,
            final_val,
            weights,
        })
    }

    /// Joint training of all groups from a fresh learning rate and momentum.
    /// Returns the parameters and metrics of the best-scoring epoch.
    pub fn phase2(&mut self, weights: &LossWeights, max_epochs: usize) -> Result<BestEpoch> {
        self.sgd.reset_momentum();
        let mut plateau = PlateauScheduler::new(self.schedule.lr0, self.schedule.plateau_factor, self.schedule.plateau_patience);
        let mut stop = EarlyStopping::new(self.schedule.early_stop_patience);
        let mut best: Option<BestEpoch> = None;
        let w_m = match self.mode {
            TaskMode::MultiTask => Some(weights),
            TaskMode::DiagnosisOnly => None,
        };
        for _ in 0..max_epochs {
            self.sgd.lr = plateau.lr();
            let losses = self.epoch(true, w_m, &[])?;
            let val = validation_metrics(&self.net, &self.store, self.val, self.schedule.batch)?;
            let score = self.record(Phase::Two, plateau.lr(), losses, val.clone());
            plateau.step(score);
            let (improved, halt) = stop.update(score);
            if improved {
                best = Some(BestEpoch {
                    epoch: self.history.len() - 1,
                    store: self.store.clone(),
                    val,
                    selection_score: score,
                });
            }
            if halt {
                break;
            }
        }
        best.ok_or_else(|| Error::invalid("phase two ran no epochs"))
    }
}

#[derive(Debug, Clone)]
pub struct BestEpoch {
    pub epoch: usize,
    pub store: ParamStore<f32>,
    pub val: ValMetrics,
    pub selection_score: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: MultiTaskNet,
    pub best: BestEpoch,
    pub weights: LossWeights,
    pub phase1: Option<Phase1Result>,
    pub history: Vec<EpochLog>,
}

/// Full schedule: phase one (multi-task only), AUC-reciprocal weights, then
/// phase two with model selection on the validation selection score. The
/// diagnosis-only baseline gets the same total epoch cap.
pub fn train_two_phase(
    config: NetworkConfig,
    schedule: &TrainSchedule,
    mode: TaskMode,
    train: &Dataset,
    val: &Dataset,
    seed: u64,
    on_epoch: Option<&mut dyn FnMut(&EpochLog)>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, schedule.clone(), mode, train, val, seed)?;
    if let Some(f) = on_epoch {
        trainer.on_epoch(f);
    }
    let k = trainer.net.config.k();
    let (phase1, weights, budget) = match mode {
        TaskMode::MultiTask => {
            let p1 = trainer.phase1(schedule.phase1_max_epochs)?;
            let w = p1.weights.clone();
            (Some(p1), w, schedule.max_epochs)
        }
        TaskMode::DiagnosisOnly => (None, LossWeights::ones(k), schedule.phase1_max_epochs + schedule.max_epochs),
    };
    let best = trainer.phase2(&weights, budget)?;
    Ok(TrainOutcome {
        net: trainer.net,
        best,
        weights,
        phase1,
        history: trainer.history,
    })
}
