//! Nodule segmentation: Dice + cross-entropy loss, a small 3D U-Net and its
//! training loop. Output probability maps feed the anatomical branch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::evaluation::dice_flat;
use crate::ingest::PreparedSample;
use crate::nn::blocks::DoubleConvCache;
use crate::nn::ops::{max_pool2, max_pool2_backward, sigmoid, upsample2, upsample2_backward};
use crate::nn::{Conv3d, DoubleConv, Grads, ParamGroup, ParamStore, Real, Sgd, Tensor};
use crate::training::BCE_EPS;

pub const DICE_EPS: f64 = 1e-5;

/// Per-voxel foreground probabilities on a patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    extents: [usize; 3],
    values: Vec<f32>,
}

impl ProbabilityMap {
    pub fn new(extents: [usize; 3], values: Vec<f32>) -> Result<Self> {
        ensure_shape(&[extents.iter().product()], &[values.len()])?;
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("probability map values must lie in [0, 1]"));
        }
        Ok(ProbabilityMap { extents, values })
    }

    pub fn extents(&self) -> [usize; 3] {
        self.extents
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn threshold(&self, cut: f32) -> Vec<u8> {
        self.values.iter().map(|&v| u8::from(v >= cut)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegLossTerms {
    pub l_total: f64,
    pub l_dice: f64,
    pub l_ce: f64,
    pub w: f64,
}

fn check_pair(pred: &[f64], target: &[u8]) -> Result<()> {
    ensure_shape(&[target.len()], &[pred.len()])?;
    if pred.is_empty() {
        return Err(Error::invalid("empty prediction"));
    }
    Ok(())
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

/// `1 − (2 Σ p t + ε) / (Σ p + Σ t + ε)`.
pub fn dice_loss(pred: &[f64], target: &[u8]) -> Result<f64> {
    check_pair(pred, target)?;
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.iter().zip(target) {
        let t = f64::from(t);
        inter += p * t;
        sp += p;
        st += t;
    }
    Ok(1.0 - (2.0 * inter + DICE_EPS) / (sp + st + DICE_EPS))
}

/// `L_total = L_Dice + w · L_CE` with `L_CE` the voxel-mean clamped BCE.
pub fn seg_total_loss(pred: &[f64], target: &[u8], w: f64) -> Result<SegLossTerms> {
    if !(w >= 0.0) {
        return Err(Error::invalid("cross-entropy weight must be non-negative"));
    }
    let l_dice = dice_loss(pred, target)?;
    let l_ce = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| crate::training::bce(p, t))
        .sum::<f64>()
        / pred.len() as f64;
    Ok(SegLossTerms {
        l_total: l_dice + w * l_ce,
        l_dice,
        l_ce,
        w,
    })
}

/// Gradient of `seg_total_loss(..).l_total` with respect to each prediction.
/// Clamped voxels get no cross-entropy gradient.
pub fn seg_total_loss_grad(pred: &[f64], target: &[u8], w: f64) -> Result<Vec<f64>> {
    check_pair(pred, target)?;
    let n = pred.len() as f64;
    let (mut inter, mut s) = (0.0, DICE_EPS);
    for (&p, &t) in pred.iter().zip(target) {
        inter += p * f64::from(t);
        s += p + f64::from(t);
    }
    let num = 2.0 * inter + DICE_EPS;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let t = f64::from(t);
            let g_dice = -(2.0 * t * s - num) / (s * s);
            let pc = clamp_prob(p);
            let g_ce = if pc != p { 0.0 } else { (-t / p + (1.0 - t) / (1.0 - p)) / n };
            g_dice + w * g_ce
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    pub patch_extents: [usize; 3],
    /// Width per resolution level; the last level is the bottom.
    pub channels: Vec<usize>,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig {
            patch_extents: [64, 64, 32],
            channels: vec![16, 32, 64],
        }
    }
}

impl SegmenterConfig {
    pub fn desk() -> Self {
        SegmenterConfig {
            patch_extents: [16, 16, 16],
            channels: vec![4, 8, 16],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.channels.len();
        if l < 2 || self.channels.contains(&0) {
            return Err(Error::Config("segmenter needs at least two positive channel levels".into()));
        }
        let div = 1usize << (l - 1);
        if self.patch_extents.iter().any(|&e| e == 0 || e % div != 0) {
            return Err(Error::Config(format!(
                "segmenter patch extents {:?} must be divisible by {div}",
                self.patch_extents
            )));
        }
        Ok(())
    }

    fn voxels(&self) -> usize {
        self.patch_extents.iter().product()
    }
}

#[derive(Debug, Clone)]
pub struct UNet3d {
    pub config: SegmenterConfig,
    enc: Vec<DoubleConv>,
    dec: Vec<DoubleConv>,
    head: Conv3d,
}

#[derive(Debug, Clone)]
pub struct UNetCache<T> {
    enc: Vec<DoubleConvCache<T>>,
    pool_args: Vec<Vec<u32>>,
    dec: Vec<DoubleConvCache<T>>,
    up_channels: Vec<usize>,
}

impl UNet3d {
    pub fn new<T: Real, R: rand::Rng>(config: SegmenterConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config.channels;
        let g = ParamGroup::Segmenter;
        let enc = (0..c.len())
            .map(|i| DoubleConv::new(store, &format!("seg.enc{i}"), g, if i == 0 { 1 } else { c[i - 1] }, c[i], rng))
            .collect();
        let dec = (0..c.len() - 1)
            .map(|i| DoubleConv::new(store, &format!("seg.dec{i}"), g, c[i + 1] + c[i], c[i], rng))
            .collect();
        let head = Conv3d::new(store, "seg.head", g, c[0], 1, 1, 1, true, rng);
        Ok(UNet3d { config, enc, dec, head })
    }

    /// Returns per-voxel logits, `batch × 1 × extents`.
    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>, train: bool) -> Result<(Tensor<T>, UNetCache<T>)> {
        let pe = self.config.patch_extents;
        ensure_shape(&[x.batch(), 1, pe[0], pe[1], pe[2]], &x.shape())?;
        let l = self.enc.len();
        let mut enc = Vec::with_capacity(l);
        let mut pool_args = Vec::with_capacity(l - 1);
        let mut h = x.clone();
        for (i, block) in self.enc.iter().enumerate() {
            let c = block.forward(store, &h, train);
            if i + 1 < l {
                let (p, arg) = max_pool2(c.output());
                pool_args.push(arg);
                h = p;
            }
            enc.push(c);
        }
        let mut y = enc[l - 1].output().clone();
        let mut dec = Vec::with_capacity(l - 1);
        let mut up_channels = Vec::with_capacity(l - 1);
        for i in (0..l - 1).rev() {
            let up = upsample2(&y);
            up_channels.push(up.channels());
            let d = self.dec[i].forward(store, &Tensor::concat_channels(&up, enc[i].output()), train);
            y = d.output().clone();
            dec.push(d);
        }
        dec.reverse();
        up_channels.reverse();
        let logits = self.head.forward(store, &y);
        if !logits.all_finite() {
            return Err(Error::NonFinite("segmenter produced non-finite logits".into()));
        }
        Ok((
            logits,
            UNetCache {
                enc,
                pool_args,
                dec,
                up_channels,
            },
        ))
    }

    pub fn commit<T: Real>(&self, store: &mut ParamStore<T>, cache: &UNetCache<T>) {
        for (b, c) in self.enc.iter().zip(&cache.enc) {
            b.commit(store, c);
        }
        for (b, c) in self.dec.iter().zip(&cache.dec) {
            b.commit(store, c);
        }
    }

    pub fn backward<T: Real>(&self, store: &ParamStore<T>, cache: &UNetCache<T>, g_logits: &Tensor<T>, grads: &mut Grads<T>) {
        let l = self.enc.len();
        let mut gy = self
            .head
            .backward(store, cache.dec[0].output(), g_logits, Some(&mut *grads), true)
            .expect("input gradient");
        let mut g_skip = Vec::with_capacity(l - 1);
        for i in 0..l - 1 {
            let gc = self.dec[i]
                .backward(store, &cache.dec[i], &gy, Some(&mut *grads), true)
                .expect("input gradient");
            let (gu, gs) = gc.split_channels(cache.up_channels[i]);
            g_skip.push(gs);
            gy = upsample2_backward(&gu);
        }
        for i in (0..l).rev() {
            if i + 1 < l {
                let mut g = max_pool2_backward(cache.enc[i].output().shape(), &cache.pool_args[i], &gy);
                g.add_assign(&g_skip[i]);
                gy = g;
            }
            if let Some(g) = self.enc[i].backward(store, &cache.enc[i], &gy, Some(&mut *grads), i > 0) {
                gy = g;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegSchedule {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub max_epochs: usize,
    /// Cross-entropy weight `w`.
    pub ce_weight: f64,
}

impl Default for SegSchedule {
    fn default() -> Self {
        SegSchedule {
            lr: 0.01,
            momentum: 0.99,
            weight_decay: 3e-5,
            batch: 14,
            max_epochs: 200,
            ce_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub id: String,
    pub patch: Vec<f32>,
    pub mask: Vec<u8>,
}

impl SegSample {
    /// Errors when the prepared record carries no mask.
    pub fn from_prepared(s: &PreparedSample) -> Result<Self> {
        let mask = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("record `{}` has no mask for segmenter training", s.id)))?;
        Ok(SegSample {
            id: s.id.clone(),
            patch: s.patch.iter().copied().collect(),
            mask: mask.iter().map(|&v| u8::from(v > 0.5)).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
}

#[derive(Debug, Clone)]
pub struct SegmenterModel {
    pub net: UNet3d,
    pub store: ParamStore<f32>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub history: Vec<SegEpochLog>,
}

fn stack(samples: &[&SegSample], extents: [usize; 3]) -> Tensor<f32> {
    let [d, h, w] = extents;
    let data = samples.iter().flat_map(|s| s.patch.iter().copied()).collect();
    Tensor::from_vec([samples.len(), 1, d, h, w], data).expect("validated lengths")
}

/// Batch loss (mean of per-sample `L_total`) and its gradient at the logits.
pub fn seg_batch_loss(logits: &Tensor<f32>, masks: &[&[u8]], w: f64) -> Result<(f64, Tensor<f32>)> {
    let nb = logits.batch();
    let mut g = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    for (b, mask) in masks.iter().enumerate() {
        let p: Vec<f64> = logits.sample(b).iter().map(|&z| sigmoid(z as f64)).collect();
        total += seg_total_loss(&p, mask, w)?.l_total;
        // Dice through the sigmoid; CE via its closed-form logit gradient.
        let gd = seg_total_loss_grad(&p, mask, 0.0)?;
        let n = p.len() as f64;
        for (i, o) in g.sample_mut(b).iter_mut().enumerate() {
            let t = f64::from(mask[i]);
            *o = ((gd[i] * p[i] * (1.0 - p[i]) + w * (p[i] - t) / n) / nb as f64) as f32;
        }
    }
    Ok((total / nb as f64, g))
}

fn validate_samples(samples: &[SegSample], cfg: &SegmenterConfig) -> Result<()> {
    let v = cfg.voxels();
    for s in samples {
        ensure_shape(&[v, v], &[s.patch.len(), s.mask.len()])?;
    }
    Ok(())
}

/// SGD training; returns the parameters of the epoch with the best mean
/// validation Dice (maps thresholded at 0.5).
pub fn train_segmenter(
    train: &[SegSample],
    val: &[SegSample],
    cfg: &SegmenterConfig,
    sched: &SegSchedule,
    seed: u64,
) -> Result<SegmenterModel> {
    if train.is_empty() {
        return Err(Error::invalid("segmenter training needs at least one example"));
    }
    if val.is_empty() {
        return Err(Error::invalid("segmenter training needs a nonempty validation set"));
    }
    if sched.batch == 0 {
        return Err(Error::Config("segmenter batch size must be positive".into()));
    }
    validate_samples(train, cfg)?;
    validate_samples(val, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let net = UNet3d::new(cfg.clone(), &mut store, &mut rng)?;
    let mut sgd = Sgd::new(&store, sched.lr, sched.momentum, sched.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (usize::MAX, f64::NEG_INFINITY, store.clone());
    let mut history = Vec::with_capacity(sched.max_epochs);
    for epoch in 0..sched.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(sched.batch) {
            let samples: Vec<&SegSample> = chunk.iter().map(|&i| &train[i]).collect();
            let x = stack(&samples, cfg.patch_extents);
            let (logits, cache) = net.forward(&store, &x, true)?;
            let masks: Vec<&[u8]> = samples.iter().map(|s| s.mask.as_slice()).collect();
            let (loss, g) = seg_batch_loss(&logits, &masks, sched.ce_weight)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "segmenter loss diverged at epoch {epoch}, batch {batches} (lr {})",
                    sched.lr
                )));
            }
            let mut grads = store.zeros_like();
            net.backward(&store, &cache, &g, &mut grads);
            net.commit(&mut store, &cache);
            sgd.step(&mut store, &grads, &[]);
            loss_sum += loss;
            batches += 1;
        }
        let val_dice = mean_dice(&net, &store, val, sched.batch)?;
        let train_loss = loss_sum / batches as f64;
        log::debug!("segmenter epoch {epoch}: loss {train_loss:.4} val dice {val_dice:.4}");
        history.push(SegEpochLog {
            epoch,
            train_loss,
            val_dice,
        });
        if val_dice > best.1 {
            best = (epoch, val_dice, store.clone());
        }
    }
    Ok(SegmenterModel {
        net,
        store: best.2,
        best_epoch: best.0,
        best_val_dice: best.1,
        history,
    })
}

/// Probability maps for a batch of patches, eval-mode batch norm.
pub fn predict_batch(net: &UNet3d, store: &ParamStore<f32>, patches: &[&[f32]]) -> Result<Vec<ProbabilityMap>> {
    let pe = net.config.patch_extents;
    let v: usize = pe.iter().product();
    for p in patches {
        ensure_shape(&[v], &[p.len()])?;
    }
    let data = patches.iter().flat_map(|p| p.iter().copied()).collect();
    let x = Tensor::from_vec([patches.len(), 1, pe[0], pe[1], pe[2]], data)?;
    let (logits, _) = net.forward(store, &x, false)?;
    (0..patches.len())
        .map(|b| ProbabilityMap::new(pe, logits.sample(b).iter().map(|&z| sigmoid(z)).collect()))
        .collect()
}

pub fn predict_probmap(model: &SegmenterModel, patch: &[f32]) -> Result<ProbabilityMap> {
    Ok(predict_batch(&model.net, &model.store, &[patch])?.remove(0))
}

/// Mean Dice of 0.5-thresholded maps against the sample masks.
pub fn mean_dice(net: &UNet3d, store: &ParamStore<f32>, samples: &[SegSample], batch: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(batch.max(1)) {
        let patches: Vec<&[f32]> = chunk.iter().map(|s| s.patch.as_slice()).collect();
        for (map, s) in predict_batch(net, store, &patches)?.iter().zip(chunk) {
            total += dice_flat(&map.threshold(0.5), &s.mask)?;
        }
    }
    Ok(total / samples.len() as f64)
}
