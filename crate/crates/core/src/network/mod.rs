//! Multi-task classifier: U-Net-like extractor with anatomical attention
//! gating, a shared GMP vector, and two residual + SAM heads.

mod attention;

pub use attention::{aag_gate, gmp, gmp_backward, sam_backward, sam_module, AagCache, AagGate, SamOutput};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::nn::blocks::{ConvBnReluCache, DoubleConvCache, ResBlockCache};
use crate::nn::ops::{max_pool2, max_pool2_backward, upsample2, upsample2_backward};
use crate::nn::{ConvBnRelu, DoubleConv, Grads, Linear, ParamGroup, ParamStore, Real, ResBlock, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub patch_extents: [usize; 3],
    pub manifestation_names: Vec<String>,
    /// Extractor width per encoder level.
    pub encoder_channels: Vec<usize>,
    /// Width of the bottom block; also the head and fused-vector width.
    pub bottom_channels: usize,
    pub anatomical_channels: Vec<usize>,
    pub attention_levels: usize,
    /// Stride of the first convolution in each head's residual block.
    pub head_stride: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            patch_extents: [64, 64, 32],
            manifestation_names: ["calcification", "texture", "subtlety", "sphericity", "margin"]
                .map(String::from)
                .to_vec(),
            encoder_channels: vec![16, 32, 64],
            bottom_channels: 128,
            anatomical_channels: vec![16, 32, 64],
            attention_levels: 3,
            head_stride: 2,
        }
    }
}

impl NetworkConfig {
    /// Small widths for single-core desk-scale runs on 16³ phantom patches.
    pub fn desk(manifestation_names: Vec<String>) -> Self {
        NetworkConfig {
            patch_extents: [16, 16, 16],
            manifestation_names,
            encoder_channels: vec![4, 8, 16],
            bottom_channels: 16,
            anatomical_channels: vec![2, 4, 8],
            attention_levels: 3,
            head_stride: 2,
        }
    }

    pub fn k(&self) -> usize {
        self.manifestation_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.attention_levels;
        if l == 0 || self.encoder_channels.len() != l || self.anatomical_channels.len() != l {
            return Err(Error::Config(format!(
                "attention_levels = {l} must equal the number of encoder ({}) and anatomical ({}) levels",
                self.encoder_channels.len(),
                self.anatomical_channels.len()
            )));
        }
        if self.k() == 0 {
            return Err(Error::Config("at least one manifestation is required".into()));
        }
        if self.encoder_channels.iter().chain(&self.anatomical_channels).any(|&c| c == 0) || self.bottom_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        let div = 1usize << l;
        if self.head_stride == 0 || self.patch_extents.iter().any(|&e| e == 0 || e % div != 0 || e % self.head_stride != 0) {
            return Err(Error::Config(format!(
                "patch extents {:?} must be divisible by 2^attention_levels = {div} and by head_stride {}",
                self.patch_extents, self.head_stride
            )));
        }
        Ok(())
    }

    /// Spatial extents of the SAM maps.
    pub fn sam_extents(&self) -> [usize; 3] {
        self.patch_extents.map(|e| e.div_ceil(self.head_stride))
    }
}

/// Which parameter groups run in training mode. Frozen groups use running
/// batch-norm statistics so that none of their stored values move.
#[derive(Debug, Clone, Default)]
pub struct Mode {
    pub train: bool,
    pub frozen: Vec<ParamGroup>,
}

impl Mode {
    pub fn eval() -> Self {
        Mode::default()
    }

    pub fn train(frozen: &[ParamGroup]) -> Self {
        Mode {
            train: true,
            frozen: frozen.to_vec(),
        }
    }

    fn bn_train(&self, group: ParamGroup) -> bool {
        self.train && !self.frozen.contains(&group)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutputs<T> {
    pub batch: usize,
    pub k: usize,
    pub diag_logit: Vec<T>,
    /// `batch × k`, ordered by the configured manifestation names.
    pub manif_logits: Vec<T>,
    pub sam_extents: [usize; 3],
    /// `batch × voxels(sam_extents)`.
    pub sam_map_diag: Vec<T>,
    pub sam_map_manif: Vec<T>,
    pub fused_len: usize,
    /// `batch × fused_len`.
    pub fused_diag: Vec<T>,
    pub fused_manif: Vec<T>,
}

impl<T: Real> ForwardOutputs<T> {
    pub fn manif_row(&self, b: usize) -> &[T] {
        &self.manif_logits[b * self.k..(b + 1) * self.k]
    }

    pub fn sam_map(&self, head: Head, b: usize) -> &[T] {
        let v: usize = self.sam_extents.iter().product();
        let maps = match head {
            Head::Diagnosis => &self.sam_map_diag,
            Head::Manifestation => &self.sam_map_manif,
        };
        &maps[b * v..(b + 1) * v]
    }

    pub fn fused(&self, head: Head, b: usize) -> &[T] {
        let f = self.fused_len;
        let v = match head {
            Head::Diagnosis => &self.fused_diag,
            Head::Manifestation => &self.fused_manif,
        };
        &v[b * f..(b + 1) * f]
    }

    fn all_finite(&self) -> bool {
        [&self.diag_logit, &self.manif_logits, &self.fused_diag, &self.fused_manif]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Diagnosis,
    Manifestation,
}

#[derive(Debug, Clone)]
struct LevelCache<T> {
    enc: DoubleConvCache<T>,
    pool_arg: Vec<u32>,
    pre_pool_shape: [usize; 5],
    anat: ConvBnReluCache<T>,
    anat_arg: Vec<u32>,
    anat_shape: [usize; 5],
    aag: AagCache<T>,
}

#[derive(Debug, Clone)]
struct HeadCache<T> {
    block: ResBlockCache<T>,
    sam: SamOutput<T>,
    fused: Vec<T>,
}

/// Intermediate values retained for [`MultiTaskNet::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    levels: Vec<LevelCache<T>>,
    bottom: DoubleConvCache<T>,
    gmp_arg: Vec<usize>,
    dec: Vec<DoubleConvCache<T>>,
    up_channels: Vec<usize>,
    diag: HeadCache<T>,
    manif: HeadCache<T>,
}

#[derive(Debug, Clone)]
pub struct MultiTaskNet {
    pub config: NetworkConfig,
    enc: Vec<DoubleConv>,
    anat: Vec<ConvBnRelu>,
    aag: Vec<AagGate>,
    bottom: DoubleConv,
    dec: Vec<DoubleConv>,
    diag_block: ResBlock,
    diag_fc: Linear,
    manif_block: ResBlock,
    manif_fc: Linear,
}

impl MultiTaskNet {
    /// Registers every parameter in `store`; groups partition the store.
    pub fn new<T: Real, R: Rng>(config: NetworkConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config.encoder_channels;
        let a = &config.anatomical_channels;
        let b = config.bottom_channels;
        let l = config.attention_levels;
        let mut enc = Vec::with_capacity(l);
        let mut anat = Vec::with_capacity(l);
        let mut aag = Vec::with_capacity(l);
        for i in 0..l {
            let cin = if i == 0 { 1 } else { c[i - 1] };
            let ain = if i == 0 { 1 } else { a[i - 1] };
            enc.push(DoubleConv::new(store, &format!("enc{i}"), ParamGroup::Extractor, cin, c[i], rng));
            anat.push(ConvBnRelu::new(store, &format!("anat{i}"), ParamGroup::AnatomicalBranch, ain, a[i], rng));
            aag.push(AagGate::new(store, &format!("aag{i}"), c[i], a[i], rng));
        }
        let bottom = DoubleConv::new(store, "bottom", ParamGroup::Extractor, c[l - 1], b, rng);
        let dec = (0..l)
            .map(|i| {
                let up = if i == l - 1 { b } else { c[i + 1] };
                DoubleConv::new(store, &format!("dec{i}"), ParamGroup::Extractor, up + c[i], c[i], rng)
            })
            .collect();
        let s = config.head_stride;
        let k = config.k();
        let diag_block = ResBlock::new(store, "diag.block", ParamGroup::DiagHead, c[0], b, s, rng);
        let diag_fc = Linear::new(store, "diag.fc", ParamGroup::DiagHead, b, 1, rng);
        let manif_block = ResBlock::new(store, "manif.block", ParamGroup::ManifHead, c[0], b, s, rng);
        let manif_fc = Linear::new(store, "manif.fc", ParamGroup::ManifHead, b, k, rng);
        Ok(MultiTaskNet {
            config,
            enc,
            anat,
            aag,
            bottom,
            dec,
            diag_block,
            diag_fc,
            manif_block,
            manif_fc,
        })
    }

    /// `patches` and `probmaps` are `batch × 1 × patch_extents`.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        patches: &Tensor<T>,
        probmaps: &Tensor<T>,
        mode: &Mode,
    ) -> Result<(ForwardOutputs<T>, ForwardCache<T>)> {
        let pe = self.config.patch_extents;
        let nb = patches.batch();
        ensure_shape(&[nb, 1, pe[0], pe[1], pe[2]], &patches.shape())?;
        ensure_shape(&patches.shape(), &probmaps.shape())?;
        if nb == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let ext = mode.bn_train(ParamGroup::Extractor);
        let an = mode.bn_train(ParamGroup::AnatomicalBranch);

        let mut levels = Vec::with_capacity(self.enc.len());
        let mut x = patches.clone();
        let mut a = probmaps.clone();
        for i in 0..self.enc.len() {
            let enc = self.enc[i].forward(store, &x, ext);
            let pre_pool_shape = enc.output().shape();
            let (p, pool_arg) = max_pool2(enc.output());
            let anat = self.anat[i].forward(store, &a, an);
            let anat_shape = anat.output().shape();
            let (ap, anat_arg) = max_pool2(anat.output());
            let (gated, aag) = self.aag[i].forward(store, &p, &ap)?;
            x = gated;
            a = ap;
            levels.push(LevelCache {
                enc,
                pool_arg,
                pre_pool_shape,
                anat,
                anat_arg,
                anat_shape,
                aag,
            });
        }
        let bottom = self.bottom.forward(store, &x, ext);
        let (high, gmp_arg) = gmp(bottom.output());

        let mut y = bottom.output().clone();
        let mut dec = Vec::with_capacity(self.dec.len());
        let mut up_channels = Vec::with_capacity(self.dec.len());
        for i in (0..self.dec.len()).rev() {
            let up = upsample2(&y);
            up_channels.push(up.channels());
            let cat = Tensor::concat_channels(&up, levels[i].enc.output());
            let d = self.dec[i].forward(store, &cat, ext);
            y = d.output().clone();
            dec.push(d);
        }
        // stored in backward order: dec[0] is the finest level
        dec.reverse();
        up_channels.reverse();

        let run_head = |block: &ResBlock, fc: &Linear, group: ParamGroup| -> (HeadCache<T>, Vec<T>) {
            let block = block.forward(store, &y, mode.bn_train(group));
            let sam = sam_module(block.output());
            let fused: Vec<T> = sam.vectors.iter().zip(&high).map(|(&s, &g)| s + g).collect();
            let logits = fc.forward(store, &fused, nb);
            (HeadCache { block, sam, fused }, logits)
        };
        let (diag, diag_logit) = run_head(&self.diag_block, &self.diag_fc, ParamGroup::DiagHead);
        let (manif, manif_logits) = run_head(&self.manif_block, &self.manif_fc, ParamGroup::ManifHead);

        let out = ForwardOutputs {
            batch: nb,
            k: self.config.k(),
            diag_logit,
            manif_logits,
            sam_extents: diag.block.output().spatial(),
            sam_map_diag: diag.sam.maps.clone(),
            sam_map_manif: manif.sam.maps.clone(),
            fused_len: self.config.bottom_channels,
            fused_diag: diag.fused.clone(),
            fused_manif: manif.fused.clone(),
        };
        if !out.all_finite() {
            return Err(Error::NonFinite("classifier forward produced non-finite outputs".into()));
        }
        Ok((
            out,
            ForwardCache {
                levels,
                bottom,
                gmp_arg,
                dec,
                up_channels,
                diag,
                manif,
            },
        ))
    }

    /// Folds batch-norm statistics from a training-mode forward into the store.
    pub fn commit<T: Real>(&self, store: &mut ParamStore<T>, cache: &ForwardCache<T>) {
        for (i, lc) in cache.levels.iter().enumerate() {
            self.enc[i].commit(store, &lc.enc);
            self.anat[i].commit(store, &lc.anat);
        }
        self.bottom.commit(store, &cache.bottom);
        for (d, c) in self.dec.iter().zip(&cache.dec) {
            d.commit(store, c);
        }
        self.diag_block.commit(store, &cache.diag.block);
        self.manif_block.commit(store, &cache.manif.block);
    }

    /// Accumulates parameter gradients given logit gradients. A head whose
    /// gradient is `None` is skipped entirely.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &ForwardCache<T>,
        g_diag: Option<&[T]>,
        g_manif: Option<&[T]>,
        grads: &mut Grads<T>,
    ) {
        let final_shape = cache.dec[0].output().shape();
        let nb = final_shape[0];
        let mut g_final = Tensor::zeros(final_shape);
        let mut g_high = vec![T::zero(); nb * self.config.bottom_channels];
        for (head, g, block, fc) in [
            (&cache.diag, g_diag, &self.diag_block, &self.diag_fc),
            (&cache.manif, g_manif, &self.manif_block, &self.manif_fc),
        ] {
            let Some(g) = g else { continue };
            let g_fused = fc.backward(store, &head.fused, g, Some(&mut *grads));
            for (h, &f) in g_high.iter_mut().zip(&g_fused) {
                *h += f;
            }
            let g_block = sam_backward(head.block.output(), &head.sam, &g_fused);
            let gx = block
                .backward(store, &head.block, &g_block, Some(&mut *grads), true)
                .expect("input gradient");
            g_final.add_assign(&gx);
        }
        if g_diag.is_none() && g_manif.is_none() {
            return;
        }

        let l = self.enc.len();
        let mut g_skip = Vec::with_capacity(l);
        let mut gy = g_final;
        for i in 0..l {
            let gc = self.dec[i]
                .backward(store, &cache.dec[i], &gy, Some(&mut *grads), true)
                .expect("input gradient");
            let (gu, gs) = gc.split_channels(cache.up_channels[i]);
            g_skip.push(gs);
            gy = upsample2_backward(&gu);
        }
        gy.add_assign(&gmp_backward(cache.bottom.output().shape(), &cache.gmp_arg, &g_high));
        let mut gx = self
            .bottom
            .backward(store, &cache.bottom, &gy, Some(&mut *grads), true)
            .expect("input gradient");

        let mut g_anat_next: Option<Tensor<T>> = None;
        for i in (0..l).rev() {
            let lc = &cache.levels[i];
            let (gp, mut gap) = self.aag[i].backward(store, &lc.aag, &gx, Some(&mut *grads));
            if let Some(g) = &g_anat_next {
                gap.add_assign(g);
            }
            let g_anat = max_pool2_backward(lc.anat_shape, &lc.anat_arg, &gap);
            g_anat_next = self.anat[i].backward(store, &lc.anat, &g_anat, Some(&mut *grads), i > 0);
            let mut ge = max_pool2_backward(lc.pre_pool_shape, &lc.pool_arg, &gp);
            ge.add_assign(&g_skip[i]);
            match self.enc[i].backward(store, &lc.enc, &ge, Some(&mut *grads), i > 0) {
                Some(g) => gx = g,
                None => break,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{central_difference, random_tensor, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            patch_extents: [16, 8, 8],
            manifestation_names: vec!["a".into(), "b".into(), "c".into()],
            encoder_channels: vec![2, 3, 3],
            bottom_channels: 4,
            anatomical_channels: vec![1, 2, 2],
            attention_levels: 3,
            head_stride: 2,
        }
    }

    fn fixture(seed: u64, nb: usize) -> (MultiTaskNet, ParamStore<f64>, Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = tiny_config();
        let net = MultiTaskNet::new(cfg.clone(), &mut store, &mut rng).unwrap();
        let [d, h, w] = cfg.patch_extents;
        let x = random_tensor([nb, 1, d, h, w], &mut rng);
        let p = random_tensor([nb, 1, d, h, w], &mut rng).map(|v| 0.5 + 0.5 * v);
        (net, store, x, p)
    }

    #[test]
    fn config_validation() {
        assert!(NetworkConfig::default().validate().is_ok());
        let mut c = NetworkConfig::default();
        c.attention_levels = 2;
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::default();
        c.patch_extents = [64, 64, 20];
        assert!(c.validate().is_err());
    }

    #[test]
    fn groups_partition_the_store() {
        let (_, store, _, _) = fixture(1, 1);
        let total: usize = ParamGroup::CLASSIFIER
            .iter()
            .map(|&g| store.params().iter().filter(|p| p.group == g).count())
            .sum();
        assert_eq!(total, store.len());
        for g in ParamGroup::CLASSIFIER {
            assert!(store.params().iter().any(|p| p.group == g), "{g:?} empty");
        }
    }

    #[test]
    fn output_shapes() {
        let (net, store, x, p) = fixture(2, 3);
        let (out, _) = net.forward(&store, &x, &p, &Mode::train(&[])).unwrap();
        assert_eq!(out.diag_logit.len(), 3);
        assert_eq!(out.manif_logits.len(), 9);
        assert_eq!(out.sam_extents, [8, 4, 4]);
        assert_eq!(out.sam_map_diag.len(), 3 * 128);
        assert_eq!(out.fused_diag.len(), 3 * 4);
    }

    #[test]
    fn zero_inputs_give_finite_outputs() {
        let (net, store, x, _) = fixture(3, 2);
        let z = Tensor::zeros(x.shape());
        for mode in [Mode::eval(), Mode::train(&[])] {
            let (out, _) = net.forward(&store, &z, &z, &mode).unwrap();
            assert!(out.all_finite());
        }
    }

    #[test]
    fn rejects_wrong_extents() {
        let (net, store, _, _) = fixture(4, 1);
        let x = Tensor::<f64>::zeros([1, 1, 8, 8, 8]);
        assert!(net.forward(&store, &x, &x, &Mode::eval()).is_err());
    }

    #[test]
    fn heads_are_independent() {
        let (net, store, x, p) = fixture(5, 2);
        let mode = Mode::train(&[]);
        let (base, _) = net.forward(&store, &x, &p, &mode).unwrap();
        let mut s = store.clone();
        s.zero_group(ParamGroup::ManifHead);
        let (out, _) = net.forward(&s, &x, &p, &mode).unwrap();
        assert_eq!(out.diag_logit, base.diag_logit);
        assert_ne!(out.manif_logits, base.manif_logits);
        let mut s = store.clone();
        s.zero_group(ParamGroup::DiagHead);
        let (out, _) = net.forward(&s, &x, &p, &mode).unwrap();
        assert_eq!(out.manif_logits, base.manif_logits);
    }

    #[test]
    fn forward_is_deterministic() {
        let (net, store, x, p) = fixture(6, 2);
        let a = net.forward(&store, &x, &p, &Mode::eval()).unwrap().0;
        let b = net.forward(&store, &x, &p, &Mode::eval()).unwrap().0;
        assert_eq!(a.diag_logit, b.diag_logit);
        assert_eq!(a.manif_logits, b.manif_logits);
        assert_eq!(a.sam_map_manif, b.sam_map_manif);
    }

    #[test]
    fn frozen_groups_keep_running_stats() {
        let (net, mut store, x, p) = fixture(7, 2);
        let before = store.group_values(ParamGroup::DiagHead);
        let (_, cache) = net.forward(&store, &x, &p, &Mode::train(&[ParamGroup::DiagHead])).unwrap();
        net.commit(&mut store, &cache);
        assert_eq!(store.group_values(ParamGroup::DiagHead), before);
        assert_ne!(store.group_values(ParamGroup::Extractor), {
            let (_, s, _, _) = fixture(7, 2);
            s.group_values(ParamGroup::Extractor)
        });
    }

    /// Linear probe of both heads' logits.
    fn probe_loss(net: &MultiTaskNet, st: &ParamStore<f64>, x: &Tensor<f64>, p: &Tensor<f64>, gd: &[f64], gm: &[f64]) -> f64 {
        let (out, _) = net.forward(st, x, p, &Mode::train(&[])).unwrap();
        out.diag_logit.iter().zip(gd).map(|(a, b)| a * b).sum::<f64>()
            + out.manif_logits.iter().zip(gm).map(|(a, b)| a * b).sum::<f64>()
    }

    #[test]
    fn sampled_parameter_gradients_match_finite_differences() {
        let (net, store, x, p) = fixture(8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let gd: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gm: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, cache) = net.forward(&store, &x, &p, &Mode::train(&[])).unwrap();
        let mut grads = store.zeros_like();
        net.backward(&store, &cache, Some(&gd), Some(&gm), &mut grads);
        let trainable: Vec<_> = store.ids().filter(|&id| store.param(id).trainable).collect();
        let mut worst = 0.0f64;
        for _ in 0..60 {
            let id = trainable[rng.random_range(0..trainable.len())];
            let i = rng.random_range(0..store.get(id).len());
            let numeric = central_difference(
                |v| {
                    let mut s = store.clone();
                    s.get_mut(id)[i] = v;
                    probe_loss(&net, &s, &x, &p, &gd, &gm)
                },
                store.get(id)[i],
            );
            let err = relative_error(grads.get(id)[i], numeric);
            assert!(err < 1e-4, "{} [{i}]: {} vs {numeric}", store.param(id).name, grads.get(id)[i]);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn skipped_head_contributes_nothing() {
        let (net, store, x, p) = fixture(9, 2);
        let (_, cache) = net.forward(&store, &x, &p, &Mode::train(&[ParamGroup::DiagHead])).unwrap();
        let mut grads = store.zeros_like();
        net.backward(&store, &cache, None, Some(&[1.0; 6]), &mut grads);
        for id in store.ids() {
            if store.param(id).group == ParamGroup::DiagHead {
                assert!(grads.get(id).iter().all(|&g| g == 0.0));
            }
        }
    }
}
