//! Anatomical attention gate, soft activation mapping and global max pooling.

use rand::Rng;

use crate::error::{ensure_shape, Result};
use crate::nn::ops::sigmoid;
use crate::nn::{Conv3d, Grads, ParamGroup, ParamStore, Real, Tensor};

/// Dual sigmoid gate over concatenated image and ROI features:
/// `out = f ⊙ g₁ + f ⊙ g₂`, with each `gᵢ = σ(conv1×1(f ‖ r))` single-channel.
#[derive(Debug, Clone)]
pub struct AagGate {
    pub gate1: Conv3d,
    pub gate2: Conv3d,
    pub image_channels: usize,
    pub roi_channels: usize,
}

#[derive(Debug, Clone)]
pub struct AagCache<T> {
    cat: Tensor<T>,
    image: Tensor<T>,
    pub g1: Tensor<T>,
    pub g2: Tensor<T>,
}

impl AagGate {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        image_channels: usize,
        roi_channels: usize,
        rng: &mut R,
    ) -> Self {
        let cin = image_channels + roi_channels;
        let g = ParamGroup::AagModules;
        AagGate {
            gate1: Conv3d::new(store, &format!("{name}.gate1"), g, cin, 1, 1, 1, true, rng),
            gate2: Conv3d::new(store, &format!("{name}.gate2"), g, cin, 1, 1, 1, true, rng),
            image_channels,
            roi_channels,
        }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, image: &Tensor<T>, roi: &Tensor<T>) -> Result<(Tensor<T>, AagCache<T>)> {
        ensure_shape(&image.spatial(), &roi.spatial())?;
        ensure_shape(&[self.image_channels, self.roi_channels], &[image.channels(), roi.channels()])?;
        let cat = Tensor::concat_channels(image, roi);
        let g1 = self.gate1.forward(store, &cat).map(sigmoid);
        let g2 = self.gate2.forward(store, &cat).map(sigmoid);
        let mut out = image.clone();
        let v = image.voxels();
        for n in 0..image.batch() {
            let (a, b) = (&g1.sample(n)[..v], &g2.sample(n)[..v]);
            for c in 0..image.channels() {
                for (x, o) in out.channel_mut(n, c).iter_mut().enumerate() {
                    *o *= a[x] + b[x];
                }
            }
        }
        Ok((out, AagCache { cat, image: image.clone(), g1, g2 }))
    }

    /// Returns gradients with respect to the image and ROI inputs.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &AagCache<T>,
        gy: &Tensor<T>,
        mut grads: Option<&mut Grads<T>>,
    ) -> (Tensor<T>, Tensor<T>) {
        let f = &cache.image;
        let v = f.voxels();
        let mut gf = gy.clone();
        let mut gz1 = Tensor::zeros(cache.g1.shape());
        let mut gz2 = Tensor::zeros(cache.g2.shape());
        for n in 0..f.batch() {
            let (a, b) = (cache.g1.sample(n), cache.g2.sample(n));
            let mut gg = vec![T::zero(); v];
            for c in 0..f.channels() {
                let fc = f.channel(n, c);
                let gc = gy.channel(n, c);
                for x in 0..v {
                    gg[x] += gc[x] * fc[x];
                }
                for (x, o) in gf.channel_mut(n, c).iter_mut().enumerate() {
                    *o *= a[x] + b[x];
                }
            }
            let (z1, z2) = (gz1.sample_mut(n), gz2.sample_mut(n));
            for x in 0..v {
                z1[x] = gg[x] * a[x] * (T::one() - a[x]);
            }
            for x in 0..v {
                z2[x] = gg[x] * b[x] * (T::one() - b[x]);
            }
        }
        let mut gcat = self
            .gate1
            .backward(store, &cache.cat, &gz1, grads.as_deref_mut(), true)
            .expect("input gradient");
        let g2cat = self
            .gate2
            .backward(store, &cache.cat, &gz2, grads, true)
            .expect("input gradient");
        gcat.add_assign(&g2cat);
        let (gf_cat, groi) = gcat.split_channels(self.image_channels);
        gf.add_assign(&gf_cat);
        (gf, groi)
    }
}

/// Free-function form of [`AagGate::forward`].
pub fn aag_gate<T: Real>(
    store: &ParamStore<T>,
    gate: &AagGate,
    image_feats: &Tensor<T>,
    roi_feats: &Tensor<T>,
) -> Result<(Tensor<T>, AagCache<T>)> {
    gate.forward(store, image_feats, roi_feats)
}

/// Soft activation map and weighted feature vector per sample.
#[derive(Debug, Clone)]
pub struct SamOutput<T> {
    /// `batch × voxels` channel-mean absolute activation.
    pub maps: Vec<T>,
    /// `batch × voxels` softnorm weights.
    pub weights: Vec<T>,
    /// `batch × channels` weighted feature vectors.
    pub vectors: Vec<T>,
    /// Per sample: activation sum was zero and uniform weights were used.
    pub uniform: Vec<bool>,
}

pub fn sam_module<T: Real>(feats: &Tensor<T>) -> SamOutput<T> {
    let (nb, nc, v) = (feats.batch(), feats.channels(), feats.voxels());
    let inv_c = T::one() / T::of(nc as f64);
    let mut maps = vec![T::zero(); nb * v];
    let mut weights = vec![T::zero(); nb * v];
    let mut vectors = vec![T::zero(); nb * nc];
    let mut uniform = vec![false; nb];
    for n in 0..nb {
        let map = &mut maps[n * v..(n + 1) * v];
        for c in 0..nc {
            for (m, &f) in map.iter_mut().zip(feats.channel(n, c)) {
                *m += f.abs();
            }
        }
        for m in map.iter_mut() {
            *m *= inv_c;
        }
        let total: T = map.iter().copied().sum();
        let w = &mut weights[n * v..(n + 1) * v];
        if total > T::zero() {
            for (wx, &m) in w.iter_mut().zip(map.iter()) {
                *wx = m / total;
            }
        } else {
            uniform[n] = true;
            w.fill(T::one() / T::of(v as f64));
        }
        for c in 0..nc {
            vectors[n * nc + c] = feats.channel(n, c).iter().zip(w.iter()).map(|(&f, &wx)| f * wx).sum();
        }
    }
    SamOutput { maps, weights, vectors, uniform }
}

/// Gradient of [`sam_module`]'s feature vectors with respect to `feats`.
/// The activation maps themselves are treated as outputs without a loss.
pub fn sam_backward<T: Real>(feats: &Tensor<T>, out: &SamOutput<T>, gvec: &[T]) -> Tensor<T> {
    let (nb, nc, v) = (feats.batch(), feats.channels(), feats.voxels());
    let inv_c = T::one() / T::of(nc as f64);
    let mut gf = Tensor::zeros(feats.shape());
    for n in 0..nb {
        let w = &out.weights[n * v..(n + 1) * v];
        let gv = &gvec[n * nc..(n + 1) * nc];
        // direct term: ∂vec_c/∂f_c(x) = w(x)
        for c in 0..nc {
            let g = gv[c];
            for (o, &wx) in gf.channel_mut(n, c).iter_mut().zip(w) {
                *o = g * wx;
            }
        }
        if out.uniform[n] {
            continue;
        }
        let map = &out.maps[n * v..(n + 1) * v];
        let total: T = map.iter().copied().sum();
        let mut gw = vec![T::zero(); v];
        for c in 0..nc {
            for (gx, &f) in gw.iter_mut().zip(feats.channel(n, c)) {
                *gx += gv[c] * f;
            }
        }
        let mean: T = gw.iter().zip(w).map(|(&g, &wx)| g * wx).sum();
        let ga: Vec<T> = gw.iter().map(|&g| (g - mean) / total).collect();
        for c in 0..nc {
            let fc = feats.channel(n, c).to_vec();
            for (x, o) in gf.channel_mut(n, c).iter_mut().enumerate() {
                let s = if fc[x] > T::zero() {
                    T::one()
                } else if fc[x] < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                *o += ga[x] * s * inv_c;
            }
        }
    }
    gf
}

/// Per-channel spatial maximum; returns `batch × channels` values and the
/// flat voxel index of the first maximum.
pub fn gmp<T: Real>(feats: &Tensor<T>) -> (Vec<T>, Vec<usize>) {
    let (nb, nc) = (feats.batch(), feats.channels());
    let mut vals = Vec::with_capacity(nb * nc);
    let mut arg = Vec::with_capacity(nb * nc);
    for n in 0..nb {
        for c in 0..nc {
            let ch = feats.channel(n, c);
            let mut best = 0;
            for (i, &x) in ch.iter().enumerate() {
                if x > ch[best] {
                    best = i;
                }
            }
            vals.push(ch[best]);
            arg.push(best);
        }
    }
    (vals, arg)
}

pub fn gmp_backward<T: Real>(shape: [usize; 5], arg: &[usize], gvec: &[T]) -> Tensor<T> {
    let mut g = Tensor::zeros(shape);
    let nc = shape[1];
    for (i, (&a, &gv)) in arg.iter().zip(gvec).enumerate() {
        g.channel_mut(i / nc, i % nc)[a] += gv;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_input_grad, check_param_grads, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gate_fixture(seed: u64) -> (ParamStore<f64>, AagGate, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let gate = AagGate::new(&mut store, "aag", 3, 2, &mut rng);
        (store, gate, rng)
    }

    #[test]
    fn gates_strictly_inside_unit_interval() {
        let (store, gate, mut rng) = gate_fixture(1);
        let f = random_tensor([2, 3, 3, 3, 2], &mut rng).map(|v| v * 5.0);
        let r = random_tensor([2, 2, 3, 3, 2], &mut rng).map(|v| v * 5.0);
        let (_, cache) = gate.forward(&store, &f, &r).unwrap();
        for &g in cache.g1.data().iter().chain(cache.g2.data()) {
            assert!(g > 0.0 && g < 1.0);
        }
    }

    #[test]
    fn saturated_gates() {
        let (mut store, gate, mut rng) = gate_fixture(2);
        let f = random_tensor([1, 3, 2, 2, 2], &mut rng);
        let r = random_tensor([1, 2, 2, 2, 2], &mut rng);
        for conv in [&gate.gate1, &gate.gate2] {
            store.get_mut(conv.weight).fill(0.0);
        }
        // one gate open, the other closed: identity
        store.get_mut(gate.gate1.bias.unwrap())[0] = 100.0;
        store.get_mut(gate.gate2.bias.unwrap())[0] = -100.0;
        let (out, _) = gate.forward(&store, &f, &r).unwrap();
        for (a, b) in out.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // both open: the two pathways add
        store.get_mut(gate.gate2.bias.unwrap())[0] = 100.0;
        let (out, _) = gate.forward(&store, &f, &r).unwrap();
        for (a, b) in out.data().iter().zip(f.data()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn aag_rejects_spatial_mismatch() {
        let (store, gate, _) = gate_fixture(3);
        let f = Tensor::<f64>::zeros([1, 3, 2, 2, 2]);
        let r = Tensor::<f64>::zeros([1, 2, 2, 2, 1]);
        assert!(gate.forward(&store, &f, &r).is_err());
    }

    #[test]
    fn aag_gradients_match_finite_differences() {
        let (store, gate, mut rng) = gate_fixture(4);
        let f = random_tensor([1, 3, 8, 8, 8], &mut rng);
        let r = random_tensor([1, 2, 8, 8, 8], &mut rng);
        let probe = random_tensor([1, 3, 8, 8, 8], &mut rng);
        let loss = |st: &ParamStore<f64>, f: &Tensor<f64>, r: &Tensor<f64>| -> f64 {
            let (o, _) = gate.forward(st, f, r).unwrap();
            o.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = gate.forward(&store, &f, &r).unwrap();
        let mut grads = store.zeros_like();
        let (gf, gr) = gate.backward(&store, &cache, &probe, Some(&mut grads));
        check_input_grad(&|st, x| loss(st, x, &r), &store, &f, &gf, 1e-4);
        check_input_grad(&|st, x| loss(st, &f, x), &store, &r, &gr, 1e-4);
        let ids: Vec<_> = store.ids().collect();
        check_param_grads(&|st, x| loss(st, x, &r), &store, &f, &grads, &ids, 1e-4);
    }

    #[test]
    fn sam_constant_features() {
        let f = Tensor::<f64>::filled([1, 3, 2, 3, 2], 2.5);
        let out = sam_module(&f);
        assert!(out.maps.iter().all(|&m| (m - 2.5).abs() < 1e-12));
        assert!(out.vectors.iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn sam_delta_features() {
        let mut f = Tensor::<f64>::zeros([1, 3, 3, 3, 3]);
        for (c, v) in [1.0, -2.0, 0.5].into_iter().enumerate() {
            f.channel_mut(0, c)[13] = v;
        }
        let out = sam_module(&f);
        assert_eq!(out.vectors, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn sam_zero_features_use_uniform_weights() {
        let f = Tensor::<f64>::zeros([1, 2, 2, 2, 2]);
        let out = sam_module(&f);
        assert!(out.uniform[0]);
        assert!(out.weights.iter().all(|&w| w == 0.125));
        assert!(out.vectors.iter().all(|v| v.is_finite()));
    }

    /// Naive loops over (n, c, x) with the activation recomputed per voxel.
    fn sam_oracle(f: &Tensor<f64>) -> Vec<f64> {
        let [nb, nc, d, h, w] = f.shape();
        let v = d * h * w;
        let mut out = vec![];
        for n in 0..nb {
            let act = |x: usize| (0..nc).map(|c| f.channel(n, c)[x].abs()).sum::<f64>() / nc as f64;
            let total: f64 = (0..v).map(act).sum();
            for c in 0..nc {
                let mut s = 0.0;
                for x in 0..v {
                    s += act(x) / total * f.channel(n, c)[x];
                }
                out.push(s);
            }
        }
        out
    }

    #[test]
    fn sam_matches_loop_oracle_and_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_tensor([3, 4, 3, 4, 5], &mut rng);
        let out = sam_module(&f);
        for (a, b) in out.vectors.iter().zip(sam_oracle(&f)) {
            assert!((a - b).abs() < 1e-9);
        }
        for n in 0..3 {
            let s: f64 = out.weights[n * 60..(n + 1) * 60].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sam_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = random_tensor([2, 3, 4, 4, 4], &mut rng);
        let probe: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let store = ParamStore::<f64>::new();
        let loss = |_: &ParamStore<f64>, x: &Tensor<f64>| -> f64 {
            sam_module(x).vectors.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let gf = sam_backward(&f, &sam_module(&f), &probe);
        check_input_grad(&loss, &store, &f, &gf, 1e-4);
    }

    #[test]
    fn gmp_examples_and_oracle() {
        let f = Tensor::<f64>::filled([1, 2, 2, 2, 2], 3.0);
        assert_eq!(gmp(&f).0, vec![3.0, 3.0]);
        let mut f = Tensor::<f64>::zeros([1, 2, 2, 2, 2]);
        f.channel_mut(0, 1)[5] = 9.0;
        assert_eq!(gmp(&f).0, vec![0.0, 9.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random_tensor([2, 3, 3, 2, 4], &mut rng);
        let (vals, _) = gmp(&f);
        let [nb, nc, ..] = f.shape();
        for n in 0..nb {
            for c in 0..nc {
                let mut m = f64::NEG_INFINITY;
                for &x in f.channel(n, c) {
                    if x > m {
                        m = x;
                    }
                }
                assert_eq!(vals[n * nc + c], m);
            }
        }
    }

    #[test]
    fn gmp_gradient_routes_to_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = random_tensor([2, 2, 2, 3, 2], &mut rng);
        let probe = vec![0.3, -1.2, 0.7, 2.0];
        let store = ParamStore::<f64>::new();
        let loss = |_: &ParamStore<f64>, x: &Tensor<f64>| -> f64 { gmp(x).0.iter().zip(&probe).map(|(a, b)| a * b).sum() };
        let (_, arg) = gmp(&f);
        let gf = gmp_backward(f.shape(), &arg, &probe);
        check_input_grad(&loss, &store, &f, &gf, 1e-6);
    }
}
