use super::{Grads, ParamGroup, ParamId, ParamStore, Real, Tensor};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalisation over `N × D × H × W`.
#[derive(Debug, Clone)]
pub struct BatchNorm3d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    train: bool,
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    batch_mean: Vec<T>,
    batch_var_unbiased: Vec<T>,
}

impl BatchNorm3d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, channels: usize) -> Self {
        let c = channels;
        BatchNorm3d {
            gamma: store.add(format!("{name}.gamma"), group, vec![c], true, vec![T::one(); c]),
            beta: store.add(format!("{name}.beta"), group, vec![c], true, vec![T::zero(); c]),
            running_mean: store.add(format!("{name}.running_mean"), group, vec![c], false, vec![T::zero(); c]),
            running_var: store.add(format!("{name}.running_var"), group, vec![c], false, vec![T::one(); c]),
            channels,
        }
    }

    /// `train` selects batch statistics; otherwise running statistics are used.
    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>, train: bool) -> (Tensor<T>, BnCache<T>) {
        assert_eq!(x.channels(), self.channels, "batchnorm channels");
        let n = x.batch();
        let v = x.voxels();
        let m = n * v;
        let eps = T::of(BN_EPS);
        let gamma = store.get(self.gamma);
        let beta = store.get(self.beta);
        let mut mean = vec![T::zero(); self.channels];
        let mut var = vec![T::zero(); self.channels];
        let mut var_unbiased = vec![T::zero(); self.channels];
        if train {
            for c in 0..self.channels {
                let mut s = 0.0f64;
                for i in 0..n {
                    s += x.channel(i, c).iter().map(|v| v.to_f64().unwrap()).sum::<f64>();
                }
                let mu = s / m as f64;
                let mut ss = 0.0f64;
                for i in 0..n {
                    ss += x
                        .channel(i, c)
                        .iter()
                        .map(|v| {
                            let d = v.to_f64().unwrap() - mu;
                            d * d
                        })
                        .sum::<f64>();
                }
                mean[c] = T::of(mu);
                var[c] = T::of(ss / m as f64);
                var_unbiased[c] = T::of(if m > 1 { ss / (m - 1) as f64 } else { 0.0 });
            }
        } else {
            mean.copy_from_slice(store.get(self.running_mean));
            var.copy_from_slice(store.get(self.running_var));
        }
        let inv_std: Vec<T> = var.iter().map(|&s| T::one() / (s + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for i in 0..n {
            for c in 0..self.channels {
                let src = x.channel(i, c);
                let xh = xhat.channel_mut(i, c);
                for (dst, &s) in xh.iter_mut().zip(src) {
                    *dst = (s - mean[c]) * inv_std[c];
                }
                let yc = y.channel_mut(i, c);
                for (dst, &h) in yc.iter_mut().zip(xhat.channel(i, c)) {
                    *dst = gamma[c] * h + beta[c];
                }
            }
        }
        let cache = BnCache {
            train,
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var_unbiased: var_unbiased,
        };
        (y, cache)
    }

    /// Folds the batch statistics of a training-mode pass into the running estimates.
    pub fn commit<T: Real>(&self, store: &mut ParamStore<T>, cache: &BnCache<T>) {
        if !cache.train {
            return;
        }
        let mom = T::of(BN_MOMENTUM);
        let keep = T::one() - mom;
        for (r, &b) in store.get_mut(self.running_mean).iter_mut().zip(&cache.batch_mean) {
            *r = keep * *r + mom * b;
        }
        for (r, &b) in store
            .get_mut(self.running_var)
            .iter_mut()
            .zip(&cache.batch_var_unbiased)
        {
            *r = keep * *r + mom * b;
        }
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &BnCache<T>,
        gy: &Tensor<T>,
        grads: Option<&mut Grads<T>>,
    ) -> Tensor<T> {
        let n = gy.batch();
        let v = gy.voxels();
        let m = T::of((n * v) as f64);
        let gamma = store.get(self.gamma);
        let mut gx = Tensor::zeros(gy.shape());
        let mut grads = grads;
        for c in 0..self.channels {
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for i in 0..n {
                for (&g, &h) in gy.channel(i, c).iter().zip(cache.xhat.channel(i, c)) {
                    sum_g += g;
                    sum_gx += g * h;
                }
            }
            if let Some(grads) = grads.as_deref_mut() {
                grads.get_mut(self.gamma)[c] += sum_gx;
                grads.get_mut(self.beta)[c] += sum_g;
            }
            let k = gamma[c] * cache.inv_std[c];
            for i in 0..n {
                let g = gy.channel(i, c);
                let h = cache.xhat.channel(i, c);
                let out = gx.channel_mut(i, c);
                if cache.train {
                    for j in 0..v {
                        out[j] = k / m * (m * g[j] - sum_g - h[j] * sum_gx);
                    }
                } else {
                    for j in 0..v {
                        out[j] = k * g[j];
                    }
                }
            }
        }
        gx
    }
}
