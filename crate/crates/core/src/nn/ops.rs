use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Grads, ParamGroup, ParamId, ParamStore, Real, Tensor};

pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through ReLU given the forward *output*.
pub fn relu_backward<T: Real>(y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let mut g = gy.clone();
    for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
        if yv <= T::zero() {
            *gv = T::zero();
        }
    }
    g
}

/// 2×2×2 max pooling, stride 2. Returns the pooled block and the flat
/// per-channel argmax of every output voxel.
pub fn max_pool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [n, c, d, h, w] = x.shape();
    assert!(
        d % 2 == 0 && h % 2 == 0 && w % 2 == 0,
        "max_pool2 needs even extents, got {:?}",
        x.spatial()
    );
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut y = Tensor::zeros([n, c, od, oh, ow]);
    let mut arg = Vec::with_capacity(y.len());
    for i in 0..n {
        for ch in 0..c {
            let src = x.channel(i, ch);
            let dst = y.channel_mut(i, ch);
            let mut o = 0;
            for a in 0..od {
                for b in 0..oh {
                    for e in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_idx = 0usize;
                        for da in 0..2 {
                            for db in 0..2 {
                                for de in 0..2 {
                                    let idx = ((2 * a + da) * h + 2 * b + db) * w + 2 * e + de;
                                    if src[idx] > best {
                                        best = src[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        dst[o] = best;
                        arg.push(best_idx as u32);
                        o += 1;
                    }
                }
            }
        }
    }
    (y, arg)
}

pub fn max_pool2_backward<T: Real>(input_shape: [usize; 5], arg: &[u32], gy: &Tensor<T>) -> Tensor<T> {
    let mut gx = Tensor::zeros(input_shape);
    let [n, c, ..] = input_shape;
    let vo = gy.voxels();
    for i in 0..n {
        for ch in 0..c {
            let g = gy.channel(i, ch);
            let a = &arg[(i * c + ch) * vo..(i * c + ch + 1) * vo];
            let dst = gx.channel_mut(i, ch);
            for (&gi, &ai) in g.iter().zip(a) {
                dst[ai as usize] += gi;
            }
        }
    }
    gx
}

/// Nearest-neighbour ×2 upsampling in every spatial axis.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, d, h, w] = x.shape();
    let mut y = Tensor::zeros([n, c, 2 * d, 2 * h, 2 * w]);
    for i in 0..n {
        for ch in 0..c {
            let src = x.channel(i, ch);
            let dst = y.channel_mut(i, ch);
            for a in 0..2 * d {
                for b in 0..2 * h {
                    let row = ((a / 2) * h + b / 2) * w;
                    let out = (a * 2 * h + b) * 2 * w;
                    for e in 0..2 * w {
                        dst[out + e] = src[row + e / 2];
                    }
                }
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(gy: &Tensor<T>) -> Tensor<T> {
    let [n, c, d2, h2, w2] = gy.shape();
    let (d, h, w) = (d2 / 2, h2 / 2, w2 / 2);
    let mut gx = Tensor::zeros([n, c, d, h, w]);
    for i in 0..n {
        for ch in 0..c {
            let src = gy.channel(i, ch);
            let dst = gx.channel_mut(i, ch);
            for a in 0..d2 {
                for b in 0..h2 {
                    let row = ((a / 2) * h + b / 2) * w;
                    let inp = (a * h2 + b) * w2;
                    for e in 0..w2 {
                        dst[row + e / 2] += src[inp + e];
                    }
                }
            }
        }
    }
    gx
}

/// Fully connected layer `y = W x + b` over row vectors.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let normal = Normal::new(0.0, (1.0 / inputs as f64).sqrt()).expect("valid std");
        let w = (0..inputs * outputs).map(|_| T::of(normal.sample(rng))).collect();
        Linear {
            weight: store.add(format!("{name}.weight"), group, vec![outputs, inputs], true, w),
            bias: store.add(format!("{name}.bias"), group, vec![outputs], true, vec![T::zero(); outputs]),
            inputs,
            outputs,
        }
    }

    /// `x` is `batch × inputs`, row-major.
    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &[T], batch: usize) -> Vec<T> {
        assert_eq!(x.len(), batch * self.inputs);
        let w = store.get(self.weight);
        let b = store.get(self.bias);
        let mut y = Vec::with_capacity(batch * self.outputs);
        for row in x.chunks(self.inputs) {
            for o in 0..self.outputs {
                let wr = &w[o * self.inputs..(o + 1) * self.inputs];
                let s: T = wr.iter().zip(row).map(|(&a, &b)| a * b).sum();
                y.push(s + b[o]);
            }
        }
        y
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &[T],
        gy: &[T],
        grads: Option<&mut Grads<T>>,
    ) -> Vec<T> {
        let w = store.get(self.weight);
        let batch = gy.len() / self.outputs;
        let mut gx = vec![T::zero(); batch * self.inputs];
        let mut grads = grads;
        for s in 0..batch {
            let xr = &x[s * self.inputs..(s + 1) * self.inputs];
            let gr = &gy[s * self.outputs..(s + 1) * self.outputs];
            let gxr = &mut gx[s * self.inputs..(s + 1) * self.inputs];
            for (o, &g) in gr.iter().enumerate() {
                for (i, gxv) in gxr.iter_mut().enumerate() {
                    *gxv += g * w[o * self.inputs + i];
                }
            }
            if let Some(grads) = grads.as_deref_mut() {
                let gw = grads.get_mut(self.weight);
                for (o, &g) in gr.iter().enumerate() {
                    for (i, &xv) in xr.iter().enumerate() {
                        gw[o * self.inputs + i] += g * xv;
                    }
                }
                let gb = grads.get_mut(self.bias);
                for (o, &g) in gr.iter().enumerate() {
                    gb[o] += g;
                }
            }
        }
        gx
    }
}
