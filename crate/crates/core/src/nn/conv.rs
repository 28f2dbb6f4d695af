use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Grads, ParamGroup, ParamId, ParamStore, Real, Tensor};

/// Cubic 3D convolution with zero padding `k / 2`.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv3d {
    /// He-style fan-in initialisation, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        assert!(stride >= 1);
        let fan_in = cin * kernel * kernel * kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let w: Vec<T> = (0..cout * fan_in)
            .map(|_| T::of(normal.sample(rng)))
            .collect();
        let weight = store.add(
            format!("{name}.weight"),
            group,
            vec![cout, cin, kernel, kernel, kernel],
            true,
            w,
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                group,
                vec![cout],
                true,
                vec![T::zero(); cout],
            )
        });
        Conv3d {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
        }
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_spatial(&self, input: [usize; 3]) -> [usize; 3] {
        let p = self.pad();
        input.map(|d| (d + 2 * p - self.kernel) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels(), self.cin, "conv input channels");
        let n = x.batch();
        let ins = x.spatial();
        let outs = self.out_spatial(ins);
        let vout: usize = outs.iter().product();
        let ck = self.cin * self.kernel.pow(3);
        let w = store.get(self.weight);
        let mut y = Tensor::zeros([n, self.cout, outs[0], outs[1], outs[2]]);
        let mut col = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); ck * vout]
        };
        for s in 0..n {
            let src: &[T] = if self.is_pointwise() {
                x.sample(s)
            } else {
                im2col(x.sample(s), self.cin, ins, self.kernel, self.stride, outs, &mut col);
                &col
            };
            let out = y.sample_mut(s);
            T::gemm(
                self.cout, ck, vout, T::one(), w, ck as isize, 1, src, vout as isize, 1,
                T::zero(), out, vout as isize, 1,
            );
            if let Some(b) = self.bias {
                let b = store.get(b);
                for (c, chunk) in out.chunks_mut(vout).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += b[c]);
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grads` (when given) and returns
    /// the input gradient when `want_input` is set.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        gy: &Tensor<T>,
        grads: Option<&mut Grads<T>>,
        want_input: bool,
    ) -> Option<Tensor<T>> {
        let n = x.batch();
        let ins = x.spatial();
        let outs = self.out_spatial(ins);
        assert_eq!(gy.spatial(), outs, "conv grad spatial");
        let vout: usize = outs.iter().product();
        let ck = self.cin * self.kernel.pow(3);
        let w = store.get(self.weight);
        let mut gx = want_input.then(|| Tensor::zeros(x.shape()));
        let mut col = vec![T::zero(); if self.is_pointwise() { 0 } else { ck * vout }];
        let mut gcol = vec![T::zero(); if want_input { ck * vout } else { 0 }];

        let mut grads = grads;
        for s in 0..n {
            let g = gy.sample(s);
            if let Some(grads) = grads.as_deref_mut() {
                let src: &[T] = if self.is_pointwise() {
                    x.sample(s)
                } else {
                    im2col(x.sample(s), self.cin, ins, self.kernel, self.stride, outs, &mut col);
                    &col
                };
                T::gemm(
                    self.cout, vout, ck, T::one(), g, vout as isize, 1, src, 1, vout as isize,
                    T::one(), grads.get_mut(self.weight), ck as isize, 1,
                );
                if let Some(b) = self.bias {
                    let gb = grads.get_mut(b);
                    for (c, chunk) in g.chunks(vout).enumerate() {
                        gb[c] += chunk.iter().copied().sum::<T>();
                    }
                }
            }
            if let Some(gx) = gx.as_mut() {
                if self.is_pointwise() {
                    T::gemm(
                        ck, self.cout, vout, T::one(), w, 1, ck as isize, g, vout as isize, 1,
                        T::zero(), gx.sample_mut(s), vout as isize, 1,
                    );
                } else {
                    T::gemm(
                        ck, self.cout, vout, T::one(), w, 1, ck as isize, g, vout as isize, 1,
                        T::zero(), &mut gcol, vout as isize, 1,
                    );
                    col2im(&gcol, self.cin, ins, self.kernel, self.stride, outs, gx.sample_mut(s));
                }
            }
        }
        gx
    }
}

/// Per-sample `C × V` input to a `(C·k³) × V_out` patch matrix.
fn im2col<T: Real>(
    x: &[T],
    cin: usize,
    ins: [usize; 3],
    k: usize,
    stride: usize,
    outs: [usize; 3],
    col: &mut [T],
) {
    let pad = (k / 2) as isize;
    let [id, ih, iw] = ins;
    let [od, oh, ow] = outs;
    let vin = id * ih * iw;
    let vout = od * oh * ow;
    let mut row = 0;
    for c in 0..cin {
        let xc = &x[c * vin..(c + 1) * vin];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let dst = &mut col[row * vout..(row + 1) * vout];
                    let mut o = 0;
                    for zd in 0..od {
                        let sd = (zd * stride) as isize + kd as isize - pad;
                        let d_ok = sd >= 0 && (sd as usize) < id;
                        for zh in 0..oh {
                            let sh = (zh * stride) as isize + kh as isize - pad;
                            if !d_ok || sh < 0 || sh as usize >= ih {
                                dst[o..o + ow].iter_mut().for_each(|v| *v = T::zero());
                                o += ow;
                                continue;
                            }
                            let base = (sd as usize * ih + sh as usize) * iw;
                            for zw in 0..ow {
                                let sw = (zw * stride) as isize + kw as isize - pad;
                                dst[o] = if sw >= 0 && (sw as usize) < iw {
                                    xc[base + sw as usize]
                                } else {
                                    T::zero()
                                };
                                o += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<T: Real>(
    col: &[T],
    cin: usize,
    ins: [usize; 3],
    k: usize,
    stride: usize,
    outs: [usize; 3],
    gx: &mut [T],
) {
    let pad = (k / 2) as isize;
    let [id, ih, iw] = ins;
    let [od, oh, ow] = outs;
    let vin = id * ih * iw;
    let vout = od * oh * ow;
    gx.iter_mut().for_each(|v| *v = T::zero());
    let mut row = 0;
    for c in 0..cin {
        let gc = &mut gx[c * vin..(c + 1) * vin];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let src = &col[row * vout..(row + 1) * vout];
                    let mut o = 0;
                    for zd in 0..od {
                        let sd = (zd * stride) as isize + kd as isize - pad;
                        let d_ok = sd >= 0 && (sd as usize) < id;
                        for zh in 0..oh {
                            let sh = (zh * stride) as isize + kh as isize - pad;
                            if !d_ok || sh < 0 || sh as usize >= ih {
                                o += ow;
                                continue;
                            }
                            let base = (sd as usize * ih + sh as usize) * iw;
                            for zw in 0..ow {
                                let sw = (zw * stride) as isize + kw as isize - pad;
                                if sw >= 0 && (sw as usize) < iw {
                                    gc[base + sw as usize] += src[o];
                                }
                                o += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct seven-loop convolution.
    fn naive(store: &ParamStore<f64>, conv: &Conv3d, x: &Tensor<f64>) -> Tensor<f64> {
        let [n, _, d, h, w] = x.shape();
        let outs = conv.out_spatial([d, h, w]);
        let k = conv.kernel;
        let p = (k / 2) as isize;
        let wt = store.get(conv.weight);
        let mut y = Tensor::zeros([n, conv.cout, outs[0], outs[1], outs[2]]);
        for s in 0..n {
            for co in 0..conv.cout {
                for a in 0..outs[0] {
                    for b in 0..outs[1] {
                        for c in 0..outs[2] {
                            let mut acc = conv.bias.map_or(0.0, |id| store.get(id)[co]);
                            for ci in 0..conv.cin {
                                for kd in 0..k {
                                    for kh in 0..k {
                                        for kw in 0..k {
                                            let zd = (a * conv.stride) as isize + kd as isize - p;
                                            let zh = (b * conv.stride) as isize + kh as isize - p;
                                            let zw = (c * conv.stride) as isize + kw as isize - p;
                                            if zd < 0 || zh < 0 || zw < 0 {
                                                continue;
                                            }
                                            let (zd, zh, zw) = (zd as usize, zh as usize, zw as usize);
                                            if zd >= d || zh >= h || zw >= w {
                                                continue;
                                            }
                                            let wi = (((co * conv.cin + ci) * k + kd) * k + kh) * k + kw;
                                            acc += wt[wi] * x.channel(s, ci)[(zd * h + zh) * w + zw];
                                        }
                                    }
                                }
                            }
                            y.channel_mut(s, co)[(a * outs[1] + b) * outs[2] + c] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    fn random_tensor(shape: [usize; 5], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn forward_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, stride) in &[(3, 1), (3, 2), (1, 2), (1, 1)] {
            let mut store = ParamStore::new();
            let conv = Conv3d::new(&mut store, "c", ParamGroup::Extractor, 2, 3, k, stride, true, &mut rng);
            store.get_mut(conv.bias.unwrap()).copy_from_slice(&[0.1, -0.2, 0.3]);
            let x = random_tensor([2, 2, 5, 4, 6], &mut rng);
            let fast = conv.forward(&store, &x);
            let slow = naive(&store, &conv, &x);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "k={k} s={stride}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(k, stride) in &[(3, 1), (3, 2), (1, 2)] {
            let mut store = ParamStore::new();
            let conv = Conv3d::new(&mut store, "c", ParamGroup::Extractor, 2, 2, k, stride, true, &mut rng);
            let x = random_tensor([2, 2, 4, 3, 5], &mut rng);
            let y = conv.forward(&store, &x);
            let r = random_tensor(y.shape(), &mut rng);
            let loss = |st: &ParamStore<f64>, x: &Tensor<f64>| -> f64 {
                conv.forward(st, x).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
            };
            let mut grads = store.zeros_like();
            let gx = conv.backward(&store, &x, &r, Some(&mut grads), true).unwrap();
            let h = 1e-6;
            for i in (0..x.len()).step_by(7) {
                let mut xp = x.clone();
                xp.data_mut()[i] += h;
                let mut xm = x.clone();
                xm.data_mut()[i] -= h;
                let fd = (loss(&store, &xp) - loss(&store, &xm)) / (2.0 * h);
                assert!((fd - gx.data()[i]).abs() < 1e-7, "input grad {i}");
            }
            for id in [conv.weight, conv.bias.unwrap()] {
                for i in 0..store.get(id).len() {
                    let mut sp = store.clone();
                    sp.get_mut(id)[i] += h;
                    let mut sm = store.clone();
                    sm.get_mut(id)[i] -= h;
                    let fd = (loss(&sp, &x) - loss(&sm, &x)) / (2.0 * h);
                    assert!((fd - grads.get(id)[i]).abs() < 1e-7, "param grad");
                }
            }
        }
    }
}
