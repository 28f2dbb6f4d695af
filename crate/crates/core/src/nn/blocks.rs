//! Composite blocks shared by the segmenter and the classifier.

use rand::Rng;

use super::norm::BnCache;
use super::ops::{relu, relu_backward};
use super::{BatchNorm3d, Conv3d, Grads, ParamGroup, ParamStore, Real, Tensor};

/// 3×3×3 convolution (no bias) → batch norm → ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv3d,
    pub bn: BatchNorm3d,
}

#[derive(Debug, Clone)]
pub struct ConvBnReluCache<T> {
    input: Tensor<T>,
    bn: BnCache<T>,
    output: Tensor<T>,
}

impl<T> ConvBnReluCache<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }
}

impl ConvBnRelu {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        ConvBnRelu {
            conv: Conv3d::new(store, &format!("{name}.conv"), group, cin, cout, 3, 1, false, rng),
            bn: BatchNorm3d::new(store, &format!("{name}.bn"), group, cout),
        }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>, train: bool) -> ConvBnReluCache<T> {
        let z = self.conv.forward(store, x);
        let (b, bn) = self.bn.forward(store, &z, train);
        ConvBnReluCache {
            input: x.clone(),
            bn,
            output: relu(&b),
        }
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &ConvBnReluCache<T>,
        gy: &Tensor<T>,
        mut grads: Option<&mut Grads<T>>,
        want_input: bool,
    ) -> Option<Tensor<T>> {
        let g = relu_backward(&cache.output, gy);
        let g = self.bn.backward(store, &cache.bn, &g, grads.as_deref_mut());
        self.conv.backward(store, &cache.input, &g, grads, want_input)
    }

    pub fn commit<T: Real>(&self, store: &mut ParamStore<T>, cache: &ConvBnReluCache<T>) {
        self.bn.commit(store, &cache.bn);
    }
}

/// Two stacked [`ConvBnRelu`] units, the per-level unit of the U-Nets.
#[derive(Debug, Clone)]
pub struct DoubleConv {
    pub first: ConvBnRelu,
    pub second: ConvBnRelu,
}

#[derive(Debug, Clone)]
pub struct DoubleConvCache<T> {
    first: ConvBnReluCache<T>,
    second: ConvBnReluCache<T>,
}

impl<T> DoubleConvCache<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.second.output()
    }
}

impl DoubleConv {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Self {
        DoubleConv {
            first: ConvBnRelu::new(store, &format!("{name}.0"), group, cin, cout, rng),
            second: ConvBnRelu::new(store, &format!("{name}.1"), group, cout, cout, rng),
        }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>, train: bool) -> DoubleConvCache<T> {
        let first = self.first.forward(store, x, train);
        let second = self.second.forward(store, first.output(), train);
        DoubleConvCache { first, second }
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &DoubleConvCache<T>,
        gy: &Tensor<T>,
        mut grads: Option<&mut Grads<T>>,
        want_input: bool,
    ) -> Option<Tensor<T>> {
        let g = self
            .second
            .backward(store, &cache.second, gy, grads.as_deref_mut(), true)
            .expect("inner gradient");
        self.first.backward(store, &cache.first, &g, grads, want_input)
    }

    pub fn commit<T: Real>(&self, store: &mut ParamStore<T>, cache: &DoubleConvCache<T>) {
        self.first.commit(store, &cache.first);
        self.second.commit(store, &cache.second);
    }
}

/// Basic residual block with a strided first convolution and a projected
/// 1×1×1 shortcut.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv3d,
    pub bn1: BatchNorm3d,
    pub conv2: Conv3d,
    pub bn2: BatchNorm3d,
    pub shortcut: Conv3d,
    pub bn_short: BatchNorm3d,
}

#[derive(Debug, Clone)]
pub struct ResBlockCache<T> {
    input: Tensor<T>,
    bn1: BnCache<T>,
    mid: Tensor<T>,
    bn2: BnCache<T>,
    bn_short: BnCache<T>,
    output: Tensor<T>,
}

impl<T> ResBlockCache<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }
}

impl ResBlock {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        ResBlock {
            conv1: Conv3d::new(store, &format!("{name}.conv1"), group, cin, cout, 3, stride, false, rng),
            bn1: BatchNorm3d::new(store, &format!("{name}.bn1"), group, cout),
            conv2: Conv3d::new(store, &format!("{name}.conv2"), group, cout, cout, 3, 1, false, rng),
            bn2: BatchNorm3d::new(store, &format!("{name}.bn2"), group, cout),
            shortcut: Conv3d::new(store, &format!("{name}.short"), group, cin, cout, 1, stride, false, rng),
            bn_short: BatchNorm3d::new(store, &format!("{name}.bn_short"), group, cout),
        }
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>, train: bool) -> ResBlockCache<T> {
        let (a, bn1) = self.bn1.forward(store, &self.conv1.forward(store, x), train);
        let mid = relu(&a);
        let (mut b, bn2) = self.bn2.forward(store, &self.conv2.forward(store, &mid), train);
        let (s, bn_short) = self.bn_short.forward(store, &self.shortcut.forward(store, x), train);
        b.add_assign(&s);
        ResBlockCache {
            input: x.clone(),
            bn1,
            mid,
            bn2,
            bn_short,
            output: relu(&b),
        }
    }

    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &ResBlockCache<T>,
        gy: &Tensor<T>,
        mut grads: Option<&mut Grads<T>>,
        want_input: bool,
    ) -> Option<Tensor<T>> {
        let g = relu_backward(&cache.output, gy);
        let gs = self.bn_short.backward(store, &cache.bn_short, &g, grads.as_deref_mut());
        let gx_short = self
            .shortcut
            .backward(store, &cache.input, &gs, grads.as_deref_mut(), want_input);
        let g2 = self.bn2.backward(store, &cache.bn2, &g, grads.as_deref_mut());
        let gmid = self
            .conv2
            .backward(store, &cache.mid, &g2, grads.as_deref_mut(), true)
            .expect("mid gradient");
        let gmid = relu_backward(&cache.mid, &gmid);
        let g1 = self.bn1.backward(store, &cache.bn1, &gmid, grads.as_deref_mut());
        let gx = self.conv1.backward(store, &cache.input, &g1, grads, want_input);
        match (gx, gx_short) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                Some(a)
            }
            _ => None,
        }
    }

    pub fn commit<T: Real>(&self, store: &mut ParamStore<T>, cache: &ResBlockCache<T>) {
        self.bn1.commit(store, &cache.bn1);
        self.bn2.commit(store, &cache.bn2);
        self.bn_short.commit(store, &cache.bn_short);
    }
}
