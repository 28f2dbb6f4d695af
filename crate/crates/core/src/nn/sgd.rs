use super::{Grads, ParamGroup, ParamStore, Real};

/// SGD with classical momentum and L2 weight decay:
/// `v ← μ·v + g + λ·θ`, `θ ← θ − η·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: store.params().iter().map(|p| vec![T::zero(); p.value.len()]).collect(),
        }
    }

    /// Updates every trainable parameter outside `frozen`; frozen groups are
    /// left bit-identical and their momentum is not advanced.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>, frozen: &[ParamGroup]) {
        let lr = T::of(self.lr);
        let mu = T::of(self.momentum);
        let wd = T::of(self.weight_decay);
        for (idx, (p, g)) in store.params_mut().iter_mut().zip(grads.all()).enumerate() {
            if !p.trainable || frozen.contains(&p.group) {
                continue;
            }
            let vel = &mut self.velocity[idx];
            for ((theta, &gi), v) in p.value.iter_mut().zip(g).zip(vel.iter_mut()) {
                *v = mu * *v + gi + wd * *theta;
                *theta -= lr * *v;
            }
        }
    }

    pub fn reset_momentum(&mut self) {
        for v in self.velocity.iter_mut().flatten() {
            *v = T::zero();
        }
    }
}
