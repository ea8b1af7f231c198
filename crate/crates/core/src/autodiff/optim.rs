use crate::scalar::Scalar;

use super::params::{GradStore, ParamStore};

/// L2 norm over all gradients jointly.
pub fn global_norm<S: Scalar>(grads: &GradStore<S>) -> S {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|&v| v * v)
        .sum::<S>()
        .sqrt()
}

/// Rescales all gradients so their joint norm is at most `max_norm`. Returns
/// the factor that was applied (1 when nothing changed).
pub fn clip_global_norm<S: Scalar>(grads: &mut GradStore<S>, max_norm: S) -> S {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
        scale
    } else {
        S::one()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    /// One bias-corrected Adam update. Parameters without an entry in
    /// `grads` are treated as having a zero gradient.
    pub fn step<S: Scalar>(&self, params: &mut ParamStore<S>, grads: &GradStore<S>) {
        let t = params.step() + 1;
        params.set_step(t);
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let one = S::one();
        let c1 = one - S::lit(self.beta1.powf(t as f64));
        let c2 = one - S::lit(self.beta2.powf(t as f64));
        let lr = S::lit(self.lr);
        let eps = S::lit(self.eps);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name);
            let n = p.value.len();
            for i in 0..n {
                let gi = g.map_or(S::zero(), |g| g.data()[i]);
                let m = b1 * p.m1.data()[i] + (one - b1) * gi;
                let v = b2 * p.m2.data()[i] + (one - b2) * gi * gi;
                p.m1.data_mut()[i] = m;
                p.m2.data_mut()[i] = v;
                let mh = m / c1;
                let vh = v / c2;
                p.value.data_mut()[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
