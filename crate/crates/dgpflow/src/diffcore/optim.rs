//! Adam optimiser over a [`ParamStore`](super::nn::ParamStore).
//!
//! Standard bias-corrected Adam: first/second moment estimates per scalar,
//! update `θ ← θ − lr·m̂/(√v̂ + ε)`. State is indexed by registration order,
//! matching the gradient vector returned by
//! [`Binding::grads`](super::nn::Binding::grads).

use super::nn::ParamStore;
use super::tensor::Tensor;

/// Adam state and hyper-parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    /// Fresh optimiser with the usual moment decays (0.9, 0.999, 1e-8).
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    /// Learning rate currently in effect.
    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Applies one update. `grads` must align with the store's registration
    /// order (as produced by `Binding::grads`).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), store.len(), "gradient/parameter count mismatch");
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = &grads[k];
            let mut p = store.get(id).clone();
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / b1t;
                let vhat = vi / b2t;
                p.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            store.set(id, p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        // With zero state, one Adam step moves each coordinate by ≈ lr·sign(g).
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::vector(vec![1.0, -2.0]));
        let mut opt = Adam::new(&store, 0.01);
        opt.step(&mut store, &[Tensor::vector(vec![0.5, -3.0])]);
        let p = store.get(id);
        assert_relative_eq!(p.data()[0], 1.0 - 0.01, epsilon = 1e-6);
        assert_relative_eq!(p.data()[1], -2.0 + 0.01, epsilon = 1e-6);
    }

    #[test]
    fn converges_on_quadratic() {
        // Minimise ½(x−3)² by following exact gradients.
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(0.0));
        let mut opt = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let x = store.get(id).item();
            opt.step(&mut store, &[Tensor::scalar(x - 3.0)]);
        }
        assert_relative_eq!(store.get(id).item(), 3.0, epsilon = 1e-3);
    }
}
