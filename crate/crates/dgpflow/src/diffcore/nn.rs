//! Parameter storage and the small SiLU networks used throughout.
//!
//! All trainable state lives in a [`ParamStore`]: a flat, append-only list of
//! tensors addressed by [`ParamId`]. Each optimisation step opens a fresh
//! [`Graph`], binds every parameter as a leaf (a [`Binding`]), builds the loss,
//! and maps gradients back to the store by id. Keeping the store outside the
//! graph lets prediction-time code read parameters without taping anything.
//!
//! [`Mlp`] is a fully connected network with SiLU hidden activations and a
//! linear output layer. Besides the usual taped forward it exposes
//! [`Mlp::jvp_graph`], which lays down the forward-mode linearisation
//! `(y, J·v)` *as graph ops*, so that reverse mode through the tangent output
//! differentiates Jacobian-vector products with respect to the parameters —
//! the ingredient the divergence estimator of the flow objective needs.

use super::graph::{Graph, Gradients, NodeId};
use super::tensor::Tensor;
use crate::Result;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Handle to one tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    /// Index into the store (stable for the store's lifetime).
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, append-only collection of named trainable tensors.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    names: Vec<String>,
}

impl ParamStore {
    /// Empty store.
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor and returns its handle.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.tensors.push(t);
        self.names.push(name.into());
        ParamId(self.tensors.len() - 1)
    }

    /// Current value of a parameter.
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    /// Overwrites a parameter in place (shape must match).
    pub fn set(&mut self, id: ParamId, t: Tensor) {
        assert_eq!(self.tensors[id.0].shape(), t.shape(), "param shape change");
        self.tensors[id.0] = t;
    }

    /// Name given at registration.
    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// Number of parameters (tensors, not scalars).
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    /// True when nothing is registered.
    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Iterates `(id, tensor)` in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    /// Binds every parameter as a leaf in `g`, in registration order.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        Binding {
            leaves: self.tensors.iter().map(|t| g.leaf(t.clone())).collect(),
        }
    }
}

/// Per-graph map from [`ParamId`] to the leaf node holding its value.
#[derive(Debug, Clone)]
pub struct Binding {
    leaves: Vec<NodeId>,
}

impl Binding {
    /// Leaf node for a parameter.
    pub fn node(&self, id: ParamId) -> NodeId {
        self.leaves[id.0]
    }

    /// Gradient of the loss with respect to every bound parameter, aligned
    /// with the store's registration order (zeros where unused).
    pub fn grads(&self, store: &ParamStore, grads: &Gradients) -> Vec<Tensor> {
        self.leaves
            .iter()
            .enumerate()
            .map(|(i, &n)| grads.get(n, store.tensors[i].shape()))
            .collect()
    }
}

/// Scalar time features `(s, sin 2πs, cos 2πs)` fed to the velocity nets.
pub fn time_features(s: f64) -> [f64; 3] {
    let w = 2.0 * std::f64::consts::PI * s;
    [s, w.sin(), w.cos()]
}

/// Fully connected SiLU network with a linear read-out layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    sizes: Vec<usize>,
    weights: Vec<ParamId>,
    biases: Vec<ParamId>,
}

impl Mlp {
    /// Registers parameters for a net with the given layer `sizes`
    /// (`[d_in, h₁, …, d_out]`). Weights start at `N(0, 1/fan_in)`; when
    /// `zero_last` is set the read-out layer starts at exactly zero so the
    /// initial network is the zero function.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        sizes: &[usize],
        rng: &mut R,
        zero_last: bool,
    ) -> Self {
        assert!(sizes.len() >= 2, "mlp needs at least in/out sizes");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let last = l == sizes.len() - 2;
            let w = if last && zero_last {
                Tensor::zeros(&[fan_in, fan_out])
            } else {
                let sd = (1.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        z * sd
                    })
                    .collect();
                Tensor::matrix(fan_in, fan_out, data)
            };
            weights.push(store.add(format!("{prefix}.w{l}"), w));
            biases.push(store.add(format!("{prefix}.b{l}"), Tensor::matrix(1, fan_out, vec![0.0; fan_out])));
        }
        Mlp { sizes: sizes.to_vec(), weights, biases }
    }

    /// Input width.
    pub fn d_in(&self) -> usize {
        self.sizes[0]
    }

    /// Output width.
    pub fn d_out(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Parameter handles in registration order (weights and biases).
    pub fn params(&self) -> Vec<ParamId> {
        self.weights.iter().chain(self.biases.iter()).copied().collect()
    }

    /// Taped forward pass for a batch `x` of shape `n×d_in`.
    pub fn forward_graph(&self, g: &mut Graph, bind: &Binding, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for l in 0..self.weights.len() {
            let z = g.matmul(h, bind.node(self.weights[l]))?;
            let z = g.add(z, bind.node(self.biases[l]))?;
            h = if l + 1 < self.weights.len() { g.silu(z) } else { z };
        }
        Ok(h)
    }

    /// Untaped forward pass reading parameters straight from the store.
    pub fn forward_plain(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for l in 0..self.weights.len() {
            let z = super::tensor::matmul(&h, store.get(self.weights[l]))?;
            let b = store.get(self.biases[l]);
            let z = super::tensor::broadcast_zip(&z, b, |u, v| u + v)?;
            h = if l + 1 < self.weights.len() {
                z.map(super::tensor::silu)
            } else {
                z
            };
        }
        Ok(h)
    }

    /// Taped forward-mode linearisation: returns `(y, J·v)` where `J` is the
    /// Jacobian of the network at `x` and `v` a tangent batch of the same
    /// shape as `x`. Both outputs are ordinary graph nodes, so reverse mode
    /// differentiates them with respect to the parameters exactly.
    pub fn jvp_graph(
        &self,
        g: &mut Graph,
        bind: &Binding,
        x: NodeId,
        v: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let mut h = x;
        let mut dh = v;
        for l in 0..self.weights.len() {
            let w = bind.node(self.weights[l]);
            let z = g.matmul(h, w)?;
            let z = g.add(z, bind.node(self.biases[l]))?;
            let dz = g.matmul(dh, w)?;
            if l + 1 < self.weights.len() {
                h = g.silu(z);
                // SiLU'(z) = σ(z)·(1 + z·(1−σ(z))), assembled from primitives
                // so the tangent path stays differentiable in reverse mode.
                let s = g.sigmoid(z);
                let ns = g.neg(s);
                let one_minus_s = g.add_scalar(ns, 1.0);
                let zn = g.mul(z, one_minus_s)?;
                let inner = g.add_scalar(zn, 1.0);
                let d = g.mul(s, inner)?;
                dh = g.mul(d, dz)?;
            } else {
                h = z;
                dh = dz;
            }
        }
        Ok((h, dh))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_mlp() -> (ParamStore, Mlp) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mlp = Mlp::new(&mut store, "f", &[3, 8, 8, 2], &mut rng, false);
        (store, mlp)
    }

    #[test]
    fn graph_and_plain_forward_agree() {
        let (store, mlp) = toy_mlp();
        let x = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64) * 0.1 - 0.5).collect());
        let plain = mlp.forward_plain(&store, &x).unwrap();
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let xn = g.constant(x);
        let y = mlp.forward_graph(&mut g, &bind, xn).unwrap();
        for (a, b) in g.value(y).data().iter().zip(plain.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn zero_last_layer_gives_zero_output() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&mut store, "v", &[4, 16, 16, 4], &mut rng, true);
        let x = Tensor::matrix(2, 4, vec![0.5; 8]);
        let y = mlp.forward_plain(&store, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn jvp_matches_finite_difference_directional_derivative() {
        let (store, mlp) = toy_mlp();
        let x = Tensor::matrix(2, 3, vec![0.3, -0.2, 0.8, 1.1, 0.0, -0.7]);
        let v = Tensor::matrix(2, 3, vec![0.6, 0.1, -0.4, 0.2, 0.9, 0.5]);
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let xn = g.constant(x.clone());
        let vn = g.constant(v.clone());
        let (y, jv) = mlp.jvp_graph(&mut g, &bind, xn, vn).unwrap();
        let h = 1e-6;
        let xp = x.zip(&v, |a, b| a + h * b);
        let xm = x.zip(&v, |a, b| a - h * b);
        let fd = mlp
            .forward_plain(&store, &xp)
            .unwrap()
            .zip(&mlp.forward_plain(&store, &xm).unwrap(), |a, b| (a - b) / (2.0 * h));
        for (got, want) in g.value(jv).data().iter().zip(fd.data()) {
            assert_relative_eq!(got, want, epsilon = 1e-6, max_relative = 1e-6);
        }
        // primal output of the jvp pass equals the plain forward
        let plain = mlp.forward_plain(&store, &x).unwrap();
        for (a, b) in g.value(y).data().iter().zip(plain.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn jvp_tangent_is_differentiable_wrt_params() {
        // ∂/∂θ of εᵀ(J·ε) must match finite differences on a weight entry.
        let (store, mlp) = toy_mlp();
        let x = Tensor::matrix(1, 3, vec![0.4, -0.6, 0.2]);
        let eps = Tensor::matrix(1, 3, vec![1.0, -1.0, 1.0]);
        let loss = |st: &ParamStore| -> f64 {
            let mut g = Graph::new();
            let bind = st.bind(&mut g);
            let xn = g.constant(x.clone());
            let en = g.constant(eps.clone());
            let (_, jv) = mlp.jvp_graph(&mut g, &bind, xn, en).unwrap();
            // contract the tangent against a fixed vector and square
            let en2 = g.constant(Tensor::matrix(1, 2, vec![0.7, -0.3]));
            let c = g.mul(jv, en2).unwrap();
            let s = g.sum(c);
            let y = g.square(s);
            g.value(y).item()
        };
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let xn = g.constant(x.clone());
        let en = g.constant(eps.clone());
        let (_, jv) = mlp.jvp_graph(&mut g, &bind, xn, en).unwrap();
        let en2 = g.constant(Tensor::matrix(1, 2, vec![0.7, -0.3]));
        let c = g.mul(jv, en2).unwrap();
        let s = g.sum(c);
        let y = g.square(s);
        let grads = g.backward(y).unwrap();
        let wid = mlp.params()[0];
        let gw = grads.get(bind.node(wid), store.get(wid).shape());
        let h = 1e-5;
        for flat in [0usize, 5, 11] {
            let mut sp = store.clone();
            let mut t = sp.get(wid).clone();
            t.data_mut()[flat] += h;
            sp.set(wid, t);
            let mut sm = store.clone();
            let mut t = sm.get(wid).clone();
            t.data_mut()[flat] -= h;
            sm.set(wid, t);
            let fd = (loss(&sp) - loss(&sm)) / (2.0 * h);
            let got = gw.data()[flat];
            let denom = fd.abs().max(got.abs()).max(1e-8);
            assert!((fd - got).abs() / denom < 1e-4, "fd {fd} vs {got}");
        }
    }

    #[test]
    fn time_features_at_quarter_period() {
        let f = time_features(0.25);
        assert_relative_eq!(f[0], 0.25, epsilon = 1e-15);
        assert_relative_eq!(f[1], 1.0, epsilon = 1e-12);
        assert_relative_eq!(f[2], 0.0, epsilon = 1e-12);
    }
}
