//! Sparse-GP layers: ARD-RBF kernels, inducing-point conditionals, deep
//! composition, likelihoods, and the analytic Gaussian KL.
//!
//! Each layer carries inducing locations `Z` (M×d_in), ARD-RBF kernel
//! hyper-parameters, and a *fixed* linear mean function applied as a skip
//! connection: `f(x) = W·x + g(x)` with `g ~ GP(0, k)`. The inducing values
//! `U` (M×d_out) are the *zero-mean* component's values at `Z`, so the prior
//! is exactly `N(0, K_ZZ)` and the layer conditional over function values at
//! inputs `X` is Gaussian with
//!
//! ```text
//!   mean  = W·X + K_xZ K_ZZ⁻¹ U
//!   var_i = k(x_i,x_i) − k_x_iZ K_ZZ⁻¹ k_Zx_i      (diagonal only)
//! ```
//!
//! the per-point factorised conditional of the doubly-stochastic scheme.
//! With this convention `U = 0` collapses the layer to its skip connection,
//! and an amplitude driven to zero degenerates the whole stack to the
//! composition of mean maps. A
//! deep GP is the composition of such layers with fresh reparameterised
//! samples between them. Everything exists in two forms: a taped variant used
//! inside training losses, and a plain-tensor variant for prediction where no
//! gradients are wanted.

use crate::diffcore::graph::{Graph, NodeId};
use crate::diffcore::nn::{Binding, ParamId, ParamStore};
use crate::diffcore::tensor::{self, Tensor};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Variance floor added before square roots in reparameterised sampling, so
/// gradients stay finite at (numerically) zero conditional variance.
pub const VAR_FLOOR: f64 = 1e-12;

/// ARD-RBF hyper-parameters, stored in log space.
#[derive(Debug, Clone, Copy)]
pub struct KernelParams {
    /// Per-input-dimension log lengthscales, shape `1×d_in`.
    pub log_lengthscales: ParamId,
    /// Scalar log amplitude; `exp(2·log_amplitude)` is the zero-distance
    /// kernel value.
    pub log_amplitude: ParamId,
}

/// Observation noise parameterisation for the Gaussian likelihood.
#[derive(Debug, Clone, Copy)]
pub enum Noise {
    /// `log σ²` lives in the parameter store and is trained.
    Trained(ParamId),
    /// Fixed variance σ² that never receives gradients.
    Fixed(f64),
}

/// Observation model on the final-layer latents.
#[derive(Debug, Clone, Copy)]
pub enum Likelihood {
    /// `y = f + N(0, σ²)` with σ² from [`Noise`].
    Gaussian(Noise),
    /// Bernoulli with logits `f`.
    Bernoulli,
}

impl Likelihood {
    /// Registers a trained-noise Gaussian likelihood with σ² initialised to
    /// `var0`.
    pub fn gaussian_trained(store: &mut ParamStore, var0: f64) -> Self {
        let id = store.add("lik.log_noise", Tensor::scalar(var0.ln()));
        Likelihood::Gaussian(Noise::Trained(id))
    }

    /// Current noise variance, if Gaussian.
    pub fn noise_var(&self, store: &ParamStore) -> Option<f64> {
        match self {
            Likelihood::Gaussian(Noise::Trained(id)) => Some(store.get(*id).item().exp()),
            Likelihood::Gaussian(Noise::Fixed(v)) => Some(*v),
            Likelihood::Bernoulli => None,
        }
    }

    /// Taped mean negative log likelihood of `y` given latents `f` (both
    /// `n×1`).
    pub fn nll_graph(
        &self,
        g: &mut Graph,
        bind: &Binding,
        f: NodeId,
        y: &Tensor,
    ) -> Result<NodeId> {
        let yn = g.constant(y.clone());
        match self {
            Likelihood::Gaussian(noise) => {
                let log_var = match noise {
                    Noise::Trained(id) => bind.node(*id),
                    Noise::Fixed(v) => g.scalar(v.ln()),
                };
                let r = g.sub(yn, f)?;
                let r2 = g.square(r);
                let msq = g.mean(r2);
                let inv_var = {
                    let nl = g.neg(log_var);
                    g.exp(nl)
                };
                let quad = g.mul(msq, inv_var)?;
                let quad = g.scale(quad, 0.5);
                let log_term = g.add_scalar(log_var, (2.0 * std::f64::consts::PI).ln());
                let log_term = g.scale(log_term, 0.5);
                g.add(quad, log_term)
            }
            Likelihood::Bernoulli => {
                // −log p = softplus(f) − y·f for y ∈ {0,1}
                let sp = g.softplus(f);
                let yf = g.mul(yn, f)?;
                let per = g.sub(sp, yf)?;
                Ok(g.mean(per))
            }
        }
    }

    /// Untaped mean negative log likelihood.
    pub fn nll_plain(&self, store: &ParamStore, f: &Tensor, y: &Tensor) -> f64 {
        match self {
            Likelihood::Gaussian(_) => {
                let var = self.noise_var(store).unwrap();
                let msq = f.zip(y, |fi, yi| (yi - fi) * (yi - fi)).sum() / f.len() as f64;
                0.5 * msq / var + 0.5 * ((2.0 * std::f64::consts::PI * var).ln())
            }
            Likelihood::Bernoulli => {
                let per = f.zip(y, |fi, yi| tensor::softplus(fi) - yi * fi);
                per.sum() / per.len() as f64
            }
        }
    }
}

/// One sparse-GP layer.
#[derive(Debug, Clone)]
pub struct GpLayer {
    /// Inducing locations, `M×d_in`, trained.
    pub z: ParamId,
    /// Kernel hyper-parameters.
    pub kernel: KernelParams,
    /// Input width.
    pub d_in: usize,
    /// Output width.
    pub d_out: usize,
    /// Inducing-point count.
    pub m: usize,
    /// Fixed linear mean map, `d_in×d_out`: identity when square, otherwise a
    /// rectangular identity (leading orthonormal directions).
    mean_w: Tensor,
}

impl GpLayer {
    /// Registers a layer. `z0` must be `M×d_in`; lengthscales and amplitude
    /// start at 1 (zero in log space).
    pub fn new(store: &mut ParamStore, prefix: &str, z0: Tensor, d_out: usize) -> Self {
        let (m, d_in) = (z0.rows(), z0.cols());
        let z = store.add(format!("{prefix}.z"), z0);
        let kernel = KernelParams {
            log_lengthscales: store.add(
                format!("{prefix}.log_ls"),
                Tensor::matrix(1, d_in, vec![0.0; d_in]),
            ),
            log_amplitude: store.add(format!("{prefix}.log_amp"), Tensor::scalar(0.0)),
        };
        let mut w = Tensor::zeros(&[d_in, d_out]);
        for i in 0..d_in.min(d_out) {
            w.data_mut()[i * d_out + i] = 1.0;
        }
        GpLayer { z, kernel, d_in, d_out, m, mean_w: w }
    }

    /// The fixed mean map.
    pub fn mean_w(&self) -> &Tensor {
        &self.mean_w
    }

    /// Taped mean function `X·W`.
    pub fn mean_graph(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = g.constant(self.mean_w.clone());
        g.matmul(x, w)
    }

    /// Untaped mean function.
    pub fn mean_plain(&self, x: &Tensor) -> Result<Tensor> {
        tensor::matmul(x, &self.mean_w)
    }

    /// Taped sparse conditional: returns `(mean n×d_out, var n×d_out)` for
    /// inputs `f_in` (`n×d_in`) and inducing values `u` (`M×d_out`). The
    /// variance is shared across output dimensions (one kernel per layer) and
    /// clamped at zero.
    pub fn conditional_graph(
        &self,
        g: &mut Graph,
        bind: &Binding,
        f_in: NodeId,
        u: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let z = bind.node(self.z);
        let ls = bind.node(self.kernel.log_lengthscales);
        let amp = bind.node(self.kernel.log_amplitude);
        let kzz = ard_rbf_graph(g, z, z, ls, amp)?;
        let l = g.cholesky_jittered(kzz)?;
        let kxz = ard_rbf_graph(g, f_in, z, ls, amp)?;
        let kzx = g.transpose(kxz);
        let w = g.solve_lower(l, kzx)?; // M×n, W = L⁻¹K_Zx
        // mean = mean_fn(f_in) + Wᵀ·L⁻¹U
        let mx = self.mean_graph(g, f_in)?;
        let b = g.solve_lower(l, u)?; // M×d_out
        let wt = g.transpose(w);
        let corr = g.matmul(wt, b)?;
        let mean = g.add(mx, corr)?;
        // var_i = σ_k² − Σ_m W[m,i]²
        let n = g.value(f_in).rows();
        let w2 = g.square(w);
        let col = g.sum_axis(w2, 0)?; // 1×n
        let colt = g.transpose(col); // n×1
        let amp2 = g.scale(amp, 2.0);
        let amp2 = g.exp(amp2);
        let kdiag = g.broadcast_to(amp2, &[n, 1])?;
        let var = g.sub(kdiag, colt)?;
        let var = g.clamp_min(var, 0.0);
        let var = g.broadcast_to(var, &[n, self.d_out])?;
        Ok((mean, var))
    }

    /// Untaped sparse conditional with the same semantics as
    /// [`GpLayer::conditional_graph`].
    pub fn conditional_plain(
        &self,
        store: &ParamStore,
        f_in: &Tensor,
        u: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let z = store.get(self.z);
        let ls = store.get(self.kernel.log_lengthscales);
        let amp = store.get(self.kernel.log_amplitude).item();
        let kzz = ard_rbf_plain(z, z, ls, amp)?;
        let (l, _) = tensor::cholesky_jittered(&kzz)?;
        let kxz = ard_rbf_plain(f_in, z, ls, amp)?;
        let w = tensor::solve_lower(&l, &tensor::transpose(&kxz))?;
        let mx = self.mean_plain(f_in)?;
        let b = tensor::solve_lower(&l, u)?;
        let mean = {
            let corr = tensor::matmul(&tensor::transpose(&w), &b)?;
            mx.zip(&corr, |a, c| a + c)
        };
        let n = f_in.rows();
        let amp2 = (2.0 * amp).exp();
        let mut var = Tensor::zeros(&[n, self.d_out]);
        for i in 0..n {
            let s: f64 = (0..self.m).map(|k| w.at(k, i) * w.at(k, i)).sum();
            let v = (amp2 - s).max(0.0);
            for j in 0..self.d_out {
                var.data_mut()[i * self.d_out + j] = v;
            }
        }
        Ok((mean, var))
    }

    /// Taped `(K_ZZ Cholesky factor, jittered)` for the current inducing set.
    pub fn kzz_chol_graph(&self, g: &mut Graph, bind: &Binding) -> Result<NodeId> {
        let z = bind.node(self.z);
        let ls = bind.node(self.kernel.log_lengthscales);
        let amp = bind.node(self.kernel.log_amplitude);
        let kzz = ard_rbf_graph(g, z, z, ls, amp)?;
        g.cholesky_jittered(kzz)
    }

    /// Untaped jittered Cholesky of `K_ZZ`.
    pub fn kzz_chol_plain(&self, store: &ParamStore) -> Result<Tensor> {
        let z = store.get(self.z);
        let kzz = ard_rbf_plain(z, z, store.get(self.kernel.log_lengthscales), store.get(self.kernel.log_amplitude).item())?;
        Ok(tensor::cholesky_jittered(&kzz)?.0)
    }
}

/// Taped ARD-RBF Gram matrix between `x` (`n×d`) and `x2` (`m×d`):
/// `K[i,j] = exp(2·log_amp)·exp(−½ Σ_d (x_i,d − x2_j,d)²/ℓ_d²)`.
pub fn ard_rbf_graph(
    g: &mut Graph,
    x: NodeId,
    x2: NodeId,
    log_ls: NodeId,
    log_amp: NodeId,
) -> Result<NodeId> {
    let ls = g.exp(log_ls); // 1×d
    let xs = g.div(x, ls)?;
    let x2s = g.div(x2, ls)?;
    let xs2 = g.square(xs);
    let rx = g.sum_axis(xs2, 1)?; // n×1
    let x2s2 = g.square(x2s);
    let rx2 = g.sum_axis(x2s2, 1)?; // m×1
    let rx2t = g.transpose(rx2); // 1×m
    let x2st = g.transpose(x2s);
    let cross = g.matmul(xs, x2st)?; // n×m
    let c2 = g.scale(cross, -2.0);
    let d2 = g.add(rx, c2)?;
    let d2 = g.add(d2, rx2t)?;
    let d2 = g.clamp_min(d2, 0.0);
    let e = g.scale(d2, -0.5);
    let e = g.exp(e);
    let amp2 = g.scale(log_amp, 2.0);
    let amp2 = g.exp(amp2);
    g.mul(e, amp2)
}

/// Untaped ARD-RBF Gram matrix (`log_ls` is `1×d`, `log_amp` scalar).
pub fn ard_rbf_plain(x: &Tensor, x2: &Tensor, log_ls: &Tensor, log_amp: f64) -> Result<Tensor> {
    let (n, d) = (x.rows(), x.cols());
    let m = x2.rows();
    if x2.cols() != d || log_ls.len() != d {
        return Err(Error::Shape(format!(
            "ard_rbf: x {:?}, x2 {:?}, lengthscales {:?}",
            x.shape(),
            x2.shape(),
            log_ls.shape()
        )));
    }
    let inv_ls: Vec<f64> = log_ls.data().iter().map(|l| (-l).exp()).collect();
    let amp2 = (2.0 * log_amp).exp();
    let mut k = Tensor::zeros(&[n, m]);
    for i in 0..n {
        for j in 0..m {
            let mut d2 = 0.0;
            for c in 0..d {
                let t = (x.at(i, c) - x2.at(j, c)) * inv_ls[c];
                d2 += t * t;
            }
            k.data_mut()[i * m + j] = amp2 * (-0.5 * d2).exp();
        }
    }
    Ok(k)
}

/// Taped DGP forward pass: composes the layers, sampling between them by
/// reparameterisation with fresh standard-normal draws from `rng`. Inducing
/// values `us` are graph nodes (one `M×d_out` per layer); returns the
/// final-layer latents (`n×d_L`).
pub fn dgp_forward_graph<R: Rng>(
    g: &mut Graph,
    bind: &Binding,
    layers: &[GpLayer],
    x: &Tensor,
    us: &[NodeId],
    rng: &mut R,
) -> Result<NodeId> {
    if layers.len() != us.len() {
        return Err(Error::Shape("layer/U count mismatch".into()));
    }
    let mut f = g.constant(x.clone());
    for (layer, &u) in layers.iter().zip(us) {
        let (mean, var) = layer.conditional_graph(g, bind, f, u)?;
        let n = g.value(mean).rows();
        let eps = g.constant(standard_normal(&[n, layer.d_out], rng));
        let vf = g.add_scalar(var, VAR_FLOOR);
        let sd = g.sqrt(vf);
        let noise = g.mul(sd, eps)?;
        f = g.add(mean, noise)?;
    }
    Ok(f)
}

/// Untaped DGP forward pass with the same sampling scheme as
/// [`dgp_forward_graph`].
pub fn dgp_forward_plain<R: Rng>(
    store: &ParamStore,
    layers: &[GpLayer],
    x: &Tensor,
    us: &[Tensor],
    rng: &mut R,
) -> Result<Tensor> {
    if layers.len() != us.len() {
        return Err(Error::Shape("layer/U count mismatch".into()));
    }
    let mut f = x.clone();
    for (layer, u) in layers.iter().zip(us) {
        let (mean, var) = layer.conditional_plain(store, &f, u)?;
        let eps = standard_normal(mean.shape(), rng);
        f = Tensor::new(
            mean.shape().to_vec(),
            mean.data()
                .iter()
                .zip(var.data())
                .zip(eps.data())
                .map(|((m, v), e)| m + (v + VAR_FLOOR).sqrt() * e)
                .collect(),
        );
    }
    Ok(f)
}

/// Taped log density `Σ_d log N(u_:,d ; 0, K_ZZ)` given the Cholesky factor
/// `l` of (jittered) `K_ZZ` and inducing values `u` (`M×d_out`).
pub fn prior_logp_graph(g: &mut Graph, l: NodeId, u: NodeId) -> Result<NodeId> {
    let (m, d_out) = (g.value(u).rows(), g.value(u).cols());
    let b = g.solve_lower(l, u)?;
    let b2 = g.square(b);
    let quad = g.sum(b2);
    let quad = g.scale(quad, -0.5);
    let diag = g.diag_part(l);
    let ld = g.log(diag);
    let logdet = g.sum(ld); // ½ log|K| per column
    let logdet = g.scale(logdet, -(d_out as f64));
    let const_term = g.scalar(-0.5 * (m * d_out) as f64 * (2.0 * std::f64::consts::PI).ln());
    let t = g.add(quad, logdet)?;
    g.add(t, const_term)
}

/// Untaped version of [`prior_logp_graph`].
pub fn prior_logp_plain(l: &Tensor, u: &Tensor) -> Result<f64> {
    let (m, d_out) = (u.rows(), u.cols());
    let b = tensor::solve_lower(l, u)?;
    let quad: f64 = b.data().iter().map(|x| x * x).sum();
    let logdet: f64 = (0..m).map(|i| l.at(i, i).ln()).sum();
    Ok(-0.5 * quad
        - d_out as f64 * logdet
        - 0.5 * (m * d_out) as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Taped `KL(N(m, L·Lᵀ) ‖ N(0, K_ZZ))` summed over the `d_out` columns of
/// `m`, with one shared covariance factor `l` (`M×M`, lower, positive
/// diagonal) and `kzz` the prior Gram node.
pub fn gaussian_kl_graph(g: &mut Graph, m: NodeId, l: NodeId, kzz: NodeId) -> Result<NodeId> {
    let (mm, d_out) = (g.value(m).rows(), g.value(m).cols());
    let lk = g.cholesky_jittered(kzz)?;
    // tr(K⁻¹S) = ‖Lk⁻¹ L‖_F²
    let a = g.solve_lower(lk, l)?;
    let a2 = g.square(a);
    let tr = g.sum(a2);
    let tr = g.scale(tr, d_out as f64);
    // mᵀK⁻¹m summed over columns
    let b = g.solve_lower(lk, m)?;
    let b2 = g.square(b);
    let quad = g.sum(b2);
    // log-determinants
    let dk = g.diag_part(lk);
    let ldk = g.log(dk);
    let logdet_k = g.sum(ldk);
    let logdet_k = g.scale(logdet_k, 2.0 * d_out as f64);
    let ds = g.diag_part(l);
    let lds = g.log(ds);
    let logdet_s = g.sum(lds);
    let logdet_s = g.scale(logdet_s, -2.0 * d_out as f64);
    let dim = g.scalar(-((mm * d_out) as f64));
    let t = g.add(tr, quad)?;
    let t = g.add(t, dim)?;
    let t = g.add(t, logdet_k)?;
    let t = g.add(t, logdet_s)?;
    Ok(g.scale(t, 0.5))
}

/// Standard-normal tensor of the given shape.
pub fn standard_normal<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| StandardNormal.sample(rng)).collect(),
    )
}

/// Lloyd's k-means with seeded random initial centers; used to place inducing
/// points on (images of) the training inputs. Returns `k×d` centers.
pub fn kmeans<R: Rng>(points: &Tensor, k: usize, iters: usize, rng: &mut R) -> Tensor {
    let (n, d) = (points.rows(), points.cols());
    assert!(n >= 1 && k >= 1);
    // Initial centers: k distinct row indices (with replacement if n < k).
    let mut centers = Tensor::zeros(&[k, d]);
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    for c in 0..k {
        let idx = if n > k {
            loop {
                let cand = rng.gen_range(0..n);
                if !chosen.contains(&cand) {
                    break cand;
                }
            }
        } else {
            c % n
        };
        chosen.push(idx);
        for j in 0..d {
            centers.data_mut()[c * d + j] = points.at(idx, j);
        }
    }
    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        for i in 0..n {
            let mut best = (f64::INFINITY, 0usize);
            for c in 0..k {
                let mut dist = 0.0;
                for j in 0..d {
                    let t = points.at(i, j) - centers.at(c, j);
                    dist += t * t;
                }
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            assign[i] = best.1;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for j in 0..d {
                sums[assign[i] * d + j] += points.at(i, j);
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let idx = rng.gen_range(0..n);
                for j in 0..d {
                    centers.data_mut()[c * d + j] = points.at(idx, j);
                }
            } else {
                for j in 0..d {
                    centers.data_mut()[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
    }
    centers
}
