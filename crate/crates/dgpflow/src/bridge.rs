//! Doob-bridge marginal coefficients and the closed-form reference drift.
//!
//! The forward noising process is an OU diffusion `dU = −λU ds + g dW`
//! conditioned (by an h-transform) to start, at `s = 0`, in a Gaussian
//! anchored at the context `ctx`: the conditioned process keeps Gaussian
//! marginals `N(φ(s)·ctx, κ(s)·I)` whose coefficients obey
//!
//! ```text
//!   φ̇(s) = −(λ + c_s)·φ(s) + c_s·a_s                       φ(0) = 1
//!   κ̇(s) = −2(λ + c_s)·κ(s) + g² + 2·c_s·a_s·σ₀²           κ(0) = σ₀²
//! ```
//!
//! with `a_s = e^{−λs}`, `q_s = g²(1−e^{−2λs})/(2λ)` and the h-transform
//! correction `c_s = g²σ₀²a_s² / [(a_s²σ₀² + q_s)·q_s]`, which diverges like
//! `1/s` at the anchor. The solver therefore starts one grid cell away from
//! zero (`s_min`, below any training-time clip) and imposes the one-sided
//! limits there.
//!
//! The probability-flow ODE sharing these marginals has the affine drift
//!
//! ```text
//!   v_ref(U, s) = φ̇(s)·ctx + (κ̇(s) / 2κ(s))·(U − φ(s)·ctx)
//! ```
//!
//! in forward bridge time; reverse-time samplers integrate against `−v_ref`.

use crate::diffcore::graph::{Graph, NodeId};
use crate::diffcore::nn::{Binding, Mlp, ParamStore};
use crate::diffcore::tensor::Tensor;
use crate::gp::standard_normal;
use crate::{Error, Result};
use rand::Rng;

/// First grid node: the one-sided anchor approximation point. Kept below the
/// training-time clip `δ = 1/N` for every sane step count so clipped lookups
/// never leave the grid.
pub const S_MIN: f64 = 1e-3;

/// OU-bridge parameters.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct BridgeParams {
    /// OU mean-reversion strength λ > 0.
    pub lambda: f64,
    /// Diffusion scale g > 0.
    pub g: f64,
    /// Anchor standard deviation σ₀ > 0.
    pub sigma0: f64,
    /// Grid resolution (≥ 50 nodes on `[S_MIN, 1]`).
    pub grid_n: usize,
}

impl Default for BridgeParams {
    fn default() -> Self {
        BridgeParams { lambda: 1.0, g: 1.0, sigma0: 1.0, grid_n: 100 }
    }
}

impl BridgeParams {
    /// Checks the invariants; call before solving.
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.g > 0.0 && self.sigma0 > 0.0) {
            return Err(Error::Config(format!(
                "bridge parameters must be positive: λ={}, g={}, σ₀={}",
                self.lambda, self.g, self.sigma0
            )));
        }
        if self.grid_n < 50 {
            return Err(Error::Config(format!("grid_n = {} < 50", self.grid_n)));
        }
        Ok(())
    }
}

/// `c_s = g²σ₀²a_s² / [(a_s²σ₀² + q_s)·q_s]`, the h-transform correction.
/// Singular like `1/s` as `s → 0⁺`; rejects non-positive `s`.
pub fn c_correction(s: f64, p: &BridgeParams) -> Result<f64> {
    if s <= 0.0 {
        return Err(Error::Domain(format!("c_correction at s = {s} ≤ 0 (singular anchor)")));
    }
    let a = (-p.lambda * s).exp();
    let q = p.g * p.g * (1.0 - (-2.0 * p.lambda * s).exp()) / (2.0 * p.lambda);
    let s0 = p.sigma0 * p.sigma0;
    Ok(p.g * p.g * s0 * a * a / ((a * a * s0 + q) * q))
}

/// Pre-computed coefficient tables on a uniform grid over `[S_MIN, 1]`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DoobSchedule {
    /// Generating parameters.
    pub params: BridgeParams,
    /// Grid nodes, ascending, `s_grid[0] = S_MIN`, last = 1.
    pub s_grid: Vec<f64>,
    /// Marginal mean coefficient φ at each node.
    pub phi: Vec<f64>,
    /// Marginal variance κ at each node.
    pub kappa: Vec<f64>,
    /// Analytic φ̇ (ODE right-hand side) at each node.
    pub phi_dot: Vec<f64>,
    /// Analytic κ̇ at each node.
    pub kappa_dot: Vec<f64>,
}

fn rhs(s: f64, phi: f64, kappa: f64, p: &BridgeParams) -> Result<(f64, f64)> {
    let c = c_correction(s, p)?;
    let a = (-p.lambda * s).exp();
    let s0 = p.sigma0 * p.sigma0;
    let dphi = -(p.lambda + c) * phi + c * a;
    let dkappa = -2.0 * (p.lambda + c) * kappa + p.g * p.g + 2.0 * c * a * s0;
    Ok((dphi, dkappa))
}

/// Integrates the coefficient ODEs with one classical RK4 step per grid cell,
/// anchoring `φ(s_min) = 1`, `κ(s_min) = σ₀²`. Derivative columns hold the
/// analytic right-hand sides evaluated at the nodes — never finite
/// differences, since they feed the reference drift directly.
pub fn solve_doob(p: &BridgeParams) -> Result<DoobSchedule> {
    p.validate()?;
    let n = p.grid_n;
    let h = (1.0 - S_MIN) / (n - 1) as f64;
    let s_grid: Vec<f64> = (0..n).map(|i| S_MIN + i as f64 * h).collect();
    let mut phi = vec![0.0; n];
    let mut kappa = vec![0.0; n];
    let mut phi_dot = vec![0.0; n];
    let mut kappa_dot = vec![0.0; n];
    phi[0] = 1.0;
    kappa[0] = p.sigma0 * p.sigma0;
    for i in 0..n {
        let (dp, dk) = rhs(s_grid[i], phi[i], kappa[i], p)?;
        phi_dot[i] = dp;
        kappa_dot[i] = dk;
        if i + 1 == n {
            break;
        }
        let s = s_grid[i];
        let (k1p, k1k) = (dp, dk);
        let (k2p, k2k) = rhs(s + 0.5 * h, phi[i] + 0.5 * h * k1p, kappa[i] + 0.5 * h * k1k, p)?;
        let (k3p, k3k) = rhs(s + 0.5 * h, phi[i] + 0.5 * h * k2p, kappa[i] + 0.5 * h * k2k, p)?;
        let (k4p, k4k) = rhs(s + h, phi[i] + h * k3p, kappa[i] + h * k3k, p)?;
        phi[i + 1] = phi[i] + h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
        kappa[i + 1] = kappa[i] + h / 6.0 * (k1k + 2.0 * k2k + 2.0 * k3k + k4k);
        if kappa[i + 1] <= 0.0 {
            return Err(Error::Degenerate(format!(
                "κ crossed zero at s = {} (invalid bridge parameters)",
                s_grid[i + 1]
            )));
        }
    }
    Ok(DoobSchedule { params: *p, s_grid, phi, kappa, phi_dot, kappa_dot })
}

impl DoobSchedule {
    /// Smallest tabulated time.
    pub fn s_min(&self) -> f64 {
        self.s_grid[0]
    }

    /// Linear interpolation of `(φ, κ, φ̇, κ̇)` at `s ∈ [s_min, 1]`.
    pub fn lookup(&self, s: f64) -> Result<(f64, f64, f64, f64)> {
        if s < self.s_min() - 1e-12 || s > 1.0 + 1e-12 {
            return Err(Error::Domain(format!(
                "schedule lookup at s = {s} outside [{}, 1]",
                self.s_min()
            )));
        }
        Ok(self.lookup_clamped(s))
    }

    /// Like [`DoobSchedule::lookup`] but clamping `s` into the grid range —
    /// for callers that clip times deliberately.
    pub fn lookup_clamped(&self, s: f64) -> (f64, f64, f64, f64) {
        let n = self.s_grid.len();
        let s = s.clamp(self.s_grid[0], 1.0);
        let h = (1.0 - self.s_grid[0]) / (n - 1) as f64;
        let pos = (s - self.s_grid[0]) / h;
        let i = (pos.floor() as usize).min(n - 2);
        let w = (pos - i as f64).clamp(0.0, 1.0);
        let lerp = |a: &[f64]| a[i] + w * (a[i + 1] - a[i]);
        (lerp(&self.phi), lerp(&self.kappa), lerp(&self.phi_dot), lerp(&self.kappa_dot))
    }
}

/// Taped bridge-marginal draw `U_s = φ(s)·ctx + √κ(s)·ε` with caller-supplied
/// noise (reparameterised: gradients reach `ctx`).
pub fn bridge_sample_graph_with_eps(
    g: &mut Graph,
    s: f64,
    ctx: NodeId,
    sched: &DoobSchedule,
    eps: &Tensor,
) -> Result<NodeId> {
    let (phi, kappa, _, _) = sched.lookup(s)?;
    let mean = g.scale(ctx, phi);
    let noise = g.constant(eps.scaled(kappa.sqrt()));
    g.add(mean, noise)
}

/// Taped bridge-marginal draw with fresh standard-normal noise from `rng`.
pub fn bridge_sample_graph<R: Rng>(
    g: &mut Graph,
    s: f64,
    ctx: NodeId,
    sched: &DoobSchedule,
    rng: &mut R,
) -> Result<NodeId> {
    let shape = g.value(ctx).shape().to_vec();
    let eps = standard_normal(&shape, rng);
    bridge_sample_graph_with_eps(g, s, ctx, sched, &eps)
}

/// Untaped bridge-marginal draw.
pub fn bridge_sample_plain<R: Rng>(
    s: f64,
    ctx: &Tensor,
    sched: &DoobSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let (phi, kappa, _, _) = sched.lookup(s)?;
    let eps = standard_normal(ctx.shape(), rng);
    Ok(ctx.zip(&eps, |c, e| phi * c + kappa.sqrt() * e))
}

/// Taped reference probability-flow drift
/// `v_ref = φ̇(s)·ctx + (κ̇(s)/2κ(s))·(U − φ(s)·ctx)` (forward bridge time).
pub fn reference_drift_graph(
    g: &mut Graph,
    u: NodeId,
    s: f64,
    ctx: NodeId,
    sched: &DoobSchedule,
) -> Result<NodeId> {
    let (phi, kappa, phi_dot, kappa_dot) = sched.lookup(s)?;
    let mean_term = g.scale(ctx, phi_dot);
    let centred = {
        let m = g.scale(ctx, phi);
        g.sub(u, m)?
    };
    let spread = g.scale(centred, kappa_dot / (2.0 * kappa));
    g.add(mean_term, spread)
}

/// Untaped reference drift.
pub fn reference_drift_plain(
    u: &Tensor,
    s: f64,
    ctx: &Tensor,
    sched: &DoobSchedule,
) -> Result<Tensor> {
    let (phi, kappa, phi_dot, kappa_dot) = sched.lookup(s)?;
    let coef = kappa_dot / (2.0 * kappa);
    Ok(u.zip(ctx, |ui, ci| phi_dot * ci + coef * (ui - phi * ci)))
}

/// Per-layer context amortiser `Z ↦ μ_θ(Z)`: a row-wise SiLU MLP with a
/// zero-initialised read-out, so contexts start at exactly zero.
#[derive(Debug, Clone)]
pub struct Amortiser {
    mlp: Mlp,
}

impl Amortiser {
    /// Registers an amortiser mapping `d_in`-dimensional rows to `d_out`
    /// with two hidden layers of the given width.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mlp = Mlp::new(store, prefix, &[d_in, hidden, hidden, d_out], rng, true);
        Amortiser { mlp }
    }

    /// Taped context `μ_θ(Z)` for inducing locations `z` (`M×d_in`).
    pub fn ctx_graph(&self, g: &mut Graph, bind: &Binding, z: NodeId) -> Result<NodeId> {
        self.mlp.forward_graph(g, bind, z)
    }

    /// Untaped context.
    pub fn ctx_plain(&self, store: &ParamStore, z: &Tensor) -> Result<Tensor> {
        self.mlp.forward_plain(store, z)
    }
}
