//! Experiment harness: dataset generation and ingestion, standardization,
//! the training loop, evaluation metrics, coverage, and parallel sweeps.
//!
//! Conventions fixed here and relied on elsewhere:
//!
//! * Splits are a seeded permutation with the first 80% as training rows.
//! * Features are standardized on training statistics; regression targets
//!   likewise (so reported RMSE/NLL are on the standardized target scale and
//!   the predict-train-mean baseline has RMSE ≈ 1).
//! * Epoch counts scale as `max(5, round(10⁶ / N_train))` when the config
//!   does not pin them, so the total step budget is roughly dataset-size
//!   independent at batch 256.
//! * The divergence filter is one shared predicate — non-finite training
//!   loss or final test RMSE above 5× the mean-predictor baseline — applied
//!   identically to every method, and exclusions drop the *seed* across all
//!   methods of a dataset so paired comparisons stay aligned.
//! * Everything is bit-deterministic per seed: training, evaluation, and
//!   sweep workers all derive their randomness from the config seed alone.

use crate::diffcore::nn::ParamStore;
use crate::diffcore::optim::Adam;
use crate::diffcore::tensor::Tensor;
use crate::diffcore::Graph;
use crate::transport::{
    build_model, few_step_predict, objective_loss, Model, ModelConfig, Objective,
};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

/// Nominal coverage levels reported by [`coverage`], in emission order.
pub const COVERAGE_LEVELS: [f64; 5] = [0.5, 0.8, 0.9, 0.95, 0.99];

/// A standardized, split dataset.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Dataset {
    /// Short name used in run records ("toy1d", "het", CSV stem, …).
    pub name: String,
    /// Standardized features, `n×d`.
    pub x: Tensor,
    /// Targets, `n×1`: standardized for regression, {0,1} for classification.
    pub y: Tensor,
    /// Row indices of the training split.
    pub train_idx: Vec<usize>,
    /// Row indices of the test split (disjoint from training).
    pub test_idx: Vec<usize>,
    /// Per-feature training means.
    pub feat_mean: Vec<f64>,
    /// Per-feature training standard deviations (constant features clamp
    /// to 1).
    pub feat_std: Vec<f64>,
    /// Training target mean (0 for classification).
    pub target_mean: f64,
    /// Training target standard deviation (1 for classification).
    pub target_std: f64,
    /// Bernoulli targets?
    pub classification: bool,
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let d = t.cols();
    let mut out = Tensor::zeros(&[idx.len(), d]);
    for (r, &i) in idx.iter().enumerate() {
        for c in 0..d {
            out.data_mut()[r * d + c] = t.at(i, c);
        }
    }
    out
}

impl Dataset {
    /// Training features.
    pub fn train_x(&self) -> Tensor {
        gather_rows(&self.x, &self.train_idx)
    }

    /// Training targets.
    pub fn train_y(&self) -> Tensor {
        gather_rows(&self.y, &self.train_idx)
    }

    /// Test features.
    pub fn test_x(&self) -> Tensor {
        gather_rows(&self.x, &self.test_idx)
    }

    /// Test targets.
    pub fn test_y(&self) -> Tensor {
        gather_rows(&self.y, &self.test_idx)
    }

    /// Training-set size.
    pub fn n_train(&self) -> usize {
        self.train_idx.len()
    }

    /// Maps a raw feature row into standardized coordinates.
    pub fn standardize_features(&self, raw: &Tensor) -> Tensor {
        let d = raw.cols();
        let mut out = raw.clone();
        for r in 0..raw.rows() {
            for c in 0..d {
                out.data_mut()[r * d + c] = (raw.at(r, c) - self.feat_mean[c]) / self.feat_std[c];
            }
        }
        out
    }

    /// Returns a standardized target to its original scale.
    pub fn unstandardize_target(&self, v: f64) -> f64 {
        v * self.target_std + self.target_mean
    }

    /// Standardizes a raw-scale target value.
    pub fn standardize_target(&self, v: f64) -> f64 {
        (v - self.target_mean) / self.target_std
    }

    /// RMSE of predicting the training mean on the test split — the
    /// reference scale of the 5× divergence filter (≈ 1 on standardized
    /// targets).
    pub fn mean_predictor_rmse(&self) -> f64 {
        let ty = self.train_y();
        let mean = ty.data().iter().sum::<f64>() / ty.len() as f64;
        let te = self.test_y();
        (te.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / te.len() as f64).sqrt()
    }
}

fn split_and_standardize(
    name: &str,
    x_raw: Tensor,
    y_raw: Tensor,
    seed: u64,
    classification: bool,
) -> Result<Dataset> {
    let n = x_raw.rows();
    if n < 2 {
        return Err(Error::Config(format!("dataset '{name}' needs ≥ 2 rows, got {n}")));
    }
    if !x_raw.all_finite() || !y_raw.all_finite() {
        return Err(Error::NonFinite(format!("dataset '{name}' contains NaN/inf")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);
    let n_train = (n * 8) / 10;
    let train_idx = perm[..n_train].to_vec();
    let test_idx = perm[n_train..].to_vec();
    let d = x_raw.cols();
    let mut feat_mean = vec![0.0; d];
    let mut feat_std = vec![0.0; d];
    for c in 0..d {
        let vals: Vec<f64> = train_idx.iter().map(|&i| x_raw.at(i, c)).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        feat_mean[c] = m;
        feat_std[c] = if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 };
    }
    let (target_mean, target_std) = if classification {
        (0.0, 1.0)
    } else {
        let vals: Vec<f64> = train_idx.iter().map(|&i| y_raw.at(i, 0)).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / vals.len() as f64;
        (m, if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
    };
    let mut x = x_raw;
    for r in 0..n {
        for c in 0..d {
            x.data_mut()[r * d + c] = (x.at(r, c) - feat_mean[c]) / feat_std[c];
        }
    }
    let mut y = y_raw;
    for r in 0..n {
        y.data_mut()[r] = (y.at(r, 0) - target_mean) / target_std;
    }
    Ok(Dataset {
        name: name.to_string(),
        x,
        y,
        train_idx,
        test_idx,
        feat_mean,
        feat_std,
        target_mean,
        target_std,
        classification,
    })
}

/// Loads a headed numeric CSV, splits 80/20 by a seeded permutation, and
/// standardizes on training statistics. Targets that are all {0,1} are
/// treated as classification labels and left unstandardized.
pub fn load_csv(path: impl AsRef<Path>, target_column: &str, seed: u64) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        .clone();
    let target_col = headers
        .iter()
        .position(|h| h == target_column)
        .ok_or_else(|| {
            Error::Parse(format!("target column '{target_column}' not in header {headers:?}"))
        })?;
    let d = headers.len() - 1;
    if d == 0 {
        return Err(Error::Parse("CSV has no feature columns".into()));
    }
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != headers.len() {
            return Err(Error::Parse(format!(
                "line {line}: expected {} cells, found {}",
                headers.len(),
                rec.len()
            )));
        }
        for (c, cell) in rec.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::Parse(format!("line {line}: non-numeric cell '{cell}'")))?;
            if c == target_col {
                ys.push(v);
            } else {
                xs.push(v);
            }
        }
    }
    let n = ys.len();
    let classification = ys.iter().all(|&v| v == 0.0 || v == 1.0);
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    split_and_standardize(
        &stem,
        Tensor::matrix(n, d, xs),
        Tensor::matrix(n, 1, ys),
        seed,
        classification,
    )
}

/// The smooth 1-D target `sin(1.5x)·exp(−0.2x²)` used by the toy dataset.
pub fn toy_f(x: f64) -> f64 {
    (1.5 * x).sin() * (-0.2 * x * x).exp()
}

/// Toy regression set: `n` uniform inputs on [−3, 3], `y = f(x) + 0.1·ε`.
pub fn synth_toy_1d(n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.gen_range(-3.0..3.0);
        let e: f64 = crate::gp::standard_normal(&[1, 1], &mut rng).item();
        xs.push(x);
        ys.push(toy_f(x) + 0.1 * e);
    }
    split_and_standardize("toy1d", Tensor::matrix(n, 1, xs), Tensor::matrix(n, 1, ys), seed, false)
}

/// Input-dependent noise scale of the heteroscedastic toy:
/// `σ(x) = 0.1 + 0.4·|x|/3`, narrowest at the origin.
pub fn het_sigma(x: f64) -> f64 {
    0.1 + 0.4 * x.abs() / 3.0
}

/// Heteroscedastic set: `y = sin(2x) + σ(x)·ε` on [−3, 3].
pub fn synth_heteroscedastic(n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = rng.gen_range(-3.0..3.0);
        let e: f64 = crate::gp::standard_normal(&[1, 1], &mut rng).item();
        xs.push(x);
        ys.push((2.0 * x).sin() + het_sigma(x) * e);
    }
    split_and_standardize("het", Tensor::matrix(n, 1, xs), Tensor::matrix(n, 1, ys), seed, false)
}

/// Where a dataset comes from; the config-file counterpart of the loaders.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSpec {
    /// Headed numeric CSV with a named target column.
    Csv {
        /// File path.
        path: String,
        /// Target column name.
        target: String,
        /// Split seed.
        #[serde(default)]
        seed: u64,
    },
    /// [`synth_toy_1d`].
    Toy1d {
        /// Sample count.
        n: usize,
        /// Generator seed.
        #[serde(default)]
        seed: u64,
    },
    /// [`synth_heteroscedastic`].
    Het {
        /// Sample count.
        n: usize,
        /// Generator seed.
        #[serde(default)]
        seed: u64,
    },
}

impl DataSpec {
    /// Materializes the dataset.
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSpec::Csv { path, target, seed } => load_csv(path, target, *seed),
            DataSpec::Toy1d { n, seed } => synth_toy_1d(*n, *seed),
            DataSpec::Het { n, seed } => synth_heteroscedastic(*n, *seed),
        }
    }
}

/// Training hyper-parameters; the JSON config schema is exactly these fields.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Objective / method.
    pub objective: Objective,
    /// GP layers.
    #[serde(default = "defaults::depth")]
    pub depth: usize,
    /// Inducing points per layer.
    #[serde(default = "defaults::m_inducing")]
    pub m_inducing: usize,
    /// Euler steps of the transport.
    #[serde(default = "defaults::n_steps")]
    pub n_steps: usize,
    /// OM path-action weight.
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    /// Bridge dynamics parameters.
    #[serde(default)]
    pub bridge: crate::bridge::BridgeParams,
    /// Adam learning rate.
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    /// Minibatch size.
    #[serde(default = "defaults::batch")]
    pub batch: usize,
    /// Epochs; omitted → scaled as `max(5, round(10⁶/N_train))`.
    #[serde(default)]
    pub epochs: Option<usize>,
    /// Monte-Carlo samples per training step.
    #[serde(default = "defaults::mc_train")]
    pub mc_train: usize,
    /// Monte-Carlo samples per evaluation.
    #[serde(default = "defaults::mc_eval")]
    pub mc_eval: usize,
    /// Master seed for the whole run.
    #[serde(default)]
    pub seed: u64,
    /// Hidden width of velocity nets and amortisers.
    #[serde(default = "defaults::hidden")]
    pub hidden: usize,
    /// Fix the observation-noise variance instead of training it.
    #[serde(default)]
    pub fixed_noise: Option<f64>,
    /// Evaluate the test metrics every k-th epoch (the final epoch is always
    /// evaluated).
    #[serde(default = "defaults::eval_every")]
    pub eval_every: usize,
}

mod defaults {
    pub fn depth() -> usize {
        2
    }
    pub fn m_inducing() -> usize {
        64
    }
    pub fn n_steps() -> usize {
        10
    }
    pub fn alpha() -> f64 {
        1.0
    }
    pub fn lr() -> f64 {
        1e-2
    }
    pub fn batch() -> usize {
        256
    }
    pub fn mc_train() -> usize {
        2
    }
    pub fn mc_eval() -> usize {
        32
    }
    pub fn hidden() -> usize {
        128
    }
    pub fn eval_every() -> usize {
        1
    }
}

/// Epoch budget when the config leaves it automatic: roughly constant total
/// steps at batch 256 — 100 epochs at 10⁴ points, proportionally fewer for
/// larger sets, more for smaller — floored at 5.
pub fn scaled_epochs(n_train: usize) -> usize {
    ((1e6 / n_train.max(1) as f64).round() as usize).max(5)
}

impl TrainConfig {
    /// A config with the protocol defaults for the given objective.
    pub fn for_objective(objective: Objective) -> Self {
        serde_json::from_value(serde_json::json!({ "objective": objective.name() })).unwrap()
    }

    /// Validates integer/positivity constraints.
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0
            || self.m_inducing == 0
            || self.n_steps == 0
            || self.batch == 0
            || self.mc_train == 0
            || self.mc_eval == 0
            || self.eval_every == 0
            || self.hidden == 0
        {
            return Err(Error::Config("all size parameters must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.alpha >= 0.0 && self.alpha.is_finite())
        {
            return Err(Error::Config("lr must be positive, alpha non-negative".into()));
        }
        if let Some(v) = self.fixed_noise {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config("fixed_noise must be positive".into()));
            }
        }
        self.bridge.validate()
    }

    /// Structural model config for a dataset kind.
    pub fn model_config(&self, classification: bool) -> ModelConfig {
        ModelConfig {
            objective: self.objective,
            depth: self.depth,
            m_inducing: self.m_inducing,
            n_steps: self.n_steps,
            alpha: self.alpha,
            bridge: self.bridge.clone(),
            hidden: self.hidden,
            fixed_noise: self.fixed_noise,
            classification,
        }
    }

    /// SHA-256 of the canonical JSON encoding, truncated to 16 hex chars.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Hash with the seed zeroed: identifies a sweep *cell* — runs that
    /// differ only by seed aggregate together, runs that differ in any other
    /// knob (e.g. an α sweep) form separate cells.
    pub fn cell_hash(&self) -> String {
        let mut cell = self.clone();
        cell.seed = 0;
        cell.hash()
    }
}

/// Per-epoch trajectory entry of a run record.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    /// Epoch index (0-based).
    pub epoch: usize,
    /// Mean training objective over the epoch's batches.
    pub train_loss: f64,
    /// Test RMSE (standardized targets).
    pub test_rmse: f64,
    /// Test NLL (mixture for regression).
    pub test_nll: f64,
}

/// Everything a finished run reports; serialized as one JSONL line.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunRecord {
    /// Hash of the training config.
    pub config_hash: String,
    /// Seed-independent config hash; aggregation cell key.
    #[serde(default)]
    pub cell_hash: String,
    /// Objective name.
    pub method: String,
    /// Dataset name.
    pub dataset: String,
    /// Seed of the run.
    pub seed: u64,
    /// Final test RMSE (standardized targets).
    pub final_rmse: f64,
    /// Final test NLL.
    pub final_nll: f64,
    /// Coverage levels, in emission order.
    pub coverage_levels: Vec<f64>,
    /// Empirical coverage per level.
    pub coverage: Vec<f64>,
    /// Per-epoch trajectory (subject to `eval_every` thinning).
    pub epochs: Vec<EpochRecord>,
    /// Wall-clock seconds (excluded from the content hash).
    pub wall_clock_s: f64,
    /// Euler steps used at evaluation when it differs from training.
    #[serde(default)]
    pub steps: Option<usize>,
    /// Training aborted by the divergence hook.
    #[serde(default)]
    pub diverged: bool,
}

impl RunRecord {
    /// Hash of the record's deterministic content (wall-clock zeroed).
    pub fn content_hash(&self) -> String {
        let mut clone = self.clone();
        clone.wall_clock_s = 0.0;
        let json = serde_json::to_string(&clone).expect("record serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Appends records as JSON-lines.
pub fn write_records_jsonl(path: impl AsRef<Path>, records: &[RunRecord]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

/// Reads a JSONL record file.
pub fn read_records_jsonl(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("record line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

/// A trained model together with its parameters and provenance.
#[derive(Debug)]
pub struct TrainedModel {
    /// Training hyper-parameters.
    pub config: TrainConfig,
    /// Structural config used to rebuild the model.
    pub model_cfg: ModelConfig,
    /// Input dimensionality the model was built for.
    pub d_in: usize,
    /// All trainable parameters.
    pub store: ParamStore,
    /// Model structure referencing the store.
    pub model: Model,
}

/// Test metrics of one evaluation pass.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct Metrics {
    /// Root-mean-square error on standardized targets.
    pub rmse: f64,
    /// Negative log likelihood (mixture over MC draws for regression).
    pub nll: f64,
}

fn mean_of_draws(draws: &[Tensor]) -> Tensor {
    let mut acc = Tensor::zeros(draws[0].shape());
    for d in draws {
        acc.add_assign(d);
    }
    acc.scaled(1.0 / draws.len() as f64)
}

/// Mixture negative log likelihood: per point,
/// `−log((1/S)·Σ_s N(y | f_s, σ²))`, averaged over points. At `S = 1` this
/// is the plain Gaussian NLL.
pub fn mixture_nll(draws: &[Tensor], y: &Tensor, noise_var: f64) -> f64 {
    let s = draws.len();
    let n = y.rows();
    let log_norm = -0.5 * (2.0 * std::f64::consts::PI * noise_var).ln();
    let mut total = 0.0;
    for i in 0..n {
        let logs: Vec<f64> = draws
            .iter()
            .map(|f| {
                let r = y.at(i, 0) - f.at(i, 0);
                log_norm - 0.5 * r * r / noise_var
            })
            .collect();
        let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logs.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
        total += -(lse - (s as f64).ln());
    }
    total / n as f64
}

/// Metrics from precomputed predictive draws (one tensor per MC sample).
pub fn metrics_from_draws(
    draws: &[Tensor],
    y: &Tensor,
    noise_var: Option<f64>,
    classification: bool,
) -> Metrics {
    let mean = mean_of_draws(draws);
    if classification {
        let probs = {
            let mut acc = Tensor::zeros(y.shape());
            for d in draws {
                let p = d.map(crate::diffcore::tensor::sigmoid);
                acc.add_assign(&p);
            }
            acc.scaled(1.0 / draws.len() as f64)
        };
        let nll = probs
            .zip(y, |p, yi| {
                let p = p.clamp(1e-12, 1.0 - 1e-12);
                -(yi * p.ln() + (1.0 - yi) * (1.0 - p).ln())
            })
            .data()
            .iter()
            .sum::<f64>()
            / y.rows() as f64;
        let rmse = (mean
            .zip(y, |m, yi| {
                let p = crate::diffcore::tensor::sigmoid(m);
                (p - yi) * (p - yi)
            })
            .data()
            .iter()
            .sum::<f64>()
            / y.rows() as f64)
            .sqrt();
        Metrics { rmse, nll }
    } else {
        let var = noise_var.expect("regression evaluation needs a noise variance");
        let rmse = (mean
            .zip(y, |m, yi| (m - yi) * (m - yi))
            .data()
            .iter()
            .sum::<f64>()
            / y.rows() as f64)
            .sqrt();
        Metrics { rmse, nll: mixture_nll(draws, y, var) }
    }
}

/// Evaluates a model on the dataset's test split with `s` MC samples and
/// `n_steps` transport steps.
pub fn evaluate(
    trained: &TrainedModel,
    ds: &Dataset,
    s: usize,
    n_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Metrics> {
    let tx = ds.test_x();
    let ty = ds.test_y();
    let draws = few_step_predict(&trained.store, &trained.model, &tx, n_steps, s, rng)?;
    Ok(metrics_from_draws(
        &draws,
        &ty,
        trained.model.likelihood.noise_var(&trained.store),
        ds.classification,
    ))
}

/// Empirical coverage from precomputed draws: the observation noise is
/// re-estimated from training residuals as
/// `σ̂² = max(Var(y_train − f̂_train) − mean Var_q[f], 10⁻⁴)`, the predictive
/// at a test point is `N(f̂, epistemic + σ̂²)`, and coverage is the fraction
/// of targets inside the two-sided z interval per level.
pub fn coverage_from_draws(
    y_train: &Tensor,
    train_draws: &[Tensor],
    y_test: &Tensor,
    test_draws: &[Tensor],
    levels: &[f64],
) -> Vec<f64> {
    let f_train = mean_of_draws(train_draws);
    let resid_var = {
        let r = y_train.zip(&f_train, |a, b| a - b);
        let m = r.data().iter().sum::<f64>() / r.len() as f64;
        r.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / r.len() as f64
    };
    let mean_q_var = {
        let s = train_draws.len() as f64;
        let mut acc = 0.0;
        for i in 0..y_train.rows() {
            let m = train_draws.iter().map(|d| d.at(i, 0)).sum::<f64>() / s;
            acc += train_draws.iter().map(|d| (d.at(i, 0) - m).powi(2)).sum::<f64>() / s;
        }
        acc / y_train.rows() as f64
    };
    let sigma2 = (resid_var - mean_q_var).max(1e-4);
    let f_test = mean_of_draws(test_draws);
    let s = test_draws.len() as f64;
    let normal = Normal::new(0.0, 1.0).unwrap();
    levels
        .iter()
        .map(|&alpha| {
            let z = normal.inverse_cdf(0.5 + alpha / 2.0);
            let mut hit = 0usize;
            for i in 0..y_test.rows() {
                let m = f_test.at(i, 0);
                let epi =
                    test_draws.iter().map(|d| (d.at(i, 0) - m).powi(2)).sum::<f64>() / s;
                let half = z * (epi + sigma2).sqrt();
                if (y_test.at(i, 0) - m).abs() <= half {
                    hit += 1;
                }
            }
            hit as f64 / y_test.rows() as f64
        })
        .collect()
}

/// Coverage of a trained model at the given levels.
pub fn coverage(
    trained: &TrainedModel,
    ds: &Dataset,
    levels: &[f64],
    s: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let train_draws = few_step_predict(
        &trained.store,
        &trained.model,
        &ds.train_x(),
        trained.model.n_steps,
        s,
        rng,
    )?;
    let test_draws = few_step_predict(
        &trained.store,
        &trained.model,
        &ds.test_x(),
        trained.model.n_steps,
        s,
        rng,
    )?;
    Ok(coverage_from_draws(&ds.train_y(), &train_draws, &ds.test_y(), &test_draws, levels))
}

fn eval_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15 ^ ((epoch as u64) << 20))
}

/// Trains a model under the config's objective and returns it with its run
/// record. Bit-deterministic per seed; a non-finite training loss aborts
/// with the epoch/step in the error (the divergence-filter hook).
/// Attaches a location to the two error shapes a diverging run produces: a
/// non-finite value, or a covariance that jitter can no longer repair (the
/// kernel parameters blew up — same divergence, same abort).
fn locate_divergence(e: Error, at: &str) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("{msg} ({at})")),
        Error::NotPositiveDefinite { max_jitter } => Error::NonFinite(format!(
            "covariance lost positive definiteness (jitter {max_jitter:e}) ({at})"
        )),
        other => other,
    }
}

pub fn train(config: &TrainConfig, ds: &Dataset) -> Result<(TrainedModel, RunRecord)> {
    config.validate()?;
    let t0 = Instant::now();
    let tx = ds.train_x();
    let ty = ds.train_y();
    let n_train = tx.rows();
    let mut store = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model_cfg = config.model_config(ds.classification);
    let model = build_model(&mut store, &model_cfg, &tx, &mut init_rng)?;
    let epochs = config.epochs.unwrap_or_else(|| scaled_epochs(n_train));
    let mut opt = Adam::new(&store, config.lr);
    let mut train_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut idx: Vec<usize> = (0..n_train).collect();
    let mut trajectory = Vec::new();
    let mut trained = TrainedModel {
        config: config.clone(),
        model_cfg,
        d_in: tx.cols(),
        store,
        model,
    };
    for epoch in 0..epochs {
        idx.shuffle(&mut train_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (step, chunk) in idx.chunks(config.batch).enumerate() {
            let bx = gather_rows(&tx, chunk);
            let by = gather_rows(&ty, chunk);
            let mut g = Graph::new();
            let bind = trained.store.bind(&mut g);
            let (root, bd) = objective_loss(
                &mut g,
                &bind,
                &trained.model,
                &bx,
                &by,
                n_train,
                config.mc_train,
                epoch,
                &mut train_rng,
            )
            .map_err(|e| locate_divergence(e, &format!("epoch {epoch}, step {step}")))?;
            if !bd.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss (epoch {epoch}, step {step})"
                )));
            }
            let grads = g
                .backward(root)
                .map_err(|e| locate_divergence(e, &format!("epoch {epoch}, step {step}")))?;
            let gvec = bind.grads(&trained.store, &grads);
            opt.step(&mut trained.store, &gvec);
            epoch_loss += bd.total;
            batches += 1;
        }
        if epoch % config.eval_every == 0 || epoch + 1 == epochs {
            let m = evaluate(
                &trained,
                ds,
                config.mc_eval,
                config.n_steps,
                &mut eval_rng(config.seed, epoch),
            )
            .map_err(|e| locate_divergence(e, &format!("evaluation after epoch {epoch}")))?;
            trajectory.push(EpochRecord {
                epoch,
                train_loss: epoch_loss / batches.max(1) as f64,
                test_rmse: m.rmse,
                test_nll: m.nll,
            });
        }
    }
    let final_metrics = evaluate(
        &trained,
        ds,
        config.mc_eval,
        config.n_steps,
        &mut eval_rng(config.seed, epochs),
    )
    .map_err(|e| locate_divergence(e, "final evaluation"))?;
    let cov = coverage(
        &trained,
        ds,
        &COVERAGE_LEVELS,
        config.mc_eval,
        &mut eval_rng(config.seed, epochs + 1),
    )
    .map_err(|e| locate_divergence(e, "final evaluation"))?;
    let record = RunRecord {
        config_hash: config.hash(),
        cell_hash: config.cell_hash(),
        method: config.objective.name().to_string(),
        dataset: ds.name.clone(),
        seed: config.seed,
        final_rmse: final_metrics.rmse,
        final_nll: final_metrics.nll,
        coverage_levels: COVERAGE_LEVELS.to_vec(),
        coverage: cov,
        epochs: trajectory,
        wall_clock_s: t0.elapsed().as_secs_f64(),
        steps: None,
        diverged: false,
    };
    Ok((trained, record))
}

/// The shared divergence predicate: non-finite/absent metrics or test RMSE
/// above 5× the mean-predictor baseline. Every method goes through this one
/// function, so exclusion is symmetric by construction.
pub fn is_divergent(record: &RunRecord, baseline_rmse: f64) -> bool {
    record.diverged || !record.final_rmse.is_finite() || record.final_rmse > 5.0 * baseline_rmse
}

/// Aggregated cell of a sweep: one (method, dataset) pair.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CellSummary {
    /// Objective name.
    pub method: String,
    /// Dataset name.
    pub dataset: String,
    /// Seed-independent config hash distinguishing cells that share a
    /// method and dataset but differ in another knob (e.g. α).
    #[serde(default)]
    pub cell_hash: String,
    /// Seeds surviving the filter.
    pub n: usize,
    /// Seeds excluded by the symmetric divergence filter.
    pub excluded_seeds: usize,
    /// Mean final RMSE over surviving seeds.
    pub rmse_mean: f64,
    /// Std of final RMSE.
    pub rmse_std: f64,
    /// Mean final NLL.
    pub nll_mean: f64,
    /// Std of final NLL.
    pub nll_std: f64,
}

/// Sweep output: every raw record plus filtered per-cell aggregates.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SweepOutcome {
    /// All run records, including diverged ones.
    pub records: Vec<RunRecord>,
    /// Mean±std per (method, dataset, cell) after the symmetric filter.
    pub cells: Vec<CellSummary>,
}

fn mean_std(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let m = vals.iter().sum::<f64>() / n;
    let v = if vals.len() > 1 {
        vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, v.sqrt())
}

/// Applies the symmetric divergence filter to records grouped by dataset:
/// a seed flagged under *any* method is dropped for *all* methods of that
/// dataset (keeping pairings aligned), then aggregates surviving seeds.
pub fn aggregate_records(records: &[RunRecord], baselines: &[(String, f64)]) -> Vec<CellSummary> {
    let baseline_of = |ds: &str| {
        baselines
            .iter()
            .find(|(name, _)| name == ds)
            .map(|(_, b)| *b)
            .unwrap_or(1.0)
    };
    let mut datasets: Vec<String> = Vec::new();
    for r in records {
        if !datasets.contains(&r.dataset) {
            datasets.push(r.dataset.clone());
        }
    }
    let mut cells = Vec::new();
    for ds in &datasets {
        let group: Vec<&RunRecord> = records.iter().filter(|r| &r.dataset == ds).collect();
        let baseline = baseline_of(ds);
        let mut bad_seeds: Vec<u64> = group
            .iter()
            .filter(|r| is_divergent(r, baseline))
            .map(|r| r.seed)
            .collect();
        bad_seeds.sort_unstable();
        bad_seeds.dedup();
        let mut keys: Vec<(String, String)> = Vec::new();
        for r in &group {
            let key = (r.method.clone(), r.cell_hash.clone());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        for (method, cell_hash) in &keys {
            let of_cell: Vec<&&RunRecord> = group
                .iter()
                .filter(|r| &r.method == method && &r.cell_hash == cell_hash)
                .collect();
            let keep: Vec<&&&RunRecord> =
                of_cell.iter().filter(|r| !bad_seeds.contains(&r.seed)).collect();
            let excluded = of_cell.len() - keep.len();
            let rmse: Vec<f64> = keep.iter().map(|r| r.final_rmse).collect();
            let nll: Vec<f64> = keep.iter().map(|r| r.final_nll).collect();
            let (rmse_mean, rmse_std) =
                if rmse.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&rmse) };
            let (nll_mean, nll_std) =
                if nll.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&nll) };
            cells.push(CellSummary {
                method: method.clone(),
                dataset: ds.clone(),
                cell_hash: cell_hash.clone(),
                n: keep.len(),
                excluded_seeds: excluded,
                rmse_mean,
                rmse_std,
                nll_mean,
                nll_std,
            });
        }
    }
    cells
}

/// Runs jobs in parallel across `workers` isolated threads (each job's
/// randomness derives solely from its own config), aggregates surviving
/// seeds per cell, and accounts exclusions. A job whose training diverges
/// contributes a flagged record instead of failing the sweep.
pub fn sweep(jobs: &[(TrainConfig, Dataset)], workers: usize) -> Result<SweepOutcome> {
    use rayon::prelude::*;
    if jobs.is_empty() {
        return Ok(SweepOutcome { records: Vec::new(), cells: Vec::new() });
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<Result<RunRecord>> = pool.install(|| {
        jobs.par_iter()
            .map(|(cfg, ds)| match train(cfg, ds) {
                Ok((_, rec)) => Ok(rec),
                Err(Error::NonFinite(_)) => Ok(RunRecord {
                    config_hash: cfg.hash(),
                    cell_hash: cfg.cell_hash(),
                    method: cfg.objective.name().to_string(),
                    dataset: ds.name.clone(),
                    seed: cfg.seed,
                    final_rmse: f64::NAN,
                    final_nll: f64::NAN,
                    coverage_levels: COVERAGE_LEVELS.to_vec(),
                    coverage: Vec::new(),
                    epochs: Vec::new(),
                    wall_clock_s: 0.0,
                    steps: None,
                    diverged: true,
                }),
                Err(e) => Err(e),
            })
            .collect()
    });
    let mut records = Vec::with_capacity(results.len());
    for r in results {
        records.push(r?);
    }
    let mut baselines: Vec<(String, f64)> = Vec::new();
    for (_, ds) in jobs {
        if !baselines.iter().any(|(n, _)| n == &ds.name) {
            baselines.push((ds.name.clone(), ds.mean_predictor_rmse()));
        }
    }
    let cells = aggregate_records(&records, &baselines);
    Ok(SweepOutcome { records, cells })
}

/// Evaluates a trained model at several transport step counts, recording one
/// run record per step count (`steps` field set).
pub fn fewstep_eval(
    trained: &TrainedModel,
    ds: &Dataset,
    steps_list: &[usize],
    s: usize,
    seed: u64,
) -> Result<Vec<RunRecord>> {
    if trained.model.objective == Objective::Dsvi {
        return Err(Error::Config("few-step evaluation needs a transport model".into()));
    }
    steps_list
        .iter()
        .map(|&n_steps| {
            let m = evaluate(trained, ds, s, n_steps, &mut eval_rng(seed, n_steps))?;
            Ok(RunRecord {
                config_hash: trained.config.hash(),
                cell_hash: trained.config.cell_hash(),
                method: trained.config.objective.name().to_string(),
                dataset: ds.name.clone(),
                seed,
                final_rmse: m.rmse,
                final_nll: m.nll,
                coverage_levels: Vec::new(),
                coverage: Vec::new(),
                epochs: Vec::new(),
                wall_clock_s: 0.0,
                steps: Some(n_steps),
                diverged: false,
            })
        })
        .collect()
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointHeader {
    version: u32,
    config_hash: String,
    config: TrainConfig,
    model_cfg: ModelConfig,
    d_in: usize,
    param_names: Vec<String>,
    param_shapes: Vec<Vec<usize>>,
}

/// Saves a model checkpoint: a JSON header line (version, config hash,
/// configs, parameter manifest) followed by one JSON line of parameter data.
pub fn save_checkpoint(path: impl AsRef<Path>, trained: &TrainedModel) -> Result<()> {
    let names: Vec<String> =
        trained.store.iter().map(|(id, _)| trained.store.name(id).to_string()).collect();
    let shapes: Vec<Vec<usize>> =
        trained.store.iter().map(|(_, t)| t.shape().to_vec()).collect();
    let data: Vec<&[f64]> = trained.store.iter().map(|(_, t)| t.data()).collect();
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config_hash: trained.config.hash(),
        config: trained.config.clone(),
        model_cfg: trained.model_cfg.clone(),
        d_in: trained.d_in,
        param_names: names,
        param_shapes: shapes,
    };
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{}", serde_json::to_string(&header).map_err(|e| Error::Parse(e.to_string()))?)?;
    writeln!(f, "{}", serde_json::to_string(&data).map_err(|e| Error::Parse(e.to_string()))?)?;
    Ok(())
}

/// Loads a checkpoint saved by [`save_checkpoint`], rebuilding the model
/// structure deterministically and restoring every parameter. The manifest
/// (names and shapes) must match the rebuilt structure exactly.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainedModel> {
    let content = std::fs::read_to_string(path)?;
    let mut lines = content.lines();
    let header: CheckpointHeader = serde_json::from_str(
        lines.next().ok_or_else(|| Error::Parse("empty checkpoint".into()))?,
    )
    .map_err(|e| Error::Parse(format!("checkpoint header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Parse(format!(
            "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            header.version
        )));
    }
    let data: Vec<Vec<f64>> = serde_json::from_str(
        lines.next().ok_or_else(|| Error::Parse("checkpoint missing data line".into()))?,
    )
    .map_err(|e| Error::Parse(format!("checkpoint data: {e}")))?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(header.config.seed);
    let placeholder = Tensor::zeros(&[header.model_cfg.m_inducing.max(2), header.d_in]);
    let model = build_model(&mut store, &header.model_cfg, &placeholder, &mut rng)?;
    let ids: Vec<crate::diffcore::nn::ParamId> = store.iter().map(|(id, _)| id).collect();
    let names: Vec<String> = ids.iter().map(|&id| store.name(id).to_string()).collect();
    if names != header.param_names {
        return Err(Error::Parse("checkpoint manifest does not match model structure".into()));
    }
    if data.len() != names.len() {
        return Err(Error::Parse(format!(
            "checkpoint has {} tensors, model needs {}",
            data.len(),
            names.len()
        )));
    }
    for (i, (vals, shape)) in data.into_iter().zip(&header.param_shapes).enumerate() {
        let expected: usize = shape.iter().product();
        if vals.len() != expected {
            return Err(Error::Parse(format!("checkpoint tensor {i} has wrong length")));
        }
        if store.get(ids[i]).shape() != shape.as_slice() {
            return Err(Error::Parse(format!("checkpoint tensor {i} has wrong shape")));
        }
        store.set(ids[i], Tensor::new(shape.clone(), vals));
    }
    Ok(TrainedModel {
        config: header.config,
        model_cfg: header.model_cfg,
        d_in: header.d_in,
        store,
        model,
    })
}
