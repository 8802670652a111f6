//! Dense row-major f64 tensors and the raw numerical kernels shared by the
//! evaluation graph and the gradient-free prediction paths.
//!
//! Tensors are immutable values: every kernel allocates its output. Shapes are
//! small (matrices up to a few hundred rows), so clarity and deterministic
//! summation order take priority over blocking or parallel reductions.

use crate::{Error, Result};

/// Dense row-major tensor of 64-bit floats.
///
/// `shape` lists the extents; `data.len()` always equals the product of the
/// extents. Rank 0 (scalar), 1 (vector) and 2 (matrix) cover everything the
/// crate needs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and a flat row-major buffer.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match buffer length {}",
            shape,
            data.len()
        );
        Tensor { shape, data }
    }

    /// Rank-0 scalar.
    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    /// Rank-1 vector.
    pub fn vector(v: Vec<f64>) -> Self {
        Tensor { shape: vec![v.len()], data: v }
    }

    /// `rows × cols` matrix from a row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    /// All-one tensor of the given shape.
    pub fn ones(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![1.0; shape.iter().product()] }
    }

    /// `n × n` identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Shape slice.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Flat row-major data.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable flat data (used by optimisers and in-place accumulation).
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// True when the tensor holds no elements.
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    /// Matrix entry accessor (rank 2 only).
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Number of rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on rank-{} tensor", self.shape.len());
        self.shape[0]
    }

    /// Number of columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on rank-{} tensor", self.shape.len());
        self.shape[1]
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of all elements in flat order.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Euclidean norm of the flattened tensor.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Same buffer under a new shape with identical element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        Tensor { shape, data: self.data.clone() }
    }

    /// Elementwise map.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise binary combination of same-shape tensors.
    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip of mismatched shapes");
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// In-place `self += other` for same-shape tensors.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign of mismatched shapes");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self * c` elementwise.
    pub fn scaled(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }
}

// ── broadcasting ──────────────────────────────────────────────────────────

/// Result shape of broadcasting `a` against `b` under the usual trailing-axis
/// rules (a size-1 axis stretches; missing leading axes count as size 1).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}")));
        };
    }
    Ok(out)
}

/// Maps a flat index in the broadcast output back to a flat index of an input
/// with shape `src` (size-1 axes repeat).
fn src_index(flat: usize, out_shape: &[usize], src: &[usize]) -> usize {
    let rank = out_shape.len();
    let offset = rank - src.len();
    let mut rem = flat;
    let mut idx = 0usize;
    let mut stride = 1usize;
    // Precompute strides of src on the fly by walking axes from the last.
    let mut src_strides = vec![0usize; src.len()];
    for (k, s) in src.iter().enumerate().rev() {
        src_strides[k] = stride;
        stride *= s;
    }
    let mut out_strides = vec![0usize; rank];
    stride = 1;
    for (k, s) in out_shape.iter().enumerate().rev() {
        out_strides[k] = stride;
        stride *= s;
    }
    for k in 0..rank {
        let coord = rem / out_strides[k];
        rem %= out_strides[k];
        if k >= offset && src[k - offset] != 1 {
            idx += coord * src_strides[k - offset];
        }
    }
    idx
}

/// Elementwise binary op with broadcasting; returns the broadcast result.
pub fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        return Ok(a.zip(b, f));
    }
    let shape = broadcast_shape(&a.shape, &b.shape)?;
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for flat in 0..n {
        let av = a.data[src_index(flat, &shape, &a.shape)];
        let bv = b.data[src_index(flat, &shape, &b.shape)];
        data.push(f(av, bv));
    }
    Ok(Tensor { shape, data })
}

/// Expands `a` to `shape` by broadcasting (no-op when shapes already agree).
pub fn broadcast_to(a: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if a.shape == shape {
        return Ok(a.clone());
    }
    let check = broadcast_shape(&a.shape, shape)?;
    if check != shape {
        return Err(Error::Shape(format!("cannot broadcast {:?} to {:?}", a.shape, shape)));
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for flat in 0..n {
        data.push(a.data[src_index(flat, shape, &a.shape)]);
    }
    Ok(Tensor { shape: shape.to_vec(), data })
}

/// Sums `grad` (shaped like the broadcast output) back down to `src` shape.
/// This is the reverse of [`broadcast_to`]: contributions that came from the
/// same source element are accumulated in flat output order.
pub fn reduce_to(grad: &Tensor, src: &[usize]) -> Tensor {
    if grad.shape == src {
        return grad.clone();
    }
    let mut out = Tensor::zeros(src);
    for flat in 0..grad.data.len() {
        let si = src_index(flat, &grad.shape, src);
        out.data[si] += grad.data[flat];
    }
    out
}

// ── linear algebra kernels ────────────────────────────────────────────────

/// Row-major matrix product `a (n×k) · b (k×m) → n×m`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Shape(format!("matmul {:?} × {:?}", a.shape, b.shape)));
    }
    let (n, k, m) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for l in 0..k {
            let av = a.data[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[l * m..(l + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
    Ok(Tensor::matrix(n, m, out))
}

/// Matrix transpose.
pub fn transpose(a: &Tensor) -> Tensor {
    assert_eq!(a.shape.len(), 2, "transpose of rank-{} tensor", a.shape.len());
    let (n, m) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a.data[i * m + j];
        }
    }
    Tensor::matrix(m, n, out)
}

/// Cholesky factorisation `a = L·Lᵀ` of a symmetric positive-definite matrix.
///
/// Only the lower triangle of `a` is read. No jitter is applied here; callers
/// that build Gram matrices use [`cholesky_jittered`].
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || a.shape[0] != a.shape[1] {
        return Err(Error::Shape(format!("cholesky of non-square {:?}", a.shape)));
    }
    let n = a.shape[0];
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.data[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::NotPositiveDefinite { max_jitter: 0.0 });
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(Tensor::matrix(n, n, l))
}

/// Jitter scale added to Gram-matrix diagonals before factorisation, relative
/// to the mean diagonal entry.
pub const BASE_JITTER: f64 = 1e-6;
/// Largest relative jitter tried before giving up.
pub const MAX_JITTER: f64 = 1e-2;

/// Cholesky with escalating diagonal jitter.
///
/// Adds `1e-6 · mean(diag)` to the diagonal before factorising; on failure the
/// jitter escalates tenfold up to `1e-2 · mean(diag)`, after which the error
/// is surfaced to the caller. Returns the factor together with the jitter
/// actually applied (absolute, already scaled by the mean diagonal).
pub fn cholesky_jittered(a: &Tensor) -> Result<(Tensor, f64)> {
    let n = a.shape[0];
    let mean_diag = (0..n).map(|i| a.data[i * n + i]).sum::<f64>() / n as f64;
    let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut rel = BASE_JITTER;
    loop {
        let jitter = rel * scale;
        let mut aj = a.clone();
        for i in 0..n {
            aj.data[i * n + i] += jitter;
        }
        match cholesky(&aj) {
            Ok(l) => return Ok((l, jitter)),
            Err(_) if rel < MAX_JITTER => rel *= 10.0,
            Err(_) => return Err(Error::NotPositiveDefinite { max_jitter: rel * scale }),
        }
    }
}

/// Solves `L·X = B` (lower triangular, forward substitution) for matrix `B`.
pub fn solve_lower(l: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = l.shape[0];
    if l.shape.len() != 2 || l.shape[0] != l.shape[1] || b.shape[0] != n {
        return Err(Error::Shape(format!("solve_lower {:?} \\ {:?}", l.shape, b.shape)));
    }
    let m = b.shape[1];
    let mut x = b.data.clone();
    for i in 0..n {
        for k in 0..i {
            let lik = l.data[i * n + k];
            for j in 0..m {
                x[i * m + j] -= lik * x[k * m + j];
            }
        }
        let d = l.data[i * n + i];
        for j in 0..m {
            x[i * m + j] /= d;
        }
    }
    Ok(Tensor::matrix(n, m, x))
}

/// Solves `Lᵀ·X = B` (upper triangular, back substitution) for matrix `B`.
pub fn solve_lower_transpose(l: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = l.shape[0];
    if l.shape.len() != 2 || l.shape[0] != l.shape[1] || b.shape[0] != n {
        return Err(Error::Shape(format!("solve_lowerᵀ {:?} \\ {:?}", l.shape, b.shape)));
    }
    let m = b.shape[1];
    let mut x = b.data.clone();
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let lki = l.data[k * n + i]; // (Lᵀ)_{ik}
            for j in 0..m {
                x[i * m + j] -= lki * x[k * m + j];
            }
        }
        let d = l.data[i * n + i];
        for j in 0..m {
            x[i * m + j] /= d;
        }
    }
    Ok(Tensor::matrix(n, m, x))
}

/// SiLU activation `x·σ(x)`.
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Logistic sigmoid with a branch that avoids overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(1 + eˣ)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
