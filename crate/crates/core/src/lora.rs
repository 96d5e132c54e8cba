//! Low-rank weight update `W' = W + alpha * A B` in double precision.
//!
//! `A` is d x r, `B` is r x k. Products accumulate row-major dot products in
//! index order, so the sequential and parallel paths agree bit-for-bit.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;

#[derive(Debug, Error)]
pub enum LoraError {
    #[error("rank {r} outside [1, min({d}, {k})]")]
    BadRank { d: usize, k: usize, r: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite entry at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("malformed tensor file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LoraError>;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LoraError::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(LoraError::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(p) => Err(LoraError::NonFinite(p / self.cols, p % self.cols)),
            None => Ok(()),
        }
    }

    /// `self * other`, one output row per task.
    pub fn matmul(&self, other: &Matrix, exec: Exec) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(LoraError::ShapeMismatch(format!(
                "cannot multiply {:?} by {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let (n, inner, m) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(n, m);
        if m == 0 {
            return Ok(out);
        }
        exec.for_each_chunk_mut(&mut out.data, m, |i, row| {
            let lhs = &self.data[i * inner..(i + 1) * inner];
            for (j, cell) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (p, a) in lhs.iter().enumerate() {
                    acc += a * other.data[p * m + j];
                }
                *cell = acc;
            }
        });
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    a: Matrix,
    b: Matrix,
    alpha: f64,
}

impl LoraAdapter {
    pub fn new(a: Matrix, b: Matrix, alpha: f64) -> Result<Self> {
        let (d, r) = a.shape();
        let (rb, k) = b.shape();
        if rb != r {
            return Err(LoraError::ShapeMismatch(format!(
                "A is {d}x{r} but B is {rb}x{k}"
            )));
        }
        if r == 0 || r > d.min(k) {
            return Err(LoraError::BadRank { d, k, r });
        }
        if !alpha.is_finite() {
            return Err(LoraError::Format(format!("alpha {alpha} is not finite")));
        }
        a.check_finite()?;
        b.check_finite()?;
        Ok(Self { a, b, alpha })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn rank(&self) -> usize {
        self.a.cols
    }

    /// (d, k) of the weight this adapter updates.
    pub fn target_shape(&self) -> (usize, usize) {
        (self.a.rows, self.b.cols)
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        Self {
            a: self.a.clone(),
            b: self.b.clone(),
            alpha,
        }
    }
}

/// Gaussian `A` with std `1/sqrt(r)`, zero `B`; the initial update is zero.
pub fn init_adapter(d: usize, k: usize, r: usize, alpha: f64, seed: u64) -> Result<LoraAdapter> {
    if r == 0 || r > d.min(k) {
        return Err(LoraError::BadRank { d, k, r });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / (r as f64).sqrt()).expect("positive std");
    let a = Matrix::from_fn(d, r, |_, _| normal.sample(&mut rng));
    LoraAdapter::new(a, Matrix::zeros(r, k), alpha)
}

pub fn delta(adapter: &LoraAdapter, exec: Exec) -> Matrix {
    adapter
        .a
        .matmul(&adapter.b, exec)
        .expect("adapter shapes validated at construction")
        .scale(adapter.alpha)
}

fn check_weight(w: &Matrix, adapter: &LoraAdapter) -> Result<()> {
    if w.shape() != adapter.target_shape() {
        return Err(LoraError::ShapeMismatch(format!(
            "weight is {:?}, adapter targets {:?}",
            w.shape(),
            adapter.target_shape()
        )));
    }
    Ok(())
}

pub fn merge(w: &Matrix, adapter: &LoraAdapter, exec: Exec) -> Result<Matrix> {
    check_weight(w, adapter)?;
    w.add(&delta(adapter, exec))
}

pub fn unmerge(merged: &Matrix, adapter: &LoraAdapter, exec: Exec) -> Result<Matrix> {
    check_weight(merged, adapter)?;
    merged.sub(&delta(adapter, exec))
}

/// Gradients of a loss w.r.t. `A` and `B` given `G = dL/dW'`:
/// `dA = alpha G B^T`, `dB = alpha A^T G`.
pub fn grad(adapter: &LoraAdapter, upstream: &Matrix, exec: Exec) -> Result<(Matrix, Matrix)> {
    if upstream.shape() != adapter.target_shape() {
        return Err(LoraError::ShapeMismatch(format!(
            "upstream is {:?}, adapter targets {:?}",
            upstream.shape(),
            adapter.target_shape()
        )));
    }
    let da = upstream.matmul(&adapter.b.transpose(), exec)?.scale(adapter.alpha);
    let db = adapter.a.transpose().matmul(upstream, exec)?.scale(adapter.alpha);
    Ok((da, db))
}

/// Singular values by one-sided Jacobi rotations, in descending order.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    let src = if m.rows >= m.cols { m.clone() } else { m.transpose() };
    let (rows, cols) = src.shape();
    let mut columns: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| src.get(i, j)).collect())
        .collect();
    const MAX_SWEEPS: usize = 60;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let (left, right) = columns.split_at_mut(q);
                let (cp, cq) = (&mut left[p], &mut right[0]);
                let alpha: f64 = cp.iter().map(|v| v * v).sum();
                let beta: f64 = cq.iter().map(|v| v * v).sum();
                let gamma: f64 = cp.iter().zip(cq.iter()).map(|(a, b)| a * b).sum();
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for (a, b) in cp.iter_mut().zip(cq.iter_mut()) {
                    let (x, y) = (*a, *b);
                    *a = c * x - s * y;
                    *b = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = columns
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Count of singular values above `tol * sigma_max`. The zero matrix has rank 0.
pub fn numerical_rank(m: &Matrix, tol: f64) -> Result<usize> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(LoraError::BadTolerance(tol));
    }
    let sv = singular_values(m);
    let max = sv.first().copied().unwrap_or(0.0);
    if max == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > tol * max).count())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParamSavings {
    pub lora_params: u64,
    pub full_params: u64,
    pub ratio: f64,
}

pub fn param_savings(d: u64, k: u64, r: u64) -> ParamSavings {
    let lora_params = r * (d + k);
    let full_params = d * k;
    ParamSavings {
        lora_params,
        full_params,
        ratio: lora_params as f64 / full_params as f64,
    }
}

/// Result of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Check `grad` on `L = 0.5 * ||W + alpha A B - T||^2` by central differences
/// of the forward merge, perturbing every entry of `A` and `B` by `step`.
pub fn check_gradients(
    adapter: &LoraAdapter,
    base: &Matrix,
    target: &Matrix,
    step: f64,
    exec: Exec,
) -> Result<GradCheck> {
    check_weight(base, adapter)?;
    check_weight(target, adapter)?;
    let loss = |ad: &LoraAdapter| -> f64 {
        let merged = merge(base, ad, Exec::Sequential).expect("shapes checked");
        0.5 * merged
            .data
            .iter()
            .zip(&target.data)
            .map(|(w, t)| (w - t) * (w - t))
            .sum::<f64>()
    };
    let upstream = merge(base, adapter, exec)?.sub(target)?;
    let (da, db) = grad(adapter, &upstream, exec)?;

    let na = adapter.a.data.len();
    let total = na + adapter.b.data.len();
    let errors = exec.map_range(total, |idx| {
        let mut plus = adapter.clone();
        let mut minus = adapter.clone();
        let (analytic, slot_p, slot_m) = if idx < na {
            (da.data[idx], &mut plus.a.data[idx], &mut minus.a.data[idx])
        } else {
            let j = idx - na;
            (db.data[j], &mut plus.b.data[j], &mut minus.b.data[j])
        };
        *slot_p += step;
        *slot_m -= step;
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * step);
        (rel_error(analytic, numeric), (analytic - numeric).abs())
    });
    Ok(errors.into_iter().fold(
        GradCheck {
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            checked: total,
        },
        |acc, (rel, abs)| GradCheck {
            max_rel_error: acc.max_rel_error.max(rel),
            max_abs_error: acc.max_abs_error.max(abs),
            checked: acc.checked,
        },
    ))
}

// Tensor files. Binary layout, little-endian: u64 d, u64 k, u64 r, f64 alpha,
// then A row-major, then B row-major. Weights: u64 d, u64 k, then row-major.

#[derive(Serialize, Deserialize)]
struct AdapterJson {
    d: usize,
    k: usize,
    r: usize,
    alpha: f64,
    a: Vec<f64>,
    b: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct WeightJson {
    d: usize,
    k: usize,
    data: Vec<f64>,
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)
        .map_err(|_| LoraError::Format("truncated header".into()))?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)
        .map_err(|_| LoraError::Format(format!("expected {n} values")))?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn dim(v: u64) -> Result<usize> {
    usize::try_from(v).map_err(|_| LoraError::Format(format!("dimension {v} too large")))
}

pub fn encode_adapter(adapter: &LoraAdapter) -> Vec<u8> {
    let (d, k) = adapter.target_shape();
    let mut out = Vec::with_capacity(32 + 8 * (adapter.a.data.len() + adapter.b.data.len()));
    for v in [d as u64, k as u64, adapter.rank() as u64] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&adapter.alpha.to_le_bytes());
    for v in adapter.a.data.iter().chain(&adapter.b.data) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_adapter(mut bytes: &[u8]) -> Result<LoraAdapter> {
    let d = dim(read_u64(&mut bytes)?)?;
    let k = dim(read_u64(&mut bytes)?)?;
    let r = dim(read_u64(&mut bytes)?)?;
    let alpha = f64::from_le_bytes(read_u64(&mut bytes)?.to_le_bytes());
    let a = read_f64s(&mut bytes, d * r)?;
    let b = read_f64s(&mut bytes, r * k)?;
    if !bytes.is_empty() {
        return Err(LoraError::Format(format!("{} trailing bytes", bytes.len())));
    }
    LoraAdapter::new(Matrix::from_vec(d, r, a)?, Matrix::from_vec(r, k, b)?, alpha)
}

pub fn save_adapter(adapter: &LoraAdapter, path: &Path) -> Result<()> {
    if is_json(path) {
        let (d, k) = adapter.target_shape();
        let doc = AdapterJson {
            d,
            k,
            r: adapter.rank(),
            alpha: adapter.alpha,
            a: adapter.a.data.clone(),
            b: adapter.b.data.clone(),
        };
        fs::write(path, serde_json::to_vec_pretty(&doc)?)?;
    } else {
        fs::File::create(path)?.write_all(&encode_adapter(adapter))?;
    }
    Ok(())
}

pub fn load_adapter(path: &Path) -> Result<LoraAdapter> {
    let bytes = fs::read(path)?;
    if is_json(path) {
        let doc: AdapterJson = serde_json::from_slice(&bytes)?;
        return LoraAdapter::new(
            Matrix::from_vec(doc.d, doc.r, doc.a)?,
            Matrix::from_vec(doc.r, doc.k, doc.b)?,
            doc.alpha,
        );
    }
    decode_adapter(&bytes)
}

pub fn save_weight(w: &Matrix, path: &Path) -> Result<()> {
    if is_json(path) {
        let doc = WeightJson {
            d: w.rows,
            k: w.cols,
            data: w.data.clone(),
        };
        fs::write(path, serde_json::to_vec_pretty(&doc)?)?;
        return Ok(());
    }
    let mut out = Vec::with_capacity(16 + 8 * w.data.len());
    out.extend_from_slice(&(w.rows as u64).to_le_bytes());
    out.extend_from_slice(&(w.cols as u64).to_le_bytes());
    for v in &w.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_weight(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path)?;
    let m = if is_json(path) {
        let doc: WeightJson = serde_json::from_slice(&bytes)?;
        Matrix::from_vec(doc.d, doc.k, doc.data)?
    } else {
        let mut rd = bytes.as_slice();
        let d = dim(read_u64(&mut rd)?)?;
        let k = dim(read_u64(&mut rd)?)?;
        let data = read_f64s(&mut rd, d * k)?;
        if !rd.is_empty() {
            return Err(LoraError::Format(format!("{} trailing bytes", rd.len())));
        }
        Matrix::from_vec(d, k, data)?
    };
    m.check_finite()?;
    Ok(m)
}

/// Seeded standard-normal matrix, for fixtures and diagnostics.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit std");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng))
}

/// Adapter with both factors random (non-zero update).
pub fn random_adapter(d: usize, k: usize, r: usize, alpha: f64, seed: u64) -> Result<LoraAdapter> {
    LoraAdapter::new(
        random_matrix(d, r, seed),
        random_matrix(r, k, seed.wrapping_add(0x9e37_79b9_7f4a_7c15)),
        alpha,
    )
}

/// Shape and scale of one randomized gradient-check instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradInstance {
    pub seed: u64,
    pub d: usize,
    pub k: usize,
    pub r: usize,
    pub alpha: f64,
}

impl GradInstance {
    /// Draw dims in `1..=max_dim`, a valid rank and alpha in [0.25, 4).
    pub fn draw(seed: u64, max_dim: usize) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151_7a7a_0f0f_3c3c);
        let max_dim = max_dim.max(1);
        let d = rng.random_range(1..=max_dim);
        let k = rng.random_range(1..=max_dim);
        let r = rng.random_range(1..=d.min(k));
        let alpha = rng.random_range(0.25..4.0);
        Self { seed, d, k, r, alpha }
    }

    pub fn run(&self, step: f64, exec: Exec) -> Result<GradCheck> {
        let ad = random_adapter(self.d, self.k, self.r, self.alpha, self.seed)?;
        let base = random_matrix(self.d, self.k, self.seed.wrapping_add(1));
        let target = random_matrix(self.d, self.k, self.seed.wrapping_add(2));
        check_gradients(&ad, &base, &target, step, exec)
    }
}
