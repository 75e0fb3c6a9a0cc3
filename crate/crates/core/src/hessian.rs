//! Layer-wise second-order statistics.
//!
//! Calibration inputs arrive as `n x d` slabs (features by samples) and are
//! folded into `H = 2 X Xᵀ` in `f64`. [`InverseCholesky`] holds the
//! upper-triangular `C` with `Cᵀ C = (H + λI)⁻¹`, which drives the solver's
//! error feedback.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor_io::DenseTensor;

pub const DEFAULT_LAMBDA_REL: f64 = 0.01;

#[derive(Debug, Error, PartialEq)]
pub enum HessianError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no calibration samples accumulated")]
    NoSamples,
    #[error("matrix is not positive definite at pivot {pivot}")]
    NotPositiveDefinite { pivot: usize },
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HessianAccumulator {
    n: usize,
    h: Vec<f64>,
    samples_seen: usize,
}

impl HessianAccumulator {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            h: vec![0.0; n * n],
            samples_seen: 0,
        }
    }

    /// Builds an accumulator from an explicit symmetric `H` (testing and
    /// analysis entry point).
    pub fn from_hessian(n: usize, h: Vec<f64>, samples_seen: usize) -> Result<Self, HessianError> {
        if h.len() != n * n {
            return Err(HessianError::ShapeMismatch(format!(
                "{n}x{n} hessian needs {} entries, got {}",
                n * n,
                h.len()
            )));
        }
        Ok(Self {
            n,
            h,
            samples_seen,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn samples_seen(&self) -> usize {
        self.samples_seen
    }

    /// Row-major `n x n` view of `H`.
    pub fn hessian(&self) -> &[f64] {
        &self.h
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.h[j * self.n + j]).collect()
    }

    /// `H += 2 X Xᵀ` for an `n x d` batch.
    pub fn accumulate(&mut self, batch: &DenseTensor) -> Result<(), HessianError> {
        if batch.rows() != self.n {
            return Err(HessianError::ShapeMismatch(format!(
                "calibration batch has {} rows, expected {}",
                batch.rows(),
                self.n
            )));
        }
        let n = self.n;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| batch.row(i).iter().map(|&v| v as f64).collect())
            .collect();
        for i in 0..n {
            for j in 0..=i {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let add = 2.0 * dot;
                self.h[i * n + j] += add;
                if i != j {
                    self.h[j * n + i] += add;
                }
            }
        }
        self.samples_seen += batch.cols();
        Ok(())
    }

    /// Adds another accumulator's statistics into this one.
    pub fn merge(&mut self, other: &HessianAccumulator) -> Result<(), HessianError> {
        if other.n != self.n {
            return Err(HessianError::ShapeMismatch(format!(
                "cannot merge {}-dim accumulator into {}-dim",
                other.n, self.n
            )));
        }
        for (a, b) in self.h.iter_mut().zip(&other.h) {
            *a += b;
        }
        self.samples_seen += other.samples_seen;
        Ok(())
    }

    /// `H` with rows and columns relabelled so that new index `k` is old
    /// index `perm.order()[k]`.
    pub fn permuted(&self, perm: &Permutation) -> Result<HessianAccumulator, HessianError> {
        if perm.len() != self.n {
            return Err(HessianError::ShapeMismatch(format!(
                "permutation of length {} for {}-dim hessian",
                perm.len(),
                self.n
            )));
        }
        let n = self.n;
        let order = perm.order();
        let mut h = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                h[a * n + b] = self.h[order[a] * n + order[b]];
            }
        }
        Ok(HessianAccumulator {
            n,
            h,
            samples_seen: self.samples_seen,
        })
    }

    pub fn finalize(&self, lambda_rel: f64) -> Result<InverseCholesky, HessianError> {
        if self.samples_seen == 0 {
            return Err(HessianError::NoSamples);
        }
        InverseCholesky::from_hessian(&self.h, self.n, lambda_rel)
    }

    /// `(H + λI)` after the dead-column rule, as used by [`Self::finalize`].
    pub fn regularized(&self, lambda_rel: f64) -> (Vec<f64>, f64) {
        regularize(&self.h, self.n, lambda_rel)
    }
}

/// Applies the dead-column rule and `λ = lambda_rel * mean(diag H)`.
fn regularize(h: &[f64], n: usize, lambda_rel: f64) -> (Vec<f64>, f64) {
    let mean_diag = (0..n).map(|j| h[j * n + j]).sum::<f64>() / n as f64;
    let lambda = lambda_rel * mean_diag;
    let mut a = h.to_vec();
    for j in 0..n {
        if a[j * n + j] == 0.0 {
            a[j * n + j] = 1.0;
        }
        a[j * n + j] += lambda;
    }
    (a, lambda)
}

/// In-place lower Cholesky factor of a symmetric positive-definite matrix;
/// the strict upper triangle is zeroed.
pub(crate) fn cholesky_lower(a: &mut [f64], n: usize) -> Result<(), HessianError> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(HessianError::NotPositiveDefinite { pivot: j });
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
        for k in (j + 1)..n {
            a[j * n + k] = 0.0;
        }
    }
    Ok(())
}

/// Upper-triangular factor `C` with `Cᵀ C = (H + λI)⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseCholesky {
    n: usize,
    factor: Vec<f64>,
    lambda: f64,
}

impl InverseCholesky {
    pub fn from_hessian(h: &[f64], n: usize, lambda_rel: f64) -> Result<Self, HessianError> {
        if h.len() != n * n {
            return Err(HessianError::ShapeMismatch(format!(
                "{n}x{n} hessian needs {} entries",
                n * n
            )));
        }
        let (mut a, lambda) = regularize(h, n, lambda_rel);
        cholesky_lower(&mut a, n)?;

        // L⁻¹ by forward substitution, column by column.
        let mut linv = vec![0.0; n * n];
        for c in 0..n {
            linv[c * n + c] = 1.0 / a[c * n + c];
            for i in (c + 1)..n {
                let mut s = 0.0;
                for k in c..i {
                    s += a[i * n + k] * linv[k * n + c];
                }
                linv[i * n + c] = -s / a[i * n + i];
            }
        }
        // (H + λI)⁻¹ = L⁻ᵀ L⁻¹
        let mut inv = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = 0.0;
                for k in i..n {
                    s += linv[k * n + i] * linv[k * n + j];
                }
                inv[i * n + j] = s;
                inv[j * n + i] = s;
            }
        }
        cholesky_lower(&mut inv, n)?;
        let mut factor = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                factor[i * n + j] = inv[j * n + i];
            }
        }
        Ok(Self { n, factor, lambda })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.factor[i * self.n + j]
    }

    #[inline]
    pub fn diag(&self, j: usize) -> f64 {
        self.factor[j * self.n + j]
    }

    /// Row `i` of `C` (zero left of the diagonal).
    pub fn row(&self, i: usize) -> &[f64] {
        &self.factor[i * self.n..(i + 1) * self.n]
    }

    /// `[(H + λI)⁻¹]_jj`, i.e. the squared norm of column `j` of `C`.
    pub fn inverse_diag(&self, j: usize) -> f64 {
        (0..=j).map(|k| self.get(k, j).powi(2)).sum()
    }

    /// Dense `(H + λI)⁻¹ = Cᵀ C`.
    pub fn inverse(&self) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let upto = i.min(j);
                out[i * n + j] = (0..=upto).map(|k| self.get(k, i) * self.get(k, j)).sum();
            }
        }
        out
    }
}

/// Sort key for the act-order heuristic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ActOrderKey {
    /// Descending `diag(H)`.
    #[default]
    HessianDiagDesc,
    /// Ascending diagonal of `(H + λI)⁻¹`.
    InverseDiagAsc,
}

/// A bijection on `0..n`: position `k` of the processing order holds
/// original column `order[k]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    order: Vec<usize>,
    inverse: Vec<usize>,
}

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self, HessianError> {
        let n = order.len();
        let mut inverse = vec![usize::MAX; n];
        for (pos, &col) in order.iter().enumerate() {
            if col >= n {
                return Err(HessianError::InvalidPermutation(format!(
                    "index {col} out of range for length {n}"
                )));
            }
            if inverse[col] != usize::MAX {
                return Err(HessianError::InvalidPermutation(format!(
                    "index {col} repeated"
                )));
            }
            inverse[col] = pos;
        }
        Ok(Self { order, inverse })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            inverse: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(i, &c)| i == c)
    }

    /// Reorders the columns of a row-major `rows x n` matrix into processing
    /// order.
    pub fn permute_columns<T: Copy>(&self, data: &[T], rows: usize) -> Vec<T> {
        let n = self.len();
        let mut out = Vec::with_capacity(data.len());
        for r in 0..rows {
            let row = &data[r * n..(r + 1) * n];
            out.extend(self.order.iter().map(|&c| row[c]));
        }
        out
    }

    /// Inverse of [`Self::permute_columns`].
    pub fn unpermute_columns<T: Copy>(&self, data: &[T], rows: usize) -> Vec<T> {
        let n = self.len();
        let mut out = Vec::with_capacity(data.len());
        for r in 0..rows {
            let row = &data[r * n..(r + 1) * n];
            out.extend(self.inverse.iter().map(|&p| row[p]));
        }
        out
    }
}

pub fn act_order(
    acc: &HessianAccumulator,
    key: ActOrderKey,
    lambda_rel: f64,
) -> Result<Permutation, HessianError> {
    let n = acc.n();
    let mut order: Vec<usize> = (0..n).collect();
    match key {
        ActOrderKey::HessianDiagDesc => {
            let d = acc.diag();
            order.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
        }
        ActOrderKey::InverseDiagAsc => {
            let ic = acc.finalize(lambda_rel)?;
            let d: Vec<f64> = (0..n).map(|j| ic.inverse_diag(j)).collect();
            order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
        }
    }
    Permutation::new(order)
}
