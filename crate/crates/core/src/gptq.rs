//! Straightforward GPTQ used as a baseline and as a cross-check for the
//! solver.
//!
//! Columns are quantized one at a time. After each column the rounding
//! error is spread over the remaining columns with the current inverse
//! Hessian, and that column is then eliminated from the inverse. No
//! Cholesky factor is involved, so this path shares no numerics with
//! [`crate::solver`] beyond the scalar quantizer.

use crate::hessian::{HessianAccumulator, HessianError, Permutation};
use crate::quant::{dequantize_value, fit_group, quantize_value, CodeMatrix, QuantFlags};
use crate::tensor_io::DenseTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GptqConfig {
    pub wbits: u8,
    /// Columns per group; `None` means one group spanning every column.
    pub group_size: Option<usize>,
    pub lambda_rel: f64,
    pub flags: QuantFlags,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GptqResult {
    /// Codes in processing order.
    pub codes: CodeMatrix,
    /// Reconstruction in original column order.
    pub reconstruction: DenseTensor,
    /// Per-weight `((w − q) / [H⁻¹]_jj)²` with the running inverse, in
    /// original column order.
    pub errors: Vec<f32>,
}

/// Inverse of a symmetric positive-definite matrix by Gauss-Jordan
/// elimination with partial pivoting.
pub fn gauss_jordan_inverse(a: &[f64], n: usize) -> Result<Vec<f64>, HessianError> {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| m[x * n + col].abs().total_cmp(&m[y * n + col].abs()))
            .expect("non-empty range");
        let p = m[pivot * n + col];
        if p == 0.0 || !p.is_finite() {
            return Err(HessianError::NotPositiveDefinite { pivot: col });
        }
        if pivot != col {
            for k in 0..n {
                m.swap(pivot * n + k, col * n + k);
                inv.swap(pivot * n + k, col * n + k);
            }
        }
        for k in 0..n {
            m[col * n + k] /= p;
            inv[col * n + k] /= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r * n + col];
            if f == 0.0 {
                continue;
            }
            for k in 0..n {
                m[r * n + k] -= f * m[col * n + k];
                inv[r * n + k] -= f * inv[col * n + k];
            }
        }
    }
    Ok(inv)
}

/// Runs GPTQ on `weight` (`m x n`) against the Hessian in `acc`, processing
/// columns in `permutation` order when given.
pub fn reference_gptq(
    weight: &DenseTensor,
    acc: &HessianAccumulator,
    config: &GptqConfig,
    permutation: Option<&Permutation>,
) -> Result<GptqResult, HessianError> {
    let (m, n) = weight.shape();
    if acc.n() != n {
        return Err(HessianError::ShapeMismatch(format!(
            "weight has {n} columns, hessian is {}-dimensional",
            acc.n()
        )));
    }
    let identity = Permutation::identity(n);
    let perm = permutation.unwrap_or(&identity);
    if perm.len() != n {
        return Err(HessianError::ShapeMismatch("permutation length".into()));
    }
    let order = perm.order();

    let h = acc.hessian();
    let mean_diag = (0..n).map(|j| h[j * n + j]).sum::<f64>() / n as f64;
    let lambda = config.lambda_rel * mean_diag;
    let mut hp = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            hp[a * n + b] = h[order[a] * n + order[b]];
        }
        if hp[a * n + a] == 0.0 {
            hp[a * n + a] = 1.0;
        }
        hp[a * n + a] += lambda;
    }
    let mut hinv = gauss_jordan_inverse(&hp, n)?;

    let mut w: Vec<f64> = (0..m)
        .flat_map(|r| order.iter().map(move |&c| weight.get(r, c) as f64))
        .collect();
    let group = config.group_size.unwrap_or(n).max(1);
    let mut codes = CodeMatrix::zeros(m, n, config.wbits);
    let mut recon = vec![0f32; m * n];
    let mut errors = vec![0f32; m * n];
    let mut params = vec![(0f32, 0f32); m];

    for j in 0..n {
        if j % group == 0 {
            let end = (j + group).min(n);
            for (r, p) in params.iter_mut().enumerate() {
                let vals: Vec<f32> = w[r * n + j..r * n + end].iter().map(|&v| v as f32).collect();
                *p = fit_group(&vals, config.wbits, config.flags).expect("non-empty group");
            }
        }
        let d = hinv[j * n + j];
        for r in 0..m {
            let (s, z) = params[r];
            let v = w[r * n + j];
            let code = quantize_value(v as f32, s, z, config.wbits);
            let q = dequantize_value(code, s, z);
            codes.set(r, j, code);
            recon[r * n + j] = q;
            let e = (v - q as f64) / d;
            errors[r * n + j] = ((v - q as f64) / d.sqrt()).powi(2) as f32;
            for k in (j + 1)..n {
                w[r * n + k] -= e * hinv[j * n + k];
            }
        }
        // eliminate column j from the inverse
        for a in (j + 1)..n {
            let f = hinv[a * n + j] / d;
            if f == 0.0 {
                continue;
            }
            for b in (j + 1)..n {
                hinv[a * n + b] -= f * hinv[j * n + b];
            }
        }
    }

    let recon = perm.unpermute_columns(&recon, m);
    let errors = perm.unpermute_columns(&errors, m);
    Ok(GptqResult {
        codes,
        reconstruction: DenseTensor::new(m, n, recon).expect("finite reconstruction"),
        errors,
    })
}
