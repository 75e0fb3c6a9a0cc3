//! Sensitivity maps, heatmap export, positional error statistics and the
//! RTN / GPTQ / SpQR comparison harness.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::format::{baseline_avg_bits, estimate_avg_bits};
use crate::gptq::{reference_gptq, GptqConfig};
use crate::hessian::{act_order, HessianAccumulator, HessianError, InverseCholesky};
use crate::quant::{rtn_dequantize_matrix, rtn_quantize_matrix, QuantError};
use crate::solver::{quantize_layer, relative_layer_error, SolverConfig, SolverError};
use crate::tensor_io::DenseTensor;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("least-squares system is ill-conditioned")]
    IllConditioned,
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Hessian(#[from] HessianError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Non-negative per-weight sensitivities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

impl SensitivityMap {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self, AnalysisError> {
        if values.len() != rows * cols {
            return Err(AnalysisError::InvalidInput(format!(
                "{} values for a {rows}x{cols} map",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(AnalysisError::InvalidInput(
                "sensitivities must be finite and non-negative".into(),
            ));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.values[r * self.cols + c]
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    /// Mean of each column over rows.
    pub fn column_means(&self) -> Vec<f64> {
        let mut sums = vec![0f64; self.cols];
        for r in 0..self.rows {
            for (s, &v) in sums.iter_mut().zip(&self.values[r * self.cols..(r + 1) * self.cols]) {
                *s += v as f64;
            }
        }
        sums.iter().map(|s| s / self.rows as f64).collect()
    }
}

/// `s_ij = (w_ij − q_ij)² / (2 · [(H + λI)⁻¹]_jj)`.
pub fn sensitivity_closed_form(
    weight: &DenseTensor,
    quantized: &DenseTensor,
    hic: &InverseCholesky,
) -> Result<SensitivityMap, AnalysisError> {
    let (m, n) = weight.shape();
    if quantized.shape() != (m, n) || hic.n() != n {
        return Err(AnalysisError::InvalidInput(
            "weight, quantized weight and factor disagree in shape".into(),
        ));
    }
    let denom: Vec<f64> = (0..n).map(|j| 2.0 * hic.inverse_diag(j)).collect();
    let values = (0..m * n)
        .map(|i| {
            let d = weight.data()[i] as f64 - quantized.data()[i] as f64;
            (d * d / denom[i % n]) as f32
        })
        .collect();
    SensitivityMap::new(m, n, values)
}

/// Closed-form sensitivities against round-to-nearest targets.
pub fn sensitivity_rtn(
    weight: &DenseTensor,
    acc: &HessianAccumulator,
    config: &SolverConfig,
) -> Result<SensitivityMap, AnalysisError> {
    let (codes, params) =
        rtn_quantize_matrix(weight, config.beta1, config.wbits, config.quant_flags())?;
    let q = rtn_dequantize_matrix(&codes, &params);
    let hic = acc.finalize(config.lambda_rel)?;
    sensitivity_closed_form(weight, &q, &hic)
}

/// Exact minimum of `‖WX − W′X‖²` over `W′` with `w′_ij = q` and every
/// other weight free. `x` is `n x d`. A positive `lambda` adds the ridge
/// `λ/2 · ‖w − w′‖²`, which matches the damped Hessian `2XXᵀ + λI`.
///
/// Only row `i` contributes, so this projects `(w_ij − q) · x_j` onto the
/// orthogonal complement of the other (augmented) input rows.
pub fn sensitivity_bruteforce(
    weight: &DenseTensor,
    x: &DenseTensor,
    i: usize,
    j: usize,
    q: f32,
    lambda: f64,
) -> Result<f64, AnalysisError> {
    let (m, n) = weight.shape();
    if x.rows() != n || i >= m || j >= n {
        return Err(AnalysisError::InvalidInput("index or shape out of range".into()));
    }
    let d = x.cols();
    let ridge = if lambda > 0.0 { (lambda / 2.0).sqrt() } else { 0.0 };
    let aug = if lambda > 0.0 { n } else { 0 };
    let column = |k: usize| -> Vec<f64> {
        let mut v: Vec<f64> = x.row(k).iter().map(|&a| a as f64).collect();
        v.resize(d + aug, 0.0);
        if aug > 0 {
            v[d + k] = ridge;
        }
        v
    };
    let delta = weight.get(i, j) as f64 - q as f64;
    let mut b: Vec<f64> = column(j).iter().map(|v| v * delta).collect();

    // modified Gram-Schmidt over the free columns
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n - 1);
    for k in (0..n).filter(|&k| k != j) {
        let mut v = column(k);
        let norm0 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        for u in &basis {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm0 == 0.0 || norm <= 1e-10 * norm0 {
            return Err(AnalysisError::IllConditioned);
        }
        v.iter_mut().for_each(|a| *a /= norm);
        basis.push(v);
    }
    for u in &basis {
        let p: f64 = b.iter().zip(u).map(|(a, c)| a * c).sum();
        b.iter_mut().zip(u).for_each(|(a, c)| *a -= p * c);
    }
    Ok(b.iter().map(|a| a * a).sum())
}

/// Block-maximum pooled map with `ceil` output dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledMap {
    pub rows: usize,
    pub cols: usize,
    pub pool: usize,
    pub values: Vec<f32>,
}

pub fn maxpool_heatmap(map: &SensitivityMap, pool: usize) -> PooledMap {
    let pool = pool.max(1);
    let (pr, pc) = (map.rows.div_ceil(pool), map.cols.div_ceil(pool));
    let mut values = vec![0f32; pr * pc];
    for r in 0..map.rows {
        for c in 0..map.cols {
            let cell = &mut values[(r / pool) * pc + c / pool];
            *cell = cell.max(map.get(r, c));
        }
    }
    PooledMap {
        rows: pr,
        cols: pc,
        pool,
        values,
    }
}

impl PooledMap {
    /// 8-bit grayscale levels on a log scale; higher sensitivity is darker
    /// and exact zeros are white.
    pub fn gray_levels(&self) -> Vec<u8> {
        let logs: Vec<Option<f64>> = self
            .values
            .iter()
            .map(|&v| (v > 0.0).then(|| (v as f64).ln()))
            .collect();
        let lo = logs.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        let hi = logs.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        logs.iter()
            .map(|l| match l {
                None => 255,
                Some(_) if hi <= lo => 0,
                Some(v) => (255.0 * (1.0 - (v - lo) / (hi - lo))).round() as u8,
            })
            .collect()
    }

    /// Binary PGM (P5) image.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        out.extend(self.gray_levels());
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<(), AnalysisError> {
        write_file(path.as_ref(), &self.to_pgm())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), AnalysisError> {
    std::fs::write(path, bytes).map_err(|source| AnalysisError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// CSV with header `row,col,sensitivity`.
pub fn write_sensitivity_csv(map: &SensitivityMap, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "row,col,sensitivity")?;
    for r in 0..map.rows {
        for c in 0..map.cols {
            writeln!(out, "{r},{c},{}", map.get(r, c))?;
        }
    }
    Ok(())
}

pub fn save_sensitivity_csv(map: &SensitivityMap, path: impl AsRef<Path>) -> Result<(), AnalysisError> {
    let path = path.as_ref();
    let io = |source| AnalysisError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    write_sensitivity_csv(map, &mut w).map_err(io)?;
    w.flush().map_err(io)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quantiles {
    pub q10: f64,
    pub q50: f64,
    pub q90: f64,
}

fn quantiles(mut v: Vec<f64>) -> Quantiles {
    v.sort_by(f64::total_cmp);
    let at = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Quantiles {
        q10: at(0.1),
        q50: at(0.5),
        q90: at(0.9),
    }
}

/// Summary of the first `head` versus the last `tail` columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PositionalStats {
    pub head: usize,
    pub tail: usize,
    pub head_mean: f64,
    pub tail_mean: f64,
    /// `tail_mean / head_mean`; 1 when both are zero.
    pub ratio: f64,
    /// Quantiles of the per-column means.
    pub head_quantiles: Quantiles,
    pub tail_quantiles: Quantiles,
}

pub fn positional_error_stats(
    map: &SensitivityMap,
    head: usize,
    tail: usize,
) -> Result<PositionalStats, AnalysisError> {
    if head == 0 || tail == 0 || map.cols < head + tail {
        return Err(AnalysisError::InvalidInput(format!(
            "need head + tail <= {} columns with both positive",
            map.cols
        )));
    }
    let means = map.column_means();
    let h = means[..head].to_vec();
    let t = means[map.cols - tail..].to_vec();
    let head_mean = h.iter().sum::<f64>() / head as f64;
    let tail_mean = t.iter().sum::<f64>() / tail as f64;
    let ratio = if head_mean == 0.0 && tail_mean == 0.0 {
        1.0
    } else {
        tail_mean / head_mean
    };
    Ok(PositionalStats {
        head,
        tail,
        head_mean,
        tail_mean,
        ratio,
        head_quantiles: quantiles(h),
        tail_quantiles: quantiles(t),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Method {
    #[serde(rename = "RTN")]
    Rtn,
    #[serde(rename = "GPTQ")]
    Gptq,
    #[serde(rename = "SpQR")]
    Spqr,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Rtn => "RTN",
            Method::Gptq => "GPTQ",
            Method::Spqr => "SpQR",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub method: Method,
    pub avg_bits: f64,
    pub relative_error: f64,
    pub outlier_rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    /// Group size used by RTN and GPTQ.
    pub baseline_group: usize,
    /// `|baseline bits − SpQR bits|`.
    pub bits_gap: f64,
    pub warning: Option<String>,
}

impl Comparison {
    pub fn error_of(&self, method: Method) -> f64 {
        self.rows
            .iter()
            .find(|r| r.method == method)
            .map_or(f64::NAN, |r| r.relative_error)
    }
}

/// Bits gap above which [`compare_methods`] warns.
pub const MATCHED_BITS_TOLERANCE: f64 = 0.1;

/// Runs SpQR with `config`, then RTN and GPTQ at `config.wbits` with the
/// group size whose `b_w + 32/g` best matches SpQR's estimated bits (or
/// `baseline_group` when given). Act-order, when enabled, is shared with GPTQ.
pub fn compare_methods(
    weight: &DenseTensor,
    acc: &HessianAccumulator,
    config: &SolverConfig,
    baseline_group: Option<usize>,
    seed: u64,
) -> Result<Comparison, AnalysisError> {
    let n = weight.cols();
    let spqr = quantize_layer(weight, acc, config)?;
    let spqr_bits = spqr.report.estimated_bits;
    let group = baseline_group.unwrap_or_else(|| {
        let extra = spqr_bits - config.wbits as f64;
        if extra > 0.0 {
            ((32.0 / extra).round() as usize).clamp(1, n)
        } else {
            n
        }
    });
    let base_bits = baseline_avg_bits(config.wbits, group);
    let bits_gap = (base_bits - spqr_bits).abs();
    let warning = (bits_gap > MATCHED_BITS_TOLERANCE).then(|| {
        format!("baseline bits {base_bits:.3} differ from SpQR bits {spqr_bits:.3} by {bits_gap:.3}")
    });

    let flags = config.quant_flags();
    let (codes, params) = rtn_quantize_matrix(weight, group, config.wbits, flags)?;
    let rtn = rtn_dequantize_matrix(&codes, &params);

    let perm = if config.act_order {
        Some(act_order(acc, config.act_order_key, config.lambda_rel)?)
    } else {
        None
    };
    let gptq = reference_gptq(
        weight,
        acc,
        &GptqConfig {
            wbits: config.wbits,
            group_size: Some(group),
            lambda_rel: config.lambda_rel,
            flags,
        },
        perm.as_ref(),
    )?;

    let row = |method, avg_bits, relative_error, outlier_rate| ComparisonRow {
        method,
        avg_bits,
        relative_error,
        outlier_rate,
        seed,
    };
    Ok(Comparison {
        rows: vec![
            row(Method::Rtn, base_bits, relative_layer_error(weight, &rtn, acc), 0.0),
            row(
                Method::Gptq,
                base_bits,
                relative_layer_error(weight, &gptq.reconstruction, acc),
                0.0,
            ),
            row(
                Method::Spqr,
                spqr_bits,
                spqr.report.relative_error,
                spqr.report.outlier_rate,
            ),
        ],
        baseline_group: group,
        bits_gap,
        warning,
    })
}

/// Estimated bits of a config at a given outlier rate.
pub fn config_bits(config: &SolverConfig, outlier_rate: f64) -> f64 {
    estimate_avg_bits(
        config.wbits,
        config.sbits,
        config.zbits,
        config.beta1,
        config.beta2,
        outlier_rate,
    )
    .avg_bits
}
