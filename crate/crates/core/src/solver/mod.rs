//! The sparse-quantized solver.
//!
//! Columns are processed left to right in blocks of β1. For every block the
//! solver selects outliers, fits bilevel statistics on the remaining
//! weights, then quantizes column by column while pushing each column's
//! rounding error onto the not-yet-quantized columns through the
//! inverse-Cholesky factor of the damped Hessian.

mod outliers;
mod stats;

use std::time::Instant;

use half::f16;
use serde::Serialize;
use thiserror::Error;

pub use outliers::{detect_outliers, leave_one_out_gain, OutlierSet};
pub use stats::{fit_statistics, BilevelStats, BlockStats, StatGroup, StatVector};

use crate::format::{estimate_avg_bits, measure_actual_bits, SpqrTensor};
use crate::hessian::{
    act_order, ActOrderKey, HessianAccumulator, HessianError, InverseCholesky, Permutation,
    DEFAULT_LAMBDA_REL,
};
use crate::quant::{dequantize_value, quantize_value, CodeMatrix, QuantFlags, MAX_BITS, MIN_BITS};
use crate::tensor_io::DenseTensor;

/// Statistic bit width meaning "keep statistics unquantized".
pub const RAW_STATS_BITS: u8 = 16;
/// Hard ceiling on the fraction of weights stored as outliers.
pub const MAX_OUTLIER_RATE: f64 = 0.05;
/// Search interval and resolution for [`tune_tau`].
pub const TAU_SEARCH_MIN: f64 = 0.1;
pub const TAU_SEARCH_MAX: f64 = 1.0;
pub const TAU_SEARCH_STEP: f64 = 0.05;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Hessian(#[from] HessianError),
    #[error("outlier rate {rate:.4} ({count} weights) exceeds the {MAX_OUTLIER_RATE} cap")]
    OutlierCapExceeded { count: usize, rate: f64 },
    #[error("outlier correction at ({row}, {col}) overflows binary16")]
    OutlierOverflow { row: usize, col: usize },
    #[error("outlier rate {achieved:.4} at tau = {TAU_SEARCH_MAX} is above the target {target:.4}")]
    TargetUnreachable { target: f64, achieved: f64 },
}

/// Hyperparameters of one quantization run.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Bits per base weight.
    pub wbits: u8,
    /// Bits per first-level scale, or [`RAW_STATS_BITS`].
    pub sbits: u8,
    /// Bits per first-level zero point, or [`RAW_STATS_BITS`].
    pub zbits: u8,
    /// Columns per weight group.
    pub beta1: usize,
    /// Rows per statistics group.
    pub beta2: usize,
    /// Outlier threshold, relative to the layer's mean
    /// `var(W[:, j]) / C_jj²`. `f64::INFINITY` disables outliers.
    pub tau: f64,
    pub lambda_rel: f64,
    pub act_order: bool,
    pub act_order_key: ActOrderKey,
    pub integer_zero: bool,
    pub full_range_sign: bool,
    pub outliers_enabled: bool,
    pub target_outlier_rate: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            wbits: 3,
            sbits: 3,
            zbits: 3,
            beta1: 16,
            beta2: 16,
            tau: 0.2,
            lambda_rel: DEFAULT_LAMBDA_REL,
            act_order: false,
            act_order_key: ActOrderKey::HessianDiagDesc,
            integer_zero: false,
            full_range_sign: true,
            outliers_enabled: true,
            target_outlier_rate: None,
        }
    }
}

impl SolverConfig {
    /// Plain GPTQ behaviour: no outliers, unquantized statistics.
    pub fn gptq(wbits: u8, group_size: usize) -> Self {
        Self {
            wbits,
            sbits: RAW_STATS_BITS,
            zbits: RAW_STATS_BITS,
            beta1: group_size,
            beta2: 1,
            tau: f64::INFINITY,
            outliers_enabled: false,
            ..Self::default()
        }
    }

    pub fn quant_flags(&self) -> QuantFlags {
        QuantFlags {
            full_range_sign: self.full_range_sign,
            integer_zero: self.integer_zero,
        }
    }

    /// Absolute outlier threshold is `tau * scale`; infinite when outliers
    /// are off.
    pub fn effective_tau(&self) -> f64 {
        if self.outliers_enabled {
            self.tau
        } else {
            f64::INFINITY
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |msg: String| Err(SolverError::ConfigInvalid(msg));
        let stat_ok = |b: u8| (MIN_BITS..=MAX_BITS).contains(&b) || b == RAW_STATS_BITS;
        if !(MIN_BITS..=MAX_BITS).contains(&self.wbits) {
            return bad(format!("wbits {} outside 1..=8", self.wbits));
        }
        if !stat_ok(self.sbits) || !stat_ok(self.zbits) {
            return bad(format!(
                "statistic bits ({}, {}) must be in 1..=8 or {RAW_STATS_BITS}",
                self.sbits, self.zbits
            ));
        }
        if self.beta1 == 0 || self.beta2 == 0 {
            return bad("group sizes must be at least 1".into());
        }
        if self.beta1 > u32::MAX as usize || self.beta2 > u32::MAX as usize {
            return bad("group sizes exceed u32".into());
        }
        if self.tau.is_nan() || self.tau < 0.0 {
            return bad(format!("tau {} must be >= 0", self.tau));
        }
        if !(self.lambda_rel >= 0.0 && self.lambda_rel.is_finite()) {
            return bad(format!("lambda_rel {} must be finite and >= 0", self.lambda_rel));
        }
        if self.integer_zero && self.zbits != RAW_STATS_BITS && self.zbits < self.wbits {
            return bad(format!(
                "integer zero points need zbits >= wbits ({} < {})",
                self.zbits, self.wbits
            ));
        }
        if let Some(r) = self.target_outlier_rate {
            if !(r > 0.0 && r <= MAX_OUTLIER_RATE) {
                return bad(format!("target outlier rate {r} outside (0, {MAX_OUTLIER_RATE}]"));
            }
            if !self.outliers_enabled {
                return bad("a target outlier rate requires outliers to be enabled".into());
            }
        }
        Ok(())
    }
}

/// Column order and inverse-Cholesky factor for one layer, reusable across
/// runs that only differ in τ or statistics settings.
#[derive(Debug, Clone)]
pub struct PreparedLayer {
    pub permutation: Option<Permutation>,
    pub hic: InverseCholesky,
}

/// Applies act-order (when configured) and factors the damped inverse.
pub fn prepare(acc: &HessianAccumulator, config: &SolverConfig) -> Result<PreparedLayer, SolverError> {
    let permutation = if config.act_order {
        Some(act_order(acc, config.act_order_key, config.lambda_rel)?)
    } else {
        None
    };
    prepare_with_order(acc, permutation, config.lambda_rel)
}

/// Factors the inverse for an explicit processing order.
pub fn prepare_with_order(
    acc: &HessianAccumulator,
    permutation: Option<Permutation>,
    lambda_rel: f64,
) -> Result<PreparedLayer, SolverError> {
    let hic = match &permutation {
        Some(p) => acc.permuted(p)?.finalize(lambda_rel)?,
        None => acc.finalize(lambda_rel)?,
    };
    Ok(PreparedLayer { permutation, hic })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantizationReport {
    pub rows: usize,
    pub cols: usize,
    /// `‖WX − ŴX‖² / ‖WX‖²`.
    pub relative_error: f64,
    pub outlier_count: usize,
    pub outlier_rate: f64,
    pub measured_bits: f64,
    pub estimated_bits: f64,
    /// Relative threshold used; `None` when outliers were disabled.
    pub tau: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct SpqrOutput {
    pub tensor: SpqrTensor,
    /// Solver-side reconstruction in original column order; bit-identical
    /// to dequantizing `tensor`.
    pub reconstruction: DenseTensor,
    /// Per-weight dynamic sensitivity `((w − ŵ) / C_jj)²` in original column
    /// order (zero at outliers).
    pub sensitivity: Vec<f32>,
    pub report: QuantizationReport,
}

/// `‖(W − Ŵ)X‖² / ‖WX‖²` using `H = 2XXᵀ` from the accumulator.
pub fn relative_layer_error(weight: &DenseTensor, approx: &DenseTensor, acc: &HessianAccumulator) -> f64 {
    let n = acc.n();
    let h = acc.hessian();
    let quad = |v: &[f64]| -> f64 {
        let mut total = 0.0;
        for i in 0..n {
            if v[i] == 0.0 {
                continue;
            }
            let hrow = &h[i * n..(i + 1) * n];
            let dot: f64 = hrow.iter().zip(v).map(|(a, b)| a * b).sum();
            total += v[i] * dot;
        }
        total
    };
    let mut num = 0.0;
    let mut den = 0.0;
    for r in 0..weight.rows() {
        let w: Vec<f64> = weight.row(r).iter().map(|&v| v as f64).collect();
        let d: Vec<f64> = weight
            .row(r)
            .iter()
            .zip(approx.row(r))
            .map(|(&a, &b)| a as f64 - b as f64)
            .collect();
        num += quad(&d);
        den += quad(&w);
    }
    if den > 0.0 {
        num / den
    } else if num > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// Mean over columns of `var(W[:, j]) / C_jj²`, the unit in which τ is
/// expressed.
fn outlier_scale(work: &[f64], rows: usize, cols: usize, hic: &InverseCholesky) -> f64 {
    let mut total = 0.0;
    for j in 0..cols {
        let mean = (0..rows).map(|r| work[r * cols + j]).sum::<f64>() / rows as f64;
        let var = (0..rows)
            .map(|r| (work[r * cols + j] - mean).powi(2))
            .sum::<f64>()
            / rows as f64;
        total += var / hic.diag(j).powi(2);
    }
    total / cols as f64
}

/// Runs the solver on `weight` given a prepared layer. `acc` must be the
/// Hessian the layer was prepared from (original column order); it is used
/// for the error report.
pub fn spqr_quantize(
    weight: &DenseTensor,
    acc: &HessianAccumulator,
    prepared: &PreparedLayer,
    config: &SolverConfig,
) -> Result<SpqrOutput, SolverError> {
    config.validate()?;
    let started = Instant::now();
    let (rows, cols) = weight.shape();
    let hic = &prepared.hic;
    if acc.n() != cols || hic.n() != cols {
        return Err(SolverError::DimensionMismatch(format!(
            "weight has {cols} columns, hessian is {}x{} and factor {}x{}",
            acc.n(),
            acc.n(),
            hic.n(),
            hic.n()
        )));
    }
    if let Some(p) = &prepared.permutation {
        if p.len() != cols {
            return Err(SolverError::DimensionMismatch(format!(
                "permutation of length {} for {cols} columns",
                p.len()
            )));
        }
    }

    let stored: Vec<f32> = match &prepared.permutation {
        Some(p) => p.permute_columns(weight.data(), rows),
        None => weight.data().to_vec(),
    };
    let mut work: Vec<f64> = stored.iter().map(|&v| v as f64).collect();

    let tau = config.effective_tau();
    let threshold = if tau.is_finite() {
        tau * outlier_scale(&work, rows, cols, hic)
    } else {
        f64::INFINITY
    };
    let flags = config.quant_flags();

    let mut codes = CodeMatrix::zeros(rows, cols, config.wbits);
    let mut recon = vec![0f32; rows * cols];
    let mut sensitivity = vec![0f32; rows * cols];
    let mut outlier_entries: Vec<(usize, usize, f16)> = Vec::new();
    let mut groups = Vec::new();
    let mut overflow = None;

    for b0 in (0..cols).step_by(config.beta1) {
        let b1 = (b0 + config.beta1).min(cols);
        let width = b1 - b0;
        let block: Vec<f32> = (0..rows)
            .flat_map(|r| work[r * cols + b0..r * cols + b1].iter().map(|&v| v as f32))
            .collect();
        let diag: Vec<f64> = (b0..b1).map(|j| hic.diag(j)).collect();
        let mask = detect_outliers(&block, rows, width, &diag, config.wbits, flags, threshold);
        let block_stats = fit_statistics(&block, rows, width, &mask, config);

        let mut errs = vec![0f64; rows * width];
        for jj in 0..width {
            let j = b0 + jj;
            let d = hic.diag(j);
            let hrow = hic.row(j);
            for r in 0..rows {
                let w = work[r * cols + j];
                let (s, z) = (block_stats.scales[r], block_stats.zeros[r]);
                let code = quantize_value(w as f32, s, z, config.wbits);
                let dq = dequantize_value(code, s, z);
                codes.set(r, j, code);
                if mask[r * width + jj] {
                    let corr = f16::from_f64(w - dq as f64);
                    if !corr.is_finite() && overflow.is_none() {
                        overflow = Some((r, j));
                    }
                    recon[r * cols + j] = dq + corr.to_f32();
                    outlier_entries.push((r, j, corr));
                } else {
                    let e = (w - dq as f64) / d;
                    errs[r * width + jj] = e;
                    recon[r * cols + j] = dq;
                    sensitivity[r * cols + j] = (e * e) as f32;
                    if e != 0.0 {
                        let row = &mut work[r * cols..(r + 1) * cols];
                        for k in (j + 1)..b1 {
                            row[k] -= e * hrow[k];
                        }
                    }
                }
            }
        }
        if b1 < cols {
            for r in 0..rows {
                let row = &mut work[r * cols..(r + 1) * cols];
                for jj in 0..width {
                    let e = errs[r * width + jj];
                    if e == 0.0 {
                        continue;
                    }
                    let hrow = &hic.row(b0 + jj)[b1..];
                    for (w, h) in row[b1..].iter_mut().zip(hrow) {
                        *w -= e * h;
                    }
                }
            }
        }
        groups.extend(block_stats.groups);
    }

    let count = outlier_entries.len();
    let rate = count as f64 / (rows * cols) as f64;
    if rate > MAX_OUTLIER_RATE {
        return Err(SolverError::OutlierCapExceeded { count, rate });
    }
    if let Some((row, col)) = overflow {
        return Err(SolverError::OutlierOverflow { row, col });
    }
    let outliers = OutlierSet::from_entries(rows, cols, outlier_entries)
        .expect("solver emits unique in-range positions");
    let stats = BilevelStats {
        rows,
        cols,
        beta1: config.beta1,
        beta2: config.beta2,
        groups,
    };
    let tensor = SpqrTensor {
        config: config.clone(),
        rows,
        cols,
        permutation: prepared.permutation.clone(),
        codes,
        stats,
        outliers,
    };

    let (recon, sensitivity) = match &prepared.permutation {
        Some(p) => (
            p.unpermute_columns(&recon, rows),
            p.unpermute_columns(&sensitivity, rows),
        ),
        None => (recon, sensitivity),
    };
    let reconstruction =
        DenseTensor::new(rows, cols, recon).map_err(|e| SolverError::DimensionMismatch(e.to_string()))?;
    let relative_error = relative_layer_error(weight, &reconstruction, acc);
    let outlier_count = tensor.outliers.len();
    let outlier_rate = tensor.outliers.rate();
    let report = QuantizationReport {
        rows,
        cols,
        relative_error,
        outlier_count,
        outlier_rate,
        measured_bits: measure_actual_bits(&tensor).bits_per_param,
        estimated_bits: estimate_avg_bits(
            config.wbits,
            config.sbits,
            config.zbits,
            config.beta1,
            config.beta2,
            outlier_rate,
        )
        .avg_bits,
        tau: tau.is_finite().then_some(tau),
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok(SpqrOutput {
        tensor,
        reconstruction,
        sensitivity,
        report,
    })
}

/// Number of weights the solver isolates at `config.tau`, including runs
/// that trip the [`MAX_OUTLIER_RATE`] cap.
pub fn count_outliers(
    weight: &DenseTensor,
    acc: &HessianAccumulator,
    prepared: &PreparedLayer,
    config: &SolverConfig,
) -> Result<usize, SolverError> {
    match spqr_quantize(weight, acc, prepared, config) {
        Ok(out) => Ok(out.tensor.outliers.len()),
        Err(SolverError::OutlierCapExceeded { count, .. }) => Ok(count),
        Err(e) => Err(e),
    }
}

/// Convenience wrapper: prepare the layer and solve once (or tune τ when the
/// config names a target outlier rate).
pub fn quantize_layer(
    weight: &DenseTensor,
    acc: &HessianAccumulator,
    config: &SolverConfig,
) -> Result<SpqrOutput, SolverError> {
    config.validate()?;
    let prepared = prepare(acc, config)?;
    match config.target_outlier_rate {
        Some(target) => tune_tau(weight, acc, &prepared, config, target),
        None => spqr_quantize(weight, acc, &prepared, config),
    }
}

/// Binary search for the smallest τ in `[0.1, 1.0]` (resolution 0.05) whose
/// outlier rate does not exceed `target`. Returns the run at that τ.
pub fn tune_tau(
    weight: &DenseTensor,
    acc: &HessianAccumulator,
    prepared: &PreparedLayer,
    config: &SolverConfig,
    target: f64,
) -> Result<SpqrOutput, SolverError> {
    if !(target > 0.0 && target <= MAX_OUTLIER_RATE) {
        return Err(SolverError::ConfigInvalid(format!(
            "target outlier rate {target} outside (0, {MAX_OUTLIER_RATE}]"
        )));
    }
    let run = |tau: f64| -> Result<Option<SpqrOutput>, SolverError> {
        let cfg = SolverConfig {
            tau,
            outliers_enabled: true,
            target_outlier_rate: Some(target),
            ..config.clone()
        };
        match spqr_quantize(weight, acc, prepared, &cfg) {
            Ok(out) => Ok(Some(out)),
            Err(SolverError::OutlierCapExceeded { .. } | SolverError::OutlierOverflow { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let within = |out: &Option<SpqrOutput>| {
        out.as_ref()
            .is_some_and(|o| o.report.outlier_rate <= target)
    };

    let mut best = run(TAU_SEARCH_MAX)?;
    if !within(&best) {
        let achieved = best.map_or(MAX_OUTLIER_RATE, |o| o.report.outlier_rate);
        return Err(SolverError::TargetUnreachable { target, achieved });
    }
    let low = run(TAU_SEARCH_MIN)?;
    if within(&low) {
        return Ok(low.expect("checked"));
    }
    let (mut lo, mut hi) = (TAU_SEARCH_MIN, TAU_SEARCH_MAX);
    while hi - lo > TAU_SEARCH_STEP + 1e-12 {
        let mid = 0.5 * (lo + hi);
        let out = run(mid)?;
        if within(&out) {
            hi = mid;
            best = out;
        } else {
            lo = mid;
        }
    }
    Ok(best.expect("hi always holds a run within target"))
}
