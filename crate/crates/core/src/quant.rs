//! Asymmetric min-max affine quantization.
//!
//! A group of values is mapped onto the integer grid `0..=2^b - 1` with a
//! scale `s` and a (possibly fractional) zero point `z`:
//! `code = clamp(floor(v / s + z + 0.5))`, `v̂ = s * (code - z)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor_io::DenseTensor;

pub const MIN_BITS: u8 = 1;
pub const MAX_BITS: u8 = 8;

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("cannot fit a quantizer to an empty input")]
    EmptyInput,
    #[error("bit width {0} outside 1..=8")]
    InvalidBits(u8),
    #[error("group size must be at least 1")]
    InvalidGroupSize,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Options that change how a group's grid is fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantFlags {
    /// Fit the grid to the group's own `[min, max]` without forcing it to
    /// contain zero.
    pub full_range_sign: bool,
    /// Round the zero point to an integer in `[0, 2^b - 1]`.
    pub integer_zero: bool,
}

impl Default for QuantFlags {
    fn default() -> Self {
        Self {
            full_range_sign: true,
            integer_zero: false,
        }
    }
}

#[inline]
pub fn max_code(bits: u8) -> u32 {
    (1u32 << bits) - 1
}

fn check_bits(bits: u8) -> Result<(), QuantError> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(QuantError::InvalidBits(bits))
    }
}

/// Fits `(scale, zero)` for a single group given its extremes.
pub fn fit_range(mut min: f32, mut max: f32, bits: u8, flags: QuantFlags) -> (f32, f32) {
    let maxq = max_code(bits) as f32;
    if !flags.full_range_sign {
        min = min.min(0.0);
        max = max.max(0.0);
    }
    if max == min {
        // Constant group: every value lands on one code and decodes exactly.
        return if flags.integer_zero {
            if min > 0.0 {
                (min, 0.0)
            } else if min < 0.0 {
                (-min, 1.0)
            } else {
                (1.0, 0.0)
            }
        } else {
            (1.0, -min)
        };
    }
    let scale = (max - min) / maxq;
    let mut zero = -min / scale;
    if flags.integer_zero {
        zero = zero.round().clamp(0.0, maxq);
    }
    (scale, zero)
}

/// Fits `(scale, zero)` to the extremes of `values`. Returns `None` for an
/// empty slice.
pub fn fit_group(values: &[f32], bits: u8, flags: QuantFlags) -> Option<(f32, f32)> {
    let (min, max) = min_max(values.iter().copied())?;
    Some(fit_range(min, max, bits, flags))
}

pub(crate) fn min_max(values: impl Iterator<Item = f32>) -> Option<(f32, f32)> {
    values.fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

#[inline]
pub fn quantize_value(value: f32, scale: f32, zero: f32, bits: u8) -> u8 {
    let shifted = if scale > 0.0 { value / scale + zero } else { zero };
    (shifted + 0.5).floor().clamp(0.0, max_code(bits) as f32) as u8
}

#[inline]
pub fn dequantize_value(code: u8, scale: f32, zero: f32) -> f32 {
    scale * (code as f32 - zero)
}

/// Per-group affine parameters over a flat sequence split into consecutive
/// groups of `group_size` (the trailing group may be shorter).
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub scales: Vec<f32>,
    pub zeros: Vec<f32>,
    pub bits: u8,
    pub group_size: usize,
}

impl AffineParams {
    pub fn num_groups(&self) -> usize {
        self.scales.len()
    }

    fn check_len(&self, len: usize) -> Result<(), QuantError> {
        let expected = len.div_ceil(self.group_size);
        if expected != self.scales.len() || self.scales.len() != self.zeros.len() {
            return Err(QuantError::ShapeMismatch(format!(
                "{len} values in groups of {} need {expected} groups, params hold {}",
                self.group_size,
                self.scales.len()
            )));
        }
        Ok(())
    }
}

pub fn fit_quantizer(
    values: &[f32],
    group_size: usize,
    bits: u8,
    flags: QuantFlags,
) -> Result<AffineParams, QuantError> {
    check_bits(bits)?;
    if group_size == 0 {
        return Err(QuantError::InvalidGroupSize);
    }
    if values.is_empty() {
        return Err(QuantError::EmptyInput);
    }
    let (scales, zeros) = values
        .chunks(group_size)
        .map(|g| fit_group(g, bits, flags).expect("chunks are non-empty"))
        .unzip();
    Ok(AffineParams {
        scales,
        zeros,
        bits,
        group_size,
    })
}

pub fn quantize(values: &[f32], params: &AffineParams) -> Result<Vec<u8>, QuantError> {
    params.check_len(values.len())?;
    Ok(values
        .chunks(params.group_size)
        .zip(params.scales.iter().zip(&params.zeros))
        .flat_map(|(g, (&s, &z))| g.iter().map(move |&v| quantize_value(v, s, z, params.bits)))
        .collect())
}

pub fn dequantize(codes: &[u8], params: &AffineParams) -> Result<Vec<f32>, QuantError> {
    params.check_len(codes.len())?;
    let maxq = max_code(params.bits);
    if let Some(c) = codes.iter().find(|&&c| c as u32 > maxq) {
        return Err(QuantError::ShapeMismatch(format!(
            "code {c} exceeds {}-bit range",
            params.bits
        )));
    }
    Ok(codes
        .chunks(params.group_size)
        .zip(params.scales.iter().zip(&params.zeros))
        .flat_map(|(g, (&s, &z))| g.iter().map(move |&c| dequantize_value(c, s, z)))
        .collect())
}

/// Integer codes for an `rows x cols` matrix, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeMatrix {
    pub rows: usize,
    pub cols: usize,
    pub bits: u8,
    pub codes: Vec<u8>,
}

impl CodeMatrix {
    pub fn zeros(rows: usize, cols: usize, bits: u8) -> Self {
        Self {
            rows,
            cols,
            bits,
            codes: vec![0; rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.codes[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, code: u8) {
        self.codes[r * self.cols + c] = code;
    }
}

/// Round-to-nearest baseline: every row is split into groups of
/// `group_size` columns and each group is fitted and rounded independently.
/// The returned params are laid out row-major, `ceil(cols / group_size)`
/// groups per row.
pub fn rtn_quantize_matrix(
    weight: &DenseTensor,
    group_size: usize,
    bits: u8,
    flags: QuantFlags,
) -> Result<(CodeMatrix, AffineParams), QuantError> {
    check_bits(bits)?;
    if group_size == 0 {
        return Err(QuantError::InvalidGroupSize);
    }
    let (rows, cols) = weight.shape();
    let mut codes = CodeMatrix::zeros(rows, cols, bits);
    let mut scales = Vec::new();
    let mut zeros = Vec::new();
    for r in 0..rows {
        let row = weight.row(r);
        let row_params = fit_quantizer(row, group_size, bits, flags)?;
        let row_codes = quantize(row, &row_params)?;
        codes.codes[r * cols..(r + 1) * cols].copy_from_slice(&row_codes);
        scales.extend(row_params.scales);
        zeros.extend(row_params.zeros);
    }
    Ok((
        codes,
        AffineParams {
            scales,
            zeros,
            bits,
            group_size,
        },
    ))
}

/// Dense reconstruction of an RTN result.
pub fn rtn_dequantize_matrix(codes: &CodeMatrix, params: &AffineParams) -> DenseTensor {
    let groups_per_row = codes.cols.div_ceil(params.group_size);
    let mut out = Vec::with_capacity(codes.rows * codes.cols);
    for r in 0..codes.rows {
        for c in 0..codes.cols {
            let g = r * groups_per_row + c / params.group_size;
            out.push(dequantize_value(
                codes.get(r, c),
                params.scales[g],
                params.zeros[g],
            ));
        }
    }
    DenseTensor::new(codes.rows, codes.cols, out).expect("finite reconstruction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const FLAGS: QuantFlags = QuantFlags {
        full_range_sign: true,
        integer_zero: false,
    };

    #[test]
    fn fit_on_exact_grid() {
        let p = fit_quantizer(&[0.0, 1.0, 2.0, 3.0], 4, 2, FLAGS).unwrap();
        assert_eq!((p.scales[0], p.zeros[0]), (1.0, 0.0));
    }

    #[test]
    fn constant_group_uses_unit_scale() {
        let p = fit_quantizer(&[5.0; 4], 4, 3, FLAGS).unwrap();
        assert_eq!((p.scales[0], p.zeros[0]), (1.0, -5.0));
        let codes = quantize(&[5.0; 4], &p).unwrap();
        assert_eq!(codes, vec![0; 4]);
        assert_eq!(dequantize(&codes, &p).unwrap(), vec![5.0; 4]);
    }

    #[test]
    fn constant_group_with_integer_zero_is_exact() {
        let flags = QuantFlags {
            integer_zero: true,
            ..FLAGS
        };
        for c in [5.0f32, -2.5, 0.0, 1e-3] {
            let (s, z) = fit_group(&[c, c], 3, flags).unwrap();
            assert!(z == z.round() && (0.0..=7.0).contains(&z));
            let code = quantize_value(c, s, z, 3);
            assert_eq!(dequantize_value(code, s, z), c);
        }
    }

    #[test]
    fn fractional_zero_point() {
        // s = 8/7, z = 2 / (8/7) = 1.75
        let p = fit_quantizer(&[-2.0, 6.0], 2, 3, FLAGS).unwrap();
        assert!((p.scales[0] - 8.0 / 7.0).abs() < 1e-6);
        assert!((p.zeros[0] - 1.75).abs() < 1e-6);
        assert_eq!(quantize_value(-2.0, p.scales[0], p.zeros[0], 3), 0);
        let back = dequantize_value(0, p.scales[0], p.zeros[0]);
        assert!((back + 2.0).abs() < 1e-6);
    }

    #[test]
    fn codes_are_clamped() {
        assert_eq!(quantize_value(2.0, 1.0, 0.0, 2), 2);
        assert_eq!(quantize_value(100.0, 1.0, 0.0, 2), 3);
        assert_eq!(quantize_value(-100.0, 1.0, 0.0, 2), 0);
    }

    #[test]
    fn integer_zero_is_rounded_and_clamped() {
        let flags = QuantFlags {
            integer_zero: true,
            ..FLAGS
        };
        let p = fit_quantizer(&[-2.0, 6.0], 2, 3, flags).unwrap();
        assert_eq!(p.zeros[0], 2.0);
        let p = fit_quantizer(&[3.0, 6.0], 2, 3, flags).unwrap();
        assert_eq!(p.zeros[0], 0.0);
    }

    #[test]
    fn forced_zero_straddle() {
        let flags = QuantFlags {
            full_range_sign: false,
            ..FLAGS
        };
        let p = fit_quantizer(&[3.0, 10.0], 2, 3, flags).unwrap();
        assert_eq!(p.zeros[0], 0.0);
        assert!((p.scales[0] - 10.0 / 7.0).abs() < 1e-6);
    }

    #[test]
    fn ragged_trailing_group() {
        let p = fit_quantizer(&[0.0, 1.0, 2.0, 3.0, 4.0], 2, 2, FLAGS).unwrap();
        assert_eq!(p.num_groups(), 3);
        assert!(quantize(&[0.0; 4], &p).is_err());
    }

    #[test]
    fn empty_input_and_bad_bits() {
        assert_eq!(fit_quantizer(&[], 4, 3, FLAGS), Err(QuantError::EmptyInput));
        assert_eq!(
            fit_quantizer(&[1.0], 4, 9, FLAGS),
            Err(QuantError::InvalidBits(9))
        );
    }

    #[test]
    fn rtn_exact_on_grid() {
        let w = DenseTensor::new(2, 4, vec![0.0, 1.0, 2.0, 3.0, -1.0, 0.0, 1.0, 2.0]).unwrap();
        let (codes, params) = rtn_quantize_matrix(&w, 4, 2, FLAGS).unwrap();
        assert_eq!(rtn_dequantize_matrix(&codes, &params), w);
    }

    #[test]
    fn rtn_8bit_error_within_half_step() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f32> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = DenseTensor::new(8, 8, data).unwrap();
        let (codes, params) = rtn_quantize_matrix(&w, 8, 8, FLAGS).unwrap();
        let back = rtn_dequantize_matrix(&codes, &params);
        // brute force: nearest grid point per entry
        for r in 0..8 {
            let (s, z) = (params.scales[r], params.zeros[r]);
            for c in 0..8 {
                let v = w.get(r, c);
                let best = (0..=255u8)
                    .map(|q| (dequantize_value(q, s, z) - v).abs())
                    .fold(f32::INFINITY, f32::min);
                let err = (back.get(r, c) - v).abs();
                assert!(err <= s / 2.0 + 1e-6);
                assert!(err <= best + 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn half_step_bound(values in prop::collection::vec(-100.0f32..100.0, 1..40),
                           group in 1usize..12, bits in 1u8..=8) {
            let p = fit_quantizer(&values, group, bits, FLAGS).unwrap();
            let back = dequantize(&quantize(&values, &p).unwrap(), &p).unwrap();
            for (i, (v, b)) in values.iter().zip(&back).enumerate() {
                let s = p.scales[i / group];
                let eps = 1e-6 * (1.0 + v.abs() + s);
                prop_assert!((v - b).abs() <= s / 2.0 + eps);
            }
        }

        #[test]
        fn group_min_is_reconstructed(values in prop::collection::vec(-50.0f32..50.0, 2..20), bits in 1u8..=8) {
            let p = fit_quantizer(&values, values.len(), bits, FLAGS).unwrap();
            let back = dequantize(&quantize(&values, &p).unwrap(), &p).unwrap();
            let (lo, hi) = min_max(values.iter().copied()).unwrap();
            let (blo, bhi) = min_max(back.iter().copied()).unwrap();
            let eps = 1e-5 * (1.0 + lo.abs() + hi.abs());
            prop_assert!((lo - blo).abs() <= eps);
            prop_assert!((hi - bhi).abs() <= eps);
        }

        #[test]
        fn requantization_is_idempotent(codes in prop::collection::vec(0u8..8, 1..30),
                                        s in 0.01f32..10.0, z in -4.0f32..8.0) {
            let p = AffineParams { scales: vec![s], zeros: vec![z], bits: 3, group_size: codes.len() };
            let back = dequantize(&codes, &p).unwrap();
            prop_assert_eq!(quantize(&back, &p).unwrap(), codes);
        }
    }
}
