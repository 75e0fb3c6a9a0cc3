//! Bilevel quantization statistics.
//!
//! First-level `(scale, zero)` pairs are fitted per row over one β1-column
//! block. Each block's scale vector and zero vector are then split into
//! groups of β2 consecutive rows and quantized again with their own min-max
//! grid, whose two parameters are stored as binary16.

use half::f16;

use super::{SolverConfig, RAW_STATS_BITS};
use crate::quant::{dequantize_value, fit_range, min_max, quantize_value, QuantFlags};

/// One statistic (scales or zeros) for a β2-row group.
#[derive(Debug, Clone, PartialEq)]
pub enum StatVector {
    /// Second-level codes with their binary16 grid.
    Quantized {
        scale: f16,
        zero: f16,
        bits: u8,
        codes: Vec<u8>,
    },
    /// Unquantized statistics (the 16-bit-statistics configuration).
    Raw(Vec<f32>),
}

impl StatVector {
    pub fn len(&self) -> usize {
        match self {
            StatVector::Quantized { codes, .. } => codes.len(),
            StatVector::Raw(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn value(&self, i: usize) -> f32 {
        match self {
            StatVector::Quantized {
                scale, zero, codes, ..
            } => dequantize_value(codes[i], scale.to_f32(), zero.to_f32()),
            StatVector::Raw(v) => v[i],
        }
    }

    pub fn values(&self) -> Vec<f32> {
        (0..self.len()).map(|i| self.value(i)).collect()
    }

    /// Quantizes `values` with a min-max grid of `bits` bits, or keeps them
    /// raw when `bits` is [`RAW_STATS_BITS`].
    pub fn fit(values: &[f32], bits: u8) -> Self {
        if bits == RAW_STATS_BITS {
            return StatVector::Raw(values.to_vec());
        }
        let (min, max) = min_max(values.iter().copied()).unwrap_or((0.0, 0.0));
        let (scale, zero) = binary16_grid(min, max, bits);
        let (s, z) = (scale.to_f32(), zero.to_f32());
        let codes = values
            .iter()
            .map(|&v| quantize_value(v, s, z, bits))
            .collect();
        StatVector::Quantized {
            scale,
            zero,
            bits,
            codes,
        }
    }

    /// Stores integer-valued zero points verbatim (identity grid).
    pub fn integer_codes(values: &[f32], bits: u8) -> Self {
        StatVector::Quantized {
            scale: f16::ONE,
            zero: f16::ZERO,
            bits,
            codes: values.iter().map(|&v| v as u8).collect(),
        }
    }
}

/// Min-max grid whose parameters survive rounding to binary16. The zero
/// point is derived from the already-rounded scale; ranges too narrow for
/// binary16 fall back to the constant-group rule.
fn binary16_grid(min: f32, max: f32, bits: u8) -> (f16, f16) {
    let flags = QuantFlags::default();
    let (s, _) = fit_range(min, max, bits, flags);
    if max > min {
        let scale = f16::from_f32(s);
        if scale.to_f32() > 0.0 {
            let zero = f16::from_f32(-min / scale.to_f32());
            if zero.is_finite() {
                return (scale, zero);
            }
        }
    }
    (f16::ONE, f16::from_f32(-min))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatGroup {
    pub scales: StatVector,
    pub zeros: StatVector,
}

/// Statistics for a whole matrix: `blocks x row_groups` records, block-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BilevelStats {
    pub rows: usize,
    pub cols: usize,
    pub beta1: usize,
    pub beta2: usize,
    pub groups: Vec<StatGroup>,
}

impl BilevelStats {
    pub fn num_blocks(&self) -> usize {
        self.cols.div_ceil(self.beta1)
    }

    pub fn num_row_groups(&self) -> usize {
        self.rows.div_ceil(self.beta2)
    }

    pub fn group(&self, block: usize, row_group: usize) -> &StatGroup {
        &self.groups[block * self.num_row_groups() + row_group]
    }

    /// Dequantized `(scale, zero)` used for `row` inside column block `block`.
    #[inline]
    pub fn scale_zero(&self, block: usize, row: usize) -> (f32, f32) {
        let g = self.group(block, row / self.beta2);
        let i = row % self.beta2;
        (g.scales.value(i), g.zeros.value(i))
    }

    /// Column range covered by block `block`.
    pub fn block_cols(&self, block: usize) -> std::ops::Range<usize> {
        let start = block * self.beta1;
        start..(start + self.beta1).min(self.cols)
    }

    /// Row range covered by row group `g`.
    pub fn group_rows(&self, g: usize) -> std::ops::Range<usize> {
        let start = g * self.beta2;
        start..(start + self.beta2).min(self.rows)
    }
}

/// Statistics fitted for one column block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockStats {
    /// Dequantized per-row scales, already carrying second-level error.
    pub scales: Vec<f32>,
    /// Dequantized per-row zero points.
    pub zeros: Vec<f32>,
    /// One record per β2-row group.
    pub groups: Vec<StatGroup>,
}

/// Fits bilevel statistics for a `rows x width` row-major block. Entries
/// flagged in `outlier_mask` are excluded from the first-level min-max fit.
pub fn fit_statistics(
    block: &[f32],
    rows: usize,
    width: usize,
    outlier_mask: &[bool],
    config: &SolverConfig,
) -> BlockStats {
    debug_assert_eq!(block.len(), rows * width);
    debug_assert_eq!(outlier_mask.len(), rows * width);
    let flags = config.quant_flags();
    let mut first_scales = Vec::with_capacity(rows);
    let mut first_zeros = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &block[r * width..(r + 1) * width];
        let mask = &outlier_mask[r * width..(r + 1) * width];
        let kept = row.iter().zip(mask).filter(|(_, &o)| !o).map(|(&v, _)| v);
        let (min, max) = min_max(kept).unwrap_or((0.0, 0.0));
        let (s, z) = fit_range(min, max, config.wbits, flags);
        first_scales.push(s);
        first_zeros.push(z);
    }

    let mut groups = Vec::with_capacity(rows.div_ceil(config.beta2));
    let mut scales = Vec::with_capacity(rows);
    let mut zeros = Vec::with_capacity(rows);
    for start in (0..rows).step_by(config.beta2) {
        let end = (start + config.beta2).min(rows);
        let s_vec = StatVector::fit(&first_scales[start..end], config.sbits);
        let z_vec = if config.integer_zero && config.zbits != RAW_STATS_BITS {
            StatVector::integer_codes(&first_zeros[start..end], config.zbits)
        } else {
            StatVector::fit(&first_zeros[start..end], config.zbits)
        };
        scales.extend(s_vec.values());
        zeros.extend(z_vec.values());
        groups.push(StatGroup {
            scales: s_vec,
            zeros: z_vec,
        });
    }
    BlockStats {
        scales,
        zeros,
        groups,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(sbits: u8, zbits: u8, beta2: usize) -> SolverConfig {
        SolverConfig {
            wbits: 3,
            sbits,
            zbits,
            beta1: 4,
            beta2,
            ..SolverConfig::default()
        }
    }

    #[test]
    fn identical_rows_give_exact_second_level() {
        // every row spans 0..7 at 3 bits: s = 1, z = 0
        let row = [0.0f32, 7.0, 3.0, 5.0];
        let block: Vec<f32> = row.iter().cycle().take(4 * 8).copied().collect();
        let stats = fit_statistics(&block, 8, 4, &[false; 32], &config(3, 3, 4));
        assert!(stats.scales.iter().all(|&s| s == 1.0));
        assert!(stats.zeros.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn raw_statistics_are_bit_identical() {
        let block: Vec<f32> = (0..24).map(|i| (i as f32 * 0.37).sin()).collect();
        let stats = fit_statistics(&block, 6, 4, &[false; 24], &config(16, 16, 4));
        for r in 0..6 {
            let row = &block[r * 4..r * 4 + 4];
            let (lo, hi) = min_max(row.iter().copied()).unwrap();
            let (s, z) = fit_range(lo, hi, 3, QuantFlags::default());
            assert_eq!(stats.scales[r].to_bits(), s.to_bits());
            assert_eq!(stats.zeros[r].to_bits(), z.to_bits());
        }
    }

    #[test]
    fn hand_computed_second_level_groups() {
        // rows whose first-level scales are 1, 2, 3, 100 (range 7*s at 3 bits)
        let mut block = Vec::new();
        for s in [1.0f32, 2.0, 3.0, 100.0] {
            block.extend_from_slice(&[0.0, 7.0 * s, 0.0, 0.0]);
        }
        let stats = fit_statistics(&block, 4, 4, &[false; 16], &config(3, 3, 2));
        assert_eq!(stats.groups.len(), 2);
        // group {1, 2}: s2 = 1/7, z2 = -1 / f16(1/7); 1 -> code 0, 2 -> code 7
        let s2 = f16::from_f32(1.0 / 7.0).to_f32();
        let z2 = f16::from_f32(-1.0 / s2).to_f32();
        assert!((stats.scales[0] - s2 * (0.0 - z2)).abs() < 1e-7);
        assert!((stats.scales[1] - s2 * (7.0 - z2)).abs() < 1e-7);
        assert!((stats.scales[0] - 1.0).abs() < 1e-3);
        assert!((stats.scales[1] - 2.0).abs() < 2e-3);
        // group {3, 100}: both endpoints land on codes 0 and 7
        let s2 = f16::from_f32(97.0 / 7.0).to_f32();
        let z2 = f16::from_f32(-3.0 / s2).to_f32();
        assert!((stats.scales[2] - s2 * (0.0 - z2)).abs() < 1e-5);
        assert!((stats.scales[3] - s2 * (7.0 - z2)).abs() < 1e-4);
        assert!((stats.scales[3] - 100.0).abs() < 0.1);
    }

    #[test]
    fn outliers_excluded_from_fit() {
        let block = [0.0f32, 1.0, 2.0, 1000.0];
        let mut mask = [false; 4];
        let plain = fit_statistics(&block, 1, 4, &mask, &config(16, 16, 1));
        mask[3] = true;
        let masked = fit_statistics(&block, 1, 4, &mask, &config(16, 16, 1));
        assert!(plain.scales[0] > 100.0);
        assert!((masked.scales[0] - 2.0 / 7.0).abs() < 1e-6);
    }

    #[test]
    fn integer_zero_stored_verbatim() {
        let block: Vec<f32> = (0..16).map(|i| (i as f32 * 1.3).cos() * 3.0).collect();
        let cfg = SolverConfig {
            integer_zero: true,
            ..config(3, 3, 4)
        };
        let stats = fit_statistics(&block, 4, 4, &[false; 16], &cfg);
        for z in &stats.zeros {
            assert_eq!(*z, z.round());
            assert!((0.0..=7.0).contains(z));
        }
    }

    #[test]
    fn dequantized_scales_non_negative() {
        let block: Vec<f32> = (0..64).map(|i| ((i * 7919) % 97) as f32 * 0.01 - 0.3).collect();
        let stats = fit_statistics(&block, 16, 4, &[false; 64], &config(2, 2, 8));
        assert!(stats.scales.iter().all(|&s| s >= 0.0));
    }
}
