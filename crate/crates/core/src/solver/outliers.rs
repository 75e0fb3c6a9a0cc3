//! Sensitivity-based outlier selection and the sparse outlier container.

use half::f16;

use crate::quant::{dequantize_value, fit_range, min_max, quantize_value, QuantFlags};

/// Hessian-weighted squared rounding error of a group quantized with a
/// min-max grid fitted on exactly the values given.
fn group_error(values: impl Iterator<Item = (f32, f64)> + Clone, bits: u8, flags: QuantFlags) -> f64 {
    let Some((min, max)) = min_max(values.clone().map(|(v, _)| v)) else {
        return 0.0;
    };
    let (s, z) = fit_range(min, max, bits, flags);
    values
        .map(|(v, d)| {
            let q = dequantize_value(quantize_value(v, s, z, bits), s, z);
            let e = (v - q) as f64 / d;
            e * e
        })
        .sum()
}

/// Error reduction obtained by keeping each weight of a `rows x width` block
/// out of its row's quantization group.
///
/// Entry `(r, i)` is `E_base(r) - E_loo(r, i)`: `E_base` sums
/// `((w - q(w)) / d_c)²` over the row with a grid fitted on all of it, and
/// `E_loo` does the same over the row without column `i`, refitting the
/// grid on the remaining weights. `diag` holds the inverse-Cholesky diagonal
/// for the block's columns.
pub fn leave_one_out_gain(
    block: &[f32],
    rows: usize,
    width: usize,
    diag: &[f64],
    bits: u8,
    flags: QuantFlags,
) -> Vec<f64> {
    debug_assert_eq!(block.len(), rows * width);
    debug_assert_eq!(diag.len(), width);
    let mut gains = Vec::with_capacity(rows * width);
    for r in 0..rows {
        let row = &block[r * width..(r + 1) * width];
        let all = row.iter().copied().zip(diag.iter().copied());
        let base = group_error(all.clone(), bits, flags);
        for i in 0..width {
            let loo = all
                .clone()
                .enumerate()
                .filter(move |&(c, _)| c != i)
                .map(|(_, p)| p);
            gains.push(base - group_error(loo, bits, flags));
        }
    }
    gains
}

/// Flags every weight whose leave-one-out gain exceeds `threshold`.
/// A non-finite threshold disables selection.
pub fn detect_outliers(
    block: &[f32],
    rows: usize,
    width: usize,
    diag: &[f64],
    bits: u8,
    flags: QuantFlags,
    threshold: f64,
) -> Vec<bool> {
    if !threshold.is_finite() {
        return vec![false; rows * width];
    }
    leave_one_out_gain(block, rows, width, diag, bits, flags)
        .into_iter()
        .map(|g| g > threshold)
        .collect()
}

/// Sparse outliers in CSR order: sorted by row, then column.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierSet {
    rows: usize,
    cols: usize,
    row_starts: Vec<u32>,
    col_indices: Vec<u32>,
    values: Vec<f16>,
}

impl OutlierSet {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_starts: vec![0; rows + 1],
            col_indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Builds the canonical CSR layout from unordered `(row, col, value)`
    /// triples. Returns `None` on out-of-range or duplicate positions.
    pub fn from_entries(
        rows: usize,
        cols: usize,
        mut entries: Vec<(usize, usize, f16)>,
    ) -> Option<Self> {
        entries.sort_by_key(|&(r, c, _)| (r, c));
        if entries.windows(2).any(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
            return None;
        }
        if entries.iter().any(|&(r, c, _)| r >= rows || c >= cols) {
            return None;
        }
        let mut row_starts = vec![0u32; rows + 1];
        for &(r, _, _) in &entries {
            row_starts[r + 1] += 1;
        }
        for r in 0..rows {
            row_starts[r + 1] += row_starts[r];
        }
        Some(Self {
            rows,
            cols,
            row_starts,
            col_indices: entries.iter().map(|&(_, c, _)| c as u32).collect(),
            values: entries.iter().map(|&(_, _, v)| v).collect(),
        })
    }

    /// Assembles a set from raw CSR arrays, checking the layout is canonical.
    pub fn from_csr(
        rows: usize,
        cols: usize,
        row_starts: Vec<u32>,
        col_indices: Vec<u32>,
        values: Vec<f16>,
    ) -> Result<Self, String> {
        if row_starts.len() != rows + 1 {
            return Err(format!("expected {} row starts, got {}", rows + 1, row_starts.len()));
        }
        if row_starts[0] != 0 {
            return Err("first row start must be 0".into());
        }
        if row_starts.windows(2).any(|w| w[0] > w[1]) {
            return Err("row starts decrease".into());
        }
        let count = row_starts[rows] as usize;
        if count != col_indices.len() || count != values.len() {
            return Err(format!(
                "row starts end at {count} but {} entries are present",
                col_indices.len()
            ));
        }
        for r in 0..rows {
            let cols_r = &col_indices[row_starts[r] as usize..row_starts[r + 1] as usize];
            if cols_r.iter().any(|&c| c as usize >= cols) {
                return Err(format!("column index out of range in row {r}"));
            }
            if cols_r.windows(2).any(|w| w[0] >= w[1]) {
                return Err(format!("columns not strictly increasing in row {r}"));
            }
        }
        Ok(Self {
            rows,
            cols,
            row_starts,
            col_indices,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rate(&self) -> f64 {
        self.len() as f64 / (self.rows * self.cols) as f64
    }

    pub fn row_starts(&self) -> &[u32] {
        &self.row_starts
    }

    pub fn col_indices(&self) -> &[u32] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f16] {
        &self.values
    }

    /// Positions and values stored for row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f16)> + '_ {
        let range = self.row_starts[r] as usize..self.row_starts[r + 1] as usize;
        self.col_indices[range.clone()]
            .iter()
            .zip(&self.values[range])
            .map(|(&c, &v)| (c as usize, v))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f16)> + '_ {
        (0..self.rows).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.row(r).any(|(cc, _)| cc == c)
    }
}
