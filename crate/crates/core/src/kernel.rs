//! Decode-side compute: dense reconstruction and a tiled matvec that adds the
//! sparse outlier corrections per tile.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::format::SpqrTensor;
use crate::quant::dequantize_value;
use crate::tensor_io::DenseTensor;

/// Rows per tile; columns per tile follow β1.
pub const TILE_ROWS: usize = 64;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// The outlier range `[start, end)` of one row inside one tile, as indices
/// into the CSR arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutlierSlice {
    pub row: u32,
    pub start: u32,
    pub end: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tile {
    pub rows: std::ops::Range<usize>,
    pub cols: std::ops::Range<usize>,
    pub outliers: Vec<OutlierSlice>,
}

impl Tile {
    pub fn outlier_count(&self) -> usize {
        self.outliers.iter().map(|s| (s.end - s.start) as usize).sum()
    }
}

/// Work decomposition for [`matvec`]: row strips of [`TILE_ROWS`] crossed
/// with β1-column blocks. Tiles are stored strip-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePlan {
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub strips: usize,
    pub blocks: usize,
    pub tiles: Vec<Tile>,
}

impl TilePlan {
    pub fn new(t: &SpqrTensor) -> Self {
        Self::with_tile_rows(t, TILE_ROWS)
    }

    pub fn with_tile_rows(t: &SpqrTensor, tile_rows: usize) -> Self {
        let tile_rows = tile_rows.max(1);
        let tile_cols = t.config.beta1;
        let strips = t.rows.div_ceil(tile_rows);
        let blocks = t.cols.div_ceil(tile_cols);
        let starts = t.outliers.row_starts();
        let cols = t.outliers.col_indices();
        let mut tiles = Vec::with_capacity(strips * blocks);
        for s in 0..strips {
            let rows = s * tile_rows..((s + 1) * tile_rows).min(t.rows);
            for b in 0..blocks {
                let c0 = b * tile_cols;
                let c1 = (c0 + tile_cols).min(t.cols);
                let mut outliers = Vec::new();
                for r in rows.clone() {
                    let (lo, hi) = (starts[r] as usize, starts[r + 1] as usize);
                    let row_cols = &cols[lo..hi];
                    let start = lo + row_cols.partition_point(|&c| (c as usize) < c0);
                    let end = lo + row_cols.partition_point(|&c| (c as usize) < c1);
                    if end > start {
                        outliers.push(OutlierSlice {
                            row: r as u32,
                            start: start as u32,
                            end: end as u32,
                        });
                    }
                }
                tiles.push(Tile {
                    rows: rows.clone(),
                    cols: c0..c1,
                    outliers,
                });
            }
        }
        Self {
            tile_rows,
            tile_cols,
            strips,
            blocks,
            tiles,
        }
    }

    pub fn strip(&self, s: usize) -> &[Tile] {
        &self.tiles[s * self.blocks..(s + 1) * self.blocks]
    }

    pub fn outlier_count(&self) -> usize {
        self.tiles.iter().map(Tile::outlier_count).sum()
    }
}

/// Reconstruction in processing (stored) column order.
pub fn dequantize_stored(t: &SpqrTensor) -> Vec<f32> {
    let (m, n) = t.shape();
    let mut out = vec![0f32; m * n];
    for b in 0..t.stats.num_blocks() {
        let cols = t.stats.block_cols(b);
        for r in 0..m {
            let (s, z) = t.stats.scale_zero(b, r);
            for c in cols.clone() {
                out[r * n + c] = dequantize_value(t.codes.get(r, c), s, z);
            }
        }
    }
    for (r, c, v) in t.outliers.iter() {
        out[r * n + c] += v.to_f32();
    }
    out
}

/// Dense reconstruction in original column order.
pub fn dequantize_full(t: &SpqrTensor) -> DenseTensor {
    let stored = dequantize_stored(t);
    let data = match &t.permutation {
        Some(p) => p.unpermute_columns(&stored, t.rows),
        None => stored,
    };
    DenseTensor::new(t.rows, t.cols, data).expect("dequantized values are finite")
}

/// `y = W x` in binary32.
pub fn dense_matvec(w: &DenseTensor, x: &[f32]) -> Result<Vec<f32>, KernelError> {
    if x.len() != w.cols() {
        return Err(KernelError::ShapeMismatch(format!(
            "x has length {}, matrix has {} columns",
            x.len(),
            w.cols()
        )));
    }
    Ok((0..w.rows())
        .map(|r| w.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect())
}

/// Decode-then-multiply reference.
pub fn naive_matvec(t: &SpqrTensor, x: &[f32]) -> Result<Vec<f32>, KernelError> {
    dense_matvec(&dequantize_full(t), x)
}

/// Tiled mixed dense + sparse product `y = Ŵ x`, with `x` in original
/// column order.
pub fn matvec(t: &SpqrTensor, x: &[f32]) -> Result<Vec<f32>, KernelError> {
    matvec_with_plan(t, &TilePlan::new(t), x)
}

pub fn matvec_with_plan(t: &SpqrTensor, plan: &TilePlan, x: &[f32]) -> Result<Vec<f32>, KernelError> {
    if x.len() != t.cols {
        return Err(KernelError::ShapeMismatch(format!(
            "x has length {}, tensor has {} columns",
            x.len(),
            t.cols
        )));
    }
    let xp: Vec<f32> = match &t.permutation {
        Some(p) => p.order().iter().map(|&c| x[c]).collect(),
        None => x.to_vec(),
    };
    let n = t.cols;
    let csr_cols = t.outliers.col_indices();
    let csr_vals = t.outliers.values();
    let mut y = vec![0f32; t.rows];
    y.par_chunks_mut(plan.tile_rows)
        .enumerate()
        .for_each(|(s, ys)| {
            let mut partial = vec![0f32; ys.len()];
            for tile in plan.strip(s) {
                let b = tile.cols.start / plan.tile_cols;
                let xs = &xp[tile.cols.clone()];
                for (i, r) in tile.rows.clone().enumerate() {
                    let (sc, z) = t.stats.scale_zero(b, r);
                    let codes = &t.codes.codes[r * n + tile.cols.start..r * n + tile.cols.end];
                    partial[i] = codes
                        .iter()
                        .zip(xs)
                        .map(|(&c, &xv)| dequantize_value(c, sc, z) * xv)
                        .sum();
                }
                for sl in &tile.outliers {
                    let i = sl.row as usize - tile.rows.start;
                    for k in sl.start as usize..sl.end as usize {
                        partial[i] += csr_vals[k].to_f32() * xp[csr_cols[k] as usize];
                    }
                }
                for (yv, p) in ys.iter_mut().zip(&partial) {
                    *yv += p;
                }
            }
        });
    Ok(y)
}

/// `‖a − b‖ / ‖b‖` (or `‖a‖` when `b` is zero).
pub fn relative_l2(a: &[f32], b: &[f32]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    let norm: f64 = b.iter().map(|&y| (y as f64).powi(2)).sum();
    if norm > 0.0 {
        (diff / norm).sqrt()
    } else {
        diff.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub repeats: usize,
    pub tiled_ns: f64,
    pub naive_ns: f64,
    pub dense_ns: f64,
    /// Relative L2 difference between the tiled and naive outputs.
    pub tiled_vs_naive: f64,
    /// The tiled and naive paths agree to 1e-6, so the timings compare the
    /// same computation.
    pub valid: bool,
    pub low_confidence: bool,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Times the tiled kernel, decode-then-multiply, and a dense binary32
/// product on a fixed input. Only correctness is checked, never speed.
pub fn bench_matvec(t: &SpqrTensor, repeats: usize, x: &[f32]) -> Result<BenchReport, KernelError> {
    let repeats = repeats.max(1);
    let plan = TilePlan::new(t);
    let dense = dequantize_full(t);
    // warm-up, also the correctness check
    let y_tiled = matvec_with_plan(t, &plan, x)?;
    let y_naive = naive_matvec(t, x)?;
    let tiled_vs_naive = relative_l2(&y_tiled, &y_naive);
    let time = |f: &dyn Fn() -> Result<Vec<f32>, KernelError>| -> Result<f64, KernelError> {
        let mut samples = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let start = Instant::now();
            std::hint::black_box(f()?);
            samples.push(start.elapsed().as_nanos() as f64);
        }
        Ok(median(samples))
    };
    Ok(BenchReport {
        repeats,
        tiled_ns: time(&|| matvec_with_plan(t, &plan, x))?,
        naive_ns: time(&|| naive_matvec(t, x))?,
        dense_ns: time(&|| dense_matvec(&dense, x))?,
        tiled_vs_naive,
        valid: tiled_vs_naive <= 1e-6,
        low_confidence: repeats == 1,
    })
}
