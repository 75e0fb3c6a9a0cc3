//! Synthetic layers for experiments and tests: Gaussian weights with planted
//! large-magnitude entries, and calibration inputs with shared latent
//! factors so that `H` has realistic off-diagonal structure.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::hessian::HessianAccumulator;
use crate::tensor_io::DenseTensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `rows x cols` matrix of i.i.d. `N(0, std²)` entries.
pub fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f32) -> DenseTensor {
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f32, _>(StandardNormal))
        .collect();
    DenseTensor::new(rows, cols, data).expect("finite samples")
}

/// Overwrites `round(rate · rows · cols)` distinct entries with `±magnitude`
/// (random sign) and returns their positions, sorted.
pub fn inject_outliers(
    rng: &mut impl Rng,
    weight: &DenseTensor,
    rate: f64,
    magnitude: f32,
) -> (DenseTensor, Vec<(usize, usize)>) {
    let (rows, cols) = weight.shape();
    let total = rows * cols;
    let count = ((rate * total as f64).round() as usize).min(total);
    let mut data = weight.data().to_vec();
    let mut picked: Vec<usize> = sample(rng, total, count).into_vec();
    picked.sort_unstable();
    for &i in &picked {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        data[i] = sign * magnitude;
    }
    let positions = picked.iter().map(|&i| (i / cols, i % cols)).collect();
    (DenseTensor::new(rows, cols, data).expect("finite"), positions)
}

/// `n x samples` calibration inputs: `x_j = z_j + Σ_k L_jk f_k` with
/// independent standard normal noise `z`, factors `f`, and loadings
/// `L ~ N(0, loading²)`.
pub fn correlated_inputs(
    rng: &mut impl Rng,
    n: usize,
    samples: usize,
    factors: usize,
    loading: f32,
) -> DenseTensor {
    let l: Vec<f32> = (0..n * factors)
        .map(|_| loading * rng.sample::<f32, _>(StandardNormal))
        .collect();
    let mut data = vec![0f32; n * samples];
    for s in 0..samples {
        let f: Vec<f32> = (0..factors).map(|_| rng.sample(StandardNormal)).collect();
        for j in 0..n {
            let shared: f32 = l[j * factors..(j + 1) * factors]
                .iter()
                .zip(&f)
                .map(|(a, b)| a * b)
                .sum();
            data[j * samples + s] = rng.sample::<f32, _>(StandardNormal) + shared;
        }
    }
    DenseTensor::new(n, samples, data).expect("finite samples")
}

/// A layer with planted outliers and its calibration statistics.
#[derive(Debug, Clone)]
pub struct OutlierFixture {
    pub weight: DenseTensor,
    pub inputs: DenseTensor,
    pub hessian: HessianAccumulator,
    pub planted: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixtureSpec {
    pub rows: usize,
    pub cols: usize,
    pub outlier_rate: f64,
    /// Planted magnitude in units of the weight standard deviation.
    pub outlier_sigma: f32,
    pub samples: usize,
    pub factors: usize,
    pub loading: f32,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            rows: 256,
            cols: 256,
            outlier_rate: 0.005,
            outlier_sigma: 50.0,
            samples: 1024,
            factors: 8,
            loading: 0.5,
        }
    }
}

pub fn outlier_fixture(seed: u64, spec: &FixtureSpec) -> OutlierFixture {
    let mut rng = rng(seed);
    let base = gaussian_matrix(&mut rng, spec.rows, spec.cols, 1.0);
    let (weight, planted) = inject_outliers(&mut rng, &base, spec.outlier_rate, spec.outlier_sigma);
    let inputs = correlated_inputs(&mut rng, spec.cols, spec.samples, spec.factors, spec.loading);
    let mut hessian = HessianAccumulator::new(spec.cols);
    hessian.accumulate(&inputs).expect("matching dimensions");
    OutlierFixture {
        weight,
        inputs,
        hessian,
        planted,
    }
}
