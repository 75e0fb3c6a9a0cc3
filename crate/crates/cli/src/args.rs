use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use spqr_core::hessian::ActOrderKey;
use spqr_core::solver::SolverConfig;

#[derive(Debug, Parser)]
#[command(name = "spqr", version, about = "Sparse-quantized weight compression toolkit")]
pub struct Cli {
    /// Seed for synthetic data and report labelling.
    #[arg(long, global = true, env = "SPQR_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for matrix-level parallelism (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantize every manifest entry to a `.spqr` file and write reports.
    Quantize(QuantizeArgs),
    /// Compare RTN, GPTQ and SpQR at matched bits on every manifest entry.
    Eval(EvalArgs),
    /// Average-bits grid over (beta1, beta2), optionally with error points.
    Sweep(SweepArgs),
    /// Per-weight sensitivity maps, heatmaps and positional statistics.
    Sensitivity(SensitivityArgs),
    /// Multiply a compressed matrix by a vector.
    Matvec(MatvecArgs),
    /// Modelled average bits per parameter.
    EstimateBits(EstimateBitsArgs),
    /// Decode a `.spqr` file back to a dense tensor.
    Dequantize(DequantizeArgs),
    /// Write synthetic layers with planted outliers plus a manifest.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OrderKeyArg {
    HessianDiag,
    InverseDiag,
}

impl From<OrderKeyArg> for ActOrderKey {
    fn from(k: OrderKeyArg) -> Self {
        match k {
            OrderKeyArg::HessianDiag => ActOrderKey::HessianDiagDesc,
            OrderKeyArg::InverseDiag => ActOrderKey::InverseDiagAsc,
        }
    }
}

/// Solver hyperparameters shared by every quantizing command.
#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    /// Bits per base weight.
    #[arg(long, default_value_t = 3)]
    pub wbits: u8,
    /// Bits per first-level scale (16 keeps scales unquantized).
    #[arg(long, alias = "qq_scale_bits", default_value_t = 3)]
    pub sbits: u8,
    /// Bits per first-level zero point (16 keeps zeros unquantized).
    #[arg(long, alias = "qq_zero_bits", default_value_t = 3)]
    pub zbits: u8,
    /// Columns per weight group.
    #[arg(long, alias = "groupsize", default_value_t = 16)]
    pub beta1: usize,
    /// Rows per statistics group.
    #[arg(long, alias = "qq_groupsize", default_value_t = 16)]
    pub beta2: usize,
    /// Relative outlier threshold.
    #[arg(long, alias = "outlier_threshold", default_value_t = 0.2)]
    pub tau: f64,
    /// Dampening as a fraction of the mean Hessian diagonal.
    #[arg(long = "lambda", alias = "percdamp", default_value_t = 0.01)]
    pub lambda_rel: f64,
    /// Process columns in act-order.
    #[arg(long = "act-order", alias = "act_order")]
    pub act_order: bool,
    #[arg(long, value_enum, default_value_t = OrderKeyArg::HessianDiag)]
    pub act_order_key: OrderKeyArg,
    /// Round zero points to integers.
    #[arg(long)]
    pub integer_zero: bool,
    /// Force every group range to include zero.
    #[arg(long)]
    pub include_zero: bool,
    /// Disable outlier isolation.
    #[arg(long)]
    pub no_outliers: bool,
    /// Tune tau so the outlier rate stays at or below this fraction.
    #[arg(long = "target-outliers", alias = "target_outliers")]
    pub target_outliers: Option<f64>,
}

impl SolverArgs {
    pub fn to_config(&self) -> SolverConfig {
        SolverConfig {
            wbits: self.wbits,
            sbits: self.sbits,
            zbits: self.zbits,
            beta1: self.beta1,
            beta2: self.beta2,
            tau: self.tau,
            lambda_rel: self.lambda_rel,
            act_order: self.act_order,
            act_order_key: self.act_order_key.into(),
            integer_zero: self.integer_zero,
            full_range_sign: !self.include_zero,
            outliers_enabled: !self.no_outliers,
            target_outlier_rate: self.target_outliers,
        }
    }
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    /// Manifest: `name<TAB>weight<TAB>calib[,calib...]` per line.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for `.spqr` files and reports.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Group size for RTN and GPTQ (default: matched to SpQR bits).
    #[arg(long)]
    pub baseline_group: Option<usize>,
    /// Fail instead of warning when baseline and SpQR bits differ.
    #[arg(long)]
    pub strict_bits: bool,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Run the solver at every cell on these layers as well.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Write `sweep.csv` (and point files) here instead of printing.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [4usize, 8, 16, 32, 64, 128])]
    pub beta1_list: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [4usize, 8, 16, 32, 64, 128])]
    pub beta2_list: Vec<usize>,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SensitivitySource {
    /// Dynamic sensitivities recorded by the solver.
    Solver,
    /// Closed form against round-to-nearest targets.
    Rtn,
}

#[derive(Debug, Args)]
pub struct SensitivityArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Only process this entry.
    #[arg(long)]
    pub entry: Option<String>,
    #[arg(long, value_enum, default_value_t = SensitivitySource::Solver)]
    pub source: SensitivitySource,
    /// Max-pool window for the heatmap.
    #[arg(long, default_value_t = 32)]
    pub pool: usize,
    /// Leading columns for positional statistics.
    #[arg(long, default_value_t = 100)]
    pub head: usize,
    /// Trailing columns for positional statistics.
    #[arg(long, default_value_t = 100)]
    pub tail: usize,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct MatvecArgs {
    /// Compressed matrix.
    #[arg(long)]
    pub spqr: PathBuf,
    /// Input vector as a 1 x n or n x 1 tensor (default: seeded Gaussian).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Where to write the 1 x m result.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Compare against decode-then-dense-multiply.
    #[arg(long)]
    pub check: bool,
    /// Time the kernels over this many repeats.
    #[arg(long)]
    pub bench: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EstimateBitsArgs {
    #[arg(long, default_value_t = 3)]
    pub wbits: u8,
    #[arg(long, alias = "qq_scale_bits", default_value_t = 3)]
    pub sbits: u8,
    #[arg(long, alias = "qq_zero_bits", default_value_t = 3)]
    pub zbits: u8,
    #[arg(long, alias = "groupsize", default_value_t = 16)]
    pub beta1: usize,
    #[arg(long, alias = "qq_groupsize", default_value_t = 16)]
    pub beta2: usize,
    /// Fraction of weights stored as outliers.
    #[arg(long, default_value_t = 0.0)]
    pub outlier_rate: f64,
    /// Decimal places in the printed value.
    #[arg(long, default_value_t = 2)]
    pub precision: usize,
    /// Print the full breakdown as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct DequantizeArgs {
    #[arg(long)]
    pub spqr: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of layers.
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    #[arg(long, default_value_t = 256)]
    pub rows: usize,
    #[arg(long, default_value_t = 256)]
    pub cols: usize,
    /// Calibration samples per layer.
    #[arg(long, default_value_t = 1024)]
    pub samples: usize,
    /// Fraction of weights replaced by planted outliers.
    #[arg(long, default_value_t = 0.005)]
    pub outlier_rate: f64,
    /// Planted magnitude in weight standard deviations.
    #[arg(long, default_value_t = 50.0)]
    pub outlier_sigma: f32,
}
