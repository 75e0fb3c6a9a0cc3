mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use spqr_core::analysis::AnalysisError;
use spqr_core::format::FormatError;
use spqr_core::hessian::HessianError;
use spqr_core::kernel::KernelError;
use spqr_core::quant::QuantError;
use spqr_core::solver::SolverError;
use spqr_core::tensor_io::TensorIoError;

use args::{Cli, Command};
use commands::UsageError;

const EXIT_INTERNAL: u8 = 1;
const EXIT_USAGE: u8 = 2;

/// Bad inputs and configurations exit with 2; everything else is a bug or an
/// environment failure and exits with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        let user = if cause.is::<UsageError>() || cause.is::<TensorIoError>() || cause.is::<FormatError>() {
            true
        } else if let Some(e) = cause.downcast_ref::<SolverError>() {
            matches!(
                e,
                SolverError::ConfigInvalid(_)
                    | SolverError::DimensionMismatch(_)
                    | SolverError::TargetUnreachable { .. }
                    | SolverError::OutlierCapExceeded { .. }
            )
        } else if let Some(e) = cause.downcast_ref::<HessianError>() {
            matches!(e, HessianError::ShapeMismatch(_) | HessianError::NoSamples)
        } else if let Some(e) = cause.downcast_ref::<AnalysisError>() {
            matches!(e, AnalysisError::InvalidInput(_) | AnalysisError::Io { .. })
        } else {
            cause.is::<KernelError>() || cause.is::<QuantError>()
        };
        if user {
            return EXIT_USAGE;
        }
    }
    EXIT_INTERNAL
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| anyhow::anyhow!("thread pool: {e}"))?;
    }
    match &cli.command {
        Command::Quantize(a) => commands::quantize(a, cli.seed),
        Command::Eval(a) => commands::eval(a, cli.seed),
        Command::Sweep(a) => commands::sweep(a),
        Command::Sensitivity(a) => commands::sensitivity(a),
        Command::Matvec(a) => commands::matvec_cmd(a, cli.seed),
        Command::EstimateBits(a) => commands::estimate_bits(a),
        Command::Dequantize(a) => commands::dequantize(a),
        Command::Synth(a) => commands::synth(a, cli.seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
