//! Sparse-quantized compression of dense weight matrices.
//!
//! A layer `W` (`m x n`) is compressed into low-bit codes with bilevel
//! group statistics plus a small set of binary16 outlier corrections,
//! using calibration inputs to steer rounding decisions.
//!
//! ```no_run
//! use spqr_core::fixtures::{outlier_fixture, FixtureSpec};
//! use spqr_core::solver::{quantize_layer, SolverConfig};
//! use spqr_core::{format, kernel};
//!
//! let fx = outlier_fixture(0, &FixtureSpec::default());
//! let out = quantize_layer(&fx.weight, &fx.hessian, &SolverConfig::default()).unwrap();
//! let bytes = format::encode(&out.tensor).unwrap();
//! let tensor = format::decode(&bytes).unwrap();
//! let y = kernel::matvec(&tensor, &vec![1.0; fx.weight.cols()]).unwrap();
//! assert_eq!(y.len(), fx.weight.rows());
//! ```

pub mod analysis;
pub mod fixtures;
pub mod format;
pub mod gptq;
pub mod hessian;
pub mod kernel;
pub mod quant;
pub mod solver;
pub mod tensor_io;

pub use format::SpqrTensor;
pub use hessian::{HessianAccumulator, InverseCholesky, Permutation};
pub use solver::{quantize_layer, SolverConfig};
pub use tensor_io::DenseTensor;
