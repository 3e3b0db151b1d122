//! Conditional mean independence testing with generative neural networks.
//!
//! Tests `H0: E[Y | X, Z] = E[Y | Z]` with a cross-fitted kernel
//! U-statistic. A conditional generator trained by moment matching stands in
//! for the law of `X | Z`, a neural regressor estimates `E[Y | Z]`, and the
//! statistic is calibrated with a multiplier (wild) bootstrap.
//!
//! ```no_run
//! use cmi_core::{pipeline::{run_cmi_test, TestConfig}, simdata::{gen_example, Example, Scenario}};
//!
//! let data = gen_example(Example::A1, Scenario::Null, 400, 7)?;
//! let result = run_cmi_test(&data, &TestConfig::default())?;
//! println!("T = {:.3e}, p = {}", result.t_hat, result.p_value);
//! # Ok::<(), cmi_core::CmiError>(())
//! ```

pub mod bootstrap;
pub mod data;
pub mod error;
pub mod generator;
pub mod harness;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod neuralnet;
pub mod normalize;
pub mod pipeline;
pub mod regressor;
pub mod seeds;
pub mod simdata;
pub mod statistic;

pub use bootstrap::{BootstrapConfig, MultiplierFamily, TestResult};
pub use data::Dataset;
pub use error::{CmiError, Result};
pub use kernels::{KernelFamily, KernelSpec};
pub use pipeline::{run_cmi_test, TestConfig};
