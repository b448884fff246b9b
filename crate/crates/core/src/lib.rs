//! Post-training quantization for selective state-space language models.
//!
//! The crate covers the Mamba block forward pass with named activation tap
//! points, symmetric absmax quantization, outlier-channel statistics and
//! ablation, SmoothQuant-style scale migration, and a fidelity harness that
//! sweeps quantization configurations against a float baseline.

pub mod archive;
pub mod error;
pub mod exec;
pub mod harness;
pub mod io;
pub mod mamba;
pub mod outlier;
pub mod quant;
pub mod smoothing;
pub mod tensor;

pub use error::{Error, Result};
pub use exec::Execution;
pub use io::{load_model, save_model};
pub use tensor::{DType, Tensor};
