use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::MAX_INT_MATMUL_K;

/// Dimensions of a Mamba language model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    /// Expanded width; defaults to `2 * d_model`.
    #[serde(default)]
    pub d_inner: usize,
    pub d_state: usize,
    pub d_conv: usize,
    /// Low-rank width of the timestep projection; defaults to `ceil(d_model / 16)`.
    #[serde(default)]
    pub dt_rank: usize,
    pub vocab_size: usize,
}

impl ModelConfig {
    /// Config with the reference defaults for `d_inner`, `dt_rank`, `d_state`
    /// and `d_conv`.
    pub fn new(n_layers: usize, d_model: usize, vocab_size: usize) -> Self {
        Self {
            n_layers,
            d_model,
            d_inner: 2 * d_model,
            d_state: 16,
            d_conv: 4,
            dt_rank: d_model.div_ceil(16),
            vocab_size,
        }
        .validated()
        .expect("positive dims")
    }

    fn fill_defaults(mut self) -> Self {
        if self.d_inner == 0 {
            self.d_inner = 2 * self.d_model;
        }
        if self.dt_rank == 0 {
            self.dt_rank = self.d_model.div_ceil(16);
        }
        self
    }

    pub fn validated(self) -> Result<Self> {
        let c = self.fill_defaults();
        let fields = [
            ("n_layers", c.n_layers),
            ("d_model", c.d_model),
            ("d_inner", c.d_inner),
            ("d_state", c.d_state),
            ("d_conv", c.d_conv),
            ("dt_rank", c.dt_rank),
            ("vocab_size", c.vocab_size),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("model config: {name} must be positive")));
        }
        // every matmul inner dimension must fit the i32 accumulator bound
        for (name, k) in [("d_model", c.d_model), ("d_inner", c.d_inner), ("dt_rank", c.dt_rank)] {
            if k > MAX_INT_MATMUL_K {
                return Err(Error::invalid(format!(
                    "model config: {name} = {k} exceeds the integer matmul limit {MAX_INT_MATMUL_K}"
                )));
            }
        }
        Ok(c)
    }

    /// Width of the `x_proj` output: `dt_rank + 2 * d_state`.
    pub fn x_proj_width(&self) -> usize {
        self.dt_rank + 2 * self.d_state
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: ModelConfig = serde_json::from_str(&text).map_err(|cause| Error::Json {
            path: path.to_path_buf(),
            cause,
        })?;
        c.validated()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
