//! Model parameters and their canonical archive names.
//!
//! Projection weights are stored input-major (`[in × out]`) so that a
//! time-major activation multiplies them directly.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::quant::{dequantize, Granularity, QuantizedTensor};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct MambaBlockWeights {
    /// `[d_model × 2·d_inner]`, x-branch columns first, then the gate branch.
    pub in_proj: Tensor,
    /// `[d_conv × d_inner]`
    pub conv_kernel: Tensor,
    /// `[d_inner]`, zeros when the checkpoint has none.
    pub conv_bias: Tensor,
    /// `[d_inner × (dt_rank + 2·d_state)]`, output columns Δ, B, C.
    pub x_proj: Tensor,
    /// `[dt_rank × d_inner]`
    pub dt_proj_weight: Tensor,
    /// `[d_inner]`
    pub dt_proj_bias: Tensor,
    /// `[d_inner × d_state]`
    pub a_log: Tensor,
    /// `[d_inner]`
    pub d: Tensor,
    /// `[d_inner × d_model]`
    pub out_proj: Tensor,
    /// `[d_model]`
    pub norm_scale: Tensor,
    /// Optional `[d_inner]` multiplier on the input of `x_proj`.
    pub x_proj_input_scale: Option<Tensor>,
    /// Optional `[d_inner]` multiplier on the input of `out_proj`.
    pub out_proj_input_scale: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MambaModel {
    pub config: ModelConfig,
    /// `[vocab × d_model]`
    pub embedding: Tensor,
    pub layers: Vec<MambaBlockWeights>,
    /// `[d_model]`
    pub norm_f: Tensor,
    /// `[d_model × vocab]`
    pub lm_head: Tensor,
}

/// Which weight tensor of a block; names follow `layers.{i}.{suffix}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockParam {
    InProj,
    ConvKernel,
    ConvBias,
    XProj,
    DtProjWeight,
    DtProjBias,
    ALog,
    D,
    OutProj,
    Norm,
}

impl BlockParam {
    pub const ALL: [BlockParam; 10] = [
        BlockParam::InProj,
        BlockParam::ConvKernel,
        BlockParam::ConvBias,
        BlockParam::XProj,
        BlockParam::DtProjWeight,
        BlockParam::DtProjBias,
        BlockParam::ALog,
        BlockParam::D,
        BlockParam::OutProj,
        BlockParam::Norm,
    ];

    pub fn suffix(self) -> &'static str {
        match self {
            BlockParam::InProj => "in_proj",
            BlockParam::ConvKernel => "conv1d.weight",
            BlockParam::ConvBias => "conv1d.bias",
            BlockParam::XProj => "x_proj",
            BlockParam::DtProjWeight => "dt_proj.weight",
            BlockParam::DtProjBias => "dt_proj.bias",
            BlockParam::ALog => "A_log",
            BlockParam::D => "D",
            BlockParam::OutProj => "out_proj",
            BlockParam::Norm => "norm.weight",
        }
    }

    pub fn name(self, layer: usize) -> String {
        format!("layers.{layer}.{}", self.suffix())
    }

    pub fn shape(self, c: &ModelConfig) -> Vec<usize> {
        match self {
            BlockParam::InProj => vec![c.d_model, 2 * c.d_inner],
            BlockParam::ConvKernel => vec![c.d_conv, c.d_inner],
            BlockParam::ConvBias | BlockParam::DtProjBias | BlockParam::D => vec![c.d_inner],
            BlockParam::XProj => vec![c.d_inner, c.x_proj_width()],
            BlockParam::DtProjWeight => vec![c.dt_rank, c.d_inner],
            BlockParam::ALog => vec![c.d_inner, c.d_state],
            BlockParam::OutProj => vec![c.d_inner, c.d_model],
            BlockParam::Norm => vec![c.d_model],
        }
    }
}

pub const EMBEDDING: &str = "embedding.weight";
pub const NORM_F: &str = "norm_f.weight";
pub const LM_HEAD: &str = "lm_head.weight";
const X_PROJ_INPUT_SCALE: &str = "x_proj.smooth_inv";
const OUT_PROJ_INPUT_SCALE: &str = "out_proj.smooth_inv";

/// Name of the scale sidecar for a quantized tensor.
pub fn scale_name(name: &str) -> String {
    format!("{name}.scale")
}

impl MambaBlockWeights {
    pub fn param(&self, p: BlockParam) -> &Tensor {
        match p {
            BlockParam::InProj => &self.in_proj,
            BlockParam::ConvKernel => &self.conv_kernel,
            BlockParam::ConvBias => &self.conv_bias,
            BlockParam::XProj => &self.x_proj,
            BlockParam::DtProjWeight => &self.dt_proj_weight,
            BlockParam::DtProjBias => &self.dt_proj_bias,
            BlockParam::ALog => &self.a_log,
            BlockParam::D => &self.d,
            BlockParam::OutProj => &self.out_proj,
            BlockParam::Norm => &self.norm_scale,
        }
    }

    pub fn param_mut(&mut self, p: BlockParam) -> &mut Tensor {
        match p {
            BlockParam::InProj => &mut self.in_proj,
            BlockParam::ConvKernel => &mut self.conv_kernel,
            BlockParam::ConvBias => &mut self.conv_bias,
            BlockParam::XProj => &mut self.x_proj,
            BlockParam::DtProjWeight => &mut self.dt_proj_weight,
            BlockParam::DtProjBias => &mut self.dt_proj_bias,
            BlockParam::ALog => &mut self.a_log,
            BlockParam::D => &mut self.d,
            BlockParam::OutProj => &mut self.out_proj,
            BlockParam::Norm => &mut self.norm_scale,
        }
    }

    pub fn zeros(c: &ModelConfig) -> Self {
        let z = |p: BlockParam| Tensor::zeros(p.shape(c));
        Self {
            in_proj: z(BlockParam::InProj),
            conv_kernel: z(BlockParam::ConvKernel),
            conv_bias: z(BlockParam::ConvBias),
            x_proj: z(BlockParam::XProj),
            dt_proj_weight: z(BlockParam::DtProjWeight),
            dt_proj_bias: z(BlockParam::DtProjBias),
            a_log: z(BlockParam::ALog),
            d: z(BlockParam::D),
            out_proj: z(BlockParam::OutProj),
            norm_scale: Tensor::full(BlockParam::Norm.shape(c), 1.0),
            x_proj_input_scale: None,
            out_proj_input_scale: None,
        }
    }

    fn random(c: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let normal = |shape: Vec<usize>, std: f32, rng: &mut ChaCha8Rng| {
            let n: usize = shape.iter().product();
            let dist = Normal::new(0.0f32, std).expect("positive std");
            Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
        };
        let uniform = |shape: Vec<usize>, bound: f32, rng: &mut ChaCha8Rng| {
            let n: usize = shape.iter().product();
            let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
            Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
        };
        let in_proj = normal(BlockParam::InProj.shape(c), (c.d_model as f32).powf(-0.5), rng);
        let conv_bound = (c.d_conv as f32).powf(-0.5);
        let conv_kernel = uniform(BlockParam::ConvKernel.shape(c), conv_bound, rng);
        let conv_bias = uniform(BlockParam::ConvBias.shape(c), conv_bound, rng);
        let x_proj = normal(BlockParam::XProj.shape(c), (c.d_inner as f32).powf(-0.5), rng);
        let dt_proj_weight = uniform(
            BlockParam::DtProjWeight.shape(c),
            (c.dt_rank as f32).powf(-0.5),
            rng,
        );
        // timestep initialised log-uniform in [1e-3, 1e-1], bias = softplus⁻¹(dt)
        let (lo, hi) = (1e-3f32.ln(), 1e-1f32.ln());
        let dt_proj_bias = Tensor::new(
            [c.d_inner],
            (0..c.d_inner)
                .map(|_| {
                    let dt = rng.random_range(lo..hi).exp();
                    dt + (-(-dt).exp_m1()).ln()
                })
                .collect(),
        )
        .unwrap();
        let a_log = Tensor::new(
            [c.d_inner, c.d_state],
            (0..c.d_inner)
                .flat_map(|_| (1..=c.d_state).map(|s| (s as f32).ln()))
                .collect(),
        )
        .unwrap();
        let out_proj = normal(BlockParam::OutProj.shape(c), (c.d_inner as f32).powf(-0.5), rng);
        Self {
            in_proj,
            conv_kernel,
            conv_bias,
            x_proj,
            dt_proj_weight,
            dt_proj_bias,
            a_log,
            d: Tensor::full([c.d_inner], 1.0),
            out_proj,
            norm_scale: Tensor::full([c.d_model], 1.0),
            x_proj_input_scale: None,
            out_proj_input_scale: None,
        }
    }
}

/// Fetch a tensor by name, dequantizing integer payloads via their `.scale`
/// sidecar. A sidecar shaped `[1]` is per-tensor; otherwise its shape is the
/// payload shape with every dimension but the channel axis set to 1.
pub fn take_f32(tensors: &BTreeMap<String, Tensor>, name: &str) -> Result<Option<Tensor>> {
    let Some(t) = tensors.get(name) else {
        return Ok(None);
    };
    if t.dtype() == DType::F32 {
        return Ok(Some(t.clone()));
    }
    let sname = scale_name(name);
    let scale = tensors
        .get(&sname)
        .ok_or_else(|| Error::MissingTensor(sname.clone()))?;
    let scales = scale.try_f32()?.to_vec();
    let granularity = if scale.shape() == [1] {
        Granularity::PerTensor
    } else {
        let axes: Vec<usize> = (0..scale.rank()).filter(|&a| scale.shape()[a] != 1).collect();
        let consistent = scale.rank() == t.rank()
            && axes.len() <= 1
            && axes.iter().all(|&a| scale.shape()[a] == t.shape()[a]);
        match (consistent, axes.first()) {
            (true, Some(&axis)) => Granularity::PerChannel(axis),
            (true, None) => Granularity::PerChannel(0),
            _ => {
                return Err(Error::TensorShape {
                    name: sname,
                    expected: t.shape().to_vec(),
                    found: scale.shape().to_vec(),
                })
            }
        }
    };
    let q = QuantizedTensor::from_parts(t.clone(), scales, granularity)
        .map_err(|e| Error::invalid(format!("{name}: {e}")))?;
    Ok(Some(dequantize(&q)))
}

fn required(tensors: &BTreeMap<String, Tensor>, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = take_f32(tensors, name)?.ok_or_else(|| Error::MissingTensor(name.to_string()))?;
    check_shape(name, &t, shape)?;
    Ok(t)
}

fn optional(tensors: &BTreeMap<String, Tensor>, name: &str, shape: &[usize]) -> Result<Option<Tensor>> {
    let t = take_f32(tensors, name)?;
    if let Some(t) = &t {
        check_shape(name, t, shape)?;
    }
    Ok(t)
}

fn check_shape(name: &str, t: &Tensor, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::TensorShape {
            name: name.to_string(),
            expected: shape.to_vec(),
            found: t.shape().to_vec(),
        });
    }
    Ok(())
}

impl MambaModel {
    /// Randomly initialised model, deterministic in `seed`.
    pub fn random(config: ModelConfig, seed: u64) -> Self {
        let c = config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = {
            let dist = Normal::new(0.0f32, 1.0).unwrap();
            let n = c.vocab_size * c.d_model;
            Tensor::new([c.vocab_size, c.d_model], (0..n).map(|_| dist.sample(&mut rng)).collect())
                .unwrap()
        };
        let layers = (0..c.n_layers)
            .map(|_| MambaBlockWeights::random(&c, &mut rng))
            .collect();
        let lm_head = {
            let dist = Normal::new(0.0f32, (c.d_model as f32).powf(-0.5)).unwrap();
            let n = c.vocab_size * c.d_model;
            Tensor::new([c.d_model, c.vocab_size], (0..n).map(|_| dist.sample(&mut rng)).collect())
                .unwrap()
        };
        Self {
            config: c,
            embedding,
            layers,
            norm_f: Tensor::full([c.d_model], 1.0),
            lm_head,
        }
    }

    pub fn to_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        out.insert(EMBEDDING.to_string(), self.embedding.clone());
        out.insert(NORM_F.to_string(), self.norm_f.clone());
        out.insert(LM_HEAD.to_string(), self.lm_head.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            for p in BlockParam::ALL {
                out.insert(p.name(i), layer.param(p).clone());
            }
            if let Some(s) = &layer.x_proj_input_scale {
                out.insert(format!("layers.{i}.{X_PROJ_INPUT_SCALE}"), s.clone());
            }
            if let Some(s) = &layer.out_proj_input_scale {
                out.insert(format!("layers.{i}.{OUT_PROJ_INPUT_SCALE}"), s.clone());
            }
        }
        out
    }

    /// Build a model from canonically named tensors, shape-checking each
    /// against `config`. Quantized tensors are dequantized.
    pub fn from_tensors(config: ModelConfig, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let c = config.validated()?;
        let embedding = required(tensors, EMBEDDING, &[c.vocab_size, c.d_model])?;
        let norm_f = required(tensors, NORM_F, &[c.d_model])?;
        let lm_head = required(tensors, LM_HEAD, &[c.d_model, c.vocab_size])?;
        let mut layers = Vec::with_capacity(c.n_layers);
        for i in 0..c.n_layers {
            let mut w = MambaBlockWeights::zeros(&c);
            for p in BlockParam::ALL {
                let name = p.name(i);
                let shape = p.shape(&c);
                *w.param_mut(p) = if p == BlockParam::ConvBias {
                    optional(tensors, &name, &shape)?.unwrap_or_else(|| Tensor::zeros(shape))
                } else {
                    required(tensors, &name, &shape)?
                };
            }
            w.x_proj_input_scale =
                optional(tensors, &format!("layers.{i}.{X_PROJ_INPUT_SCALE}"), &[c.d_inner])?;
            w.out_proj_input_scale =
                optional(tensors, &format!("layers.{i}.{OUT_PROJ_INPUT_SCALE}"), &[c.d_inner])?;
            layers.push(w);
        }
        Ok(Self {
            config: c,
            embedding,
            layers,
            norm_f,
            lm_head,
        })
    }

    /// A model whose blocks are all zero (pure residual passthrough).
    pub fn zero_blocks(config: ModelConfig, seed: u64) -> Self {
        let mut m = Self::random(config, seed);
        for l in &mut m.layers {
            *l = MambaBlockWeights::zeros(&config);
        }
        m
    }
}
