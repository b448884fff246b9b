use super::hooks::{HookSet, NoObserver, TapId, TapObserver, TapPoint};
use super::ssm::{discretize, selective_scan, SsmInputs};
use super::weights::{MambaBlockWeights, MambaModel};
use crate::error::{Error, Result};
use crate::tensor::{add, causal_conv1d, matmul, mul, rmsnorm, silu, softplus, Tensor, RMSNORM_EPS};

/// One residual Mamba block: `u + out_proj(ssm(conv(in_proj(norm(u)))) ⊙ SiLU(gate))`.
pub fn block_forward(
    w: &MambaBlockWeights,
    u: &Tensor,
    layer: usize,
    hooks: &HookSet,
    obs: &mut dyn TapObserver,
) -> Result<Tensor> {
    let (t_len, d_model) = u.dims2()?;
    let (_, d_inner) = w.conv_kernel.dims2()?;
    if w.norm_scale.shape() != [d_model] {
        return Err(Error::Shape {
            op: "block_forward",
            lhs: u.shape().to_vec(),
            rhs: w.norm_scale.shape().to_vec(),
        });
    }
    let d_state = w.a_log.shape()[1];
    let dt_rank = w.dt_proj_weight.shape()[0];
    let tap = |point| TapId::new(layer, point);
    let run = |point: TapPoint, x: Tensor, obs: &mut dyn TapObserver| -> Result<Tensor> {
        let shape = x.shape().to_vec();
        let y = hooks.apply(tap(point), x, obs)?;
        if y.shape() != shape {
            return Err(Error::invalid(format!(
                "hook at {} changed shape {shape:?} to {:?}",
                tap(point),
                y.shape()
            )));
        }
        Ok(y)
    };

    let normed = run(TapPoint::NormOut, rmsnorm(u, &w.norm_scale, RMSNORM_EPS)?, obs)?;
    let xz = run(TapPoint::InProjOut, matmul(&normed, &w.in_proj)?, obs)?;
    let x = xz.narrow_cols(0, d_inner)?;
    let gate = xz.narrow_cols(d_inner, d_inner)?;

    let xc = run(
        TapPoint::ConvOut,
        silu(&causal_conv1d(&x, &w.conv_kernel, Some(&w.conv_bias))?),
        obs,
    )?;
    let x_proj_in = match &w.x_proj_input_scale {
        Some(s) => mul(&xc, s)?,
        None => xc.clone(),
    };
    let dbc = run(TapPoint::XProjOut, matmul(&x_proj_in, &w.x_proj)?, obs)?;
    let delta = dbc.narrow_cols(0, dt_rank)?;
    let b = dbc.narrow_cols(dt_rank, d_state)?;
    let c = dbc.narrow_cols(dt_rank + d_state, d_state)?;

    let dt = run(
        TapPoint::DtProjOut,
        add(&matmul(&delta, &w.dt_proj_weight)?, &w.dt_proj_bias)?,
        obs,
    )?;
    let delta_bar = softplus(&dt);
    let (a_bar, b_bar) = discretize(&w.a_log, &delta_bar, &b)?;
    let inputs = SsmInputs {
        b,
        c,
        delta,
        delta_bar,
        a_bar,
        b_bar,
    };
    let (y, _) = selective_scan(&inputs, &xc, &w.d, None)?;
    let y = run(TapPoint::SsmOut, y, obs)?;

    let g = run(TapPoint::GateOut, mul(&y, &silu(&gate))?, obs)?;
    let out_in = match &w.out_proj_input_scale {
        Some(s) => mul(&g, s)?,
        None => g,
    };
    let o = run(TapPoint::OutProjOut, matmul(&out_in, &w.out_proj)?, obs)?;
    debug_assert_eq!(o.shape(), [t_len, d_model]);
    add(u, &o)
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `[T × vocab]`
    pub logits: Tensor,
    /// Residual stream after each block, `[T × d_model]`.
    pub layer_outputs: Vec<Tensor>,
}

pub fn embed(model: &MambaModel, tokens: &[u32]) -> Result<Tensor> {
    let c = &model.config;
    let mut h = Vec::with_capacity(tokens.len() * c.d_model);
    for (pos, &id) in tokens.iter().enumerate() {
        if id as usize >= c.vocab_size {
            return Err(Error::TokenOutOfRange {
                id,
                pos,
                vocab: c.vocab_size,
            });
        }
        h.extend_from_slice(model.embedding.row(id as usize));
    }
    Tensor::new([tokens.len(), c.d_model], h)
}

/// Embedding, every block, final norm, and the LM head.
pub fn forward(
    model: &MambaModel,
    tokens: &[u32],
    hooks: &HookSet,
    obs: &mut dyn TapObserver,
) -> Result<ForwardPass> {
    let mut h = embed(model, tokens)?;
    let mut layer_outputs = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        h = block_forward(layer, &h, i, hooks, obs)?;
        layer_outputs.push(h.clone());
    }
    let logits = matmul(&rmsnorm(&h, &model.norm_f, RMSNORM_EPS)?, &model.lm_head)?;
    Ok(ForwardPass {
        logits,
        layer_outputs,
    })
}

pub fn model_forward(model: &MambaModel, tokens: &[u32], hooks: &HookSet) -> Result<Tensor> {
    Ok(forward(model, tokens, hooks, &mut NoObserver)?.logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mamba::config::ModelConfig;
    use crate::mamba::hooks::HookOp;
    use crate::mamba::weights::MambaBlockWeights;
    use std::collections::BTreeMap;

    struct Shapes(BTreeMap<TapId, Vec<usize>>);
    impl TapObserver for Shapes {
        fn observe(&mut self, tap: TapId, a: &Tensor) -> Result<()> {
            self.0.insert(tap, a.shape().to_vec());
            Ok(())
        }
    }

    fn tokens(n: usize, vocab: u32) -> Vec<u32> {
        (0..n as u32).map(|i| (i * 7 + 3) % vocab).collect()
    }

    #[test]
    fn zero_block_is_residual() {
        let c = ModelConfig::new(1, 8, 10);
        let w = MambaBlockWeights::zeros(&c);
        let u = Tensor::new([3, 8], (0..24).map(|i| i as f32 * 0.1 - 1.0).collect()).unwrap();
        let out = block_forward(&w, &u, 0, &HookSet::new(), &mut NoObserver).unwrap();
        assert_eq!(out, u);
    }

    #[test]
    fn zero_blocks_model_is_head_of_embedding() {
        let c = ModelConfig::new(1, 8, 10);
        let m = MambaModel::zero_blocks(c, 4);
        let ids = tokens(5, 10);
        let logits = model_forward(&m, &ids, &HookSet::new()).unwrap();
        let e = embed(&m, &ids).unwrap();
        let want = matmul(&rmsnorm(&e, &m.norm_f, RMSNORM_EPS).unwrap(), &m.lm_head).unwrap();
        assert_eq!(logits, want);
    }

    #[test]
    fn recording_is_observation_only() {
        let c = ModelConfig::new(2, 16, 20);
        let m = MambaModel::random(c, 9);
        let ids = tokens(8, 20);
        let a = model_forward(&m, &ids, &HookSet::new()).unwrap();
        let mut shapes = Shapes(BTreeMap::new());
        let b = forward(&m, &ids, &HookSet::record_all(2), &mut shapes).unwrap().logits;
        assert_eq!(a, b);
        assert_eq!(shapes.0.len(), 16);
    }

    #[test]
    fn tap_shapes_follow_config() {
        let mut c = ModelConfig::new(2, 16, 20);
        c.d_state = 4;
        let m = MambaModel::random(c, 2);
        let mut shapes = Shapes(BTreeMap::new());
        forward(&m, &tokens(16, 20), &HookSet::record_all(2), &mut shapes).unwrap();
        let s = |layer, p| shapes.0[&TapId::new(layer, p)].clone();
        for layer in 0..2 {
            assert_eq!(s(layer, TapPoint::NormOut), vec![16, 16]);
            assert_eq!(s(layer, TapPoint::InProjOut), vec![16, 64]);
            assert_eq!(s(layer, TapPoint::ConvOut), vec![16, 32]);
            assert_eq!(s(layer, TapPoint::XProjOut), vec![16, c.dt_rank + 8]);
            assert_eq!(s(layer, TapPoint::DtProjOut), vec![16, 32]);
            assert_eq!(s(layer, TapPoint::SsmOut), vec![16, 32]);
            assert_eq!(s(layer, TapPoint::GateOut), vec![16, 32]);
            assert_eq!(s(layer, TapPoint::OutProjOut), vec![16, 16]);
        }
    }

    #[test]
    fn deterministic_and_rejects_bad_tokens() {
        let c = ModelConfig::new(2, 16, 20);
        let m = MambaModel::random(c, 1);
        let ids = tokens(6, 20);
        assert_eq!(
            model_forward(&m, &ids, &HookSet::new()).unwrap(),
            model_forward(&m, &ids, &HookSet::new()).unwrap()
        );
        assert!(matches!(
            model_forward(&m, &[1, 20], &HookSet::new()),
            Err(Error::TokenOutOfRange { id: 20, pos: 1, .. })
        ));
    }

    #[test]
    fn causality_over_tokens() {
        let c = ModelConfig::new(2, 16, 20);
        let m = MambaModel::random(c, 6);
        let ids = tokens(10, 20);
        let base = model_forward(&m, &ids, &HookSet::new()).unwrap();
        for t in 0..10 {
            let mut ids2 = ids.clone();
            ids2[t] = (ids2[t] + 1) % 20;
            let out = model_forward(&m, &ids2, &HookSet::new()).unwrap();
            assert_eq!(&out.f32()[..t * 20], &base.f32()[..t * 20]);
            assert_ne!(&out.f32()[t * 20..], &base.f32()[t * 20..]);
        }
    }

    #[test]
    fn hooks_change_output() {
        let c = ModelConfig::new(1, 16, 20);
        let m = MambaModel::random(c, 6);
        let ids = tokens(10, 20);
        let mut h = HookSet::new();
        h.push(TapId::new(0, TapPoint::InProjOut), HookOp::ZeroChannels((0..64).collect()));
        let out = model_forward(&m, &ids, &h).unwrap();
        assert_ne!(out, model_forward(&m, &ids, &HookSet::new()).unwrap());
    }
}
