//! Independent reference implementations used as test oracles. Everything
//! here is written against raw slices in f64 and shares no code with the
//! library kernels.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use ssm_ptq::mamba::{MambaBlockWeights, MambaModel, ModelConfig};
use ssm_ptq::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    let d = Normal::new(0.0f32, std).unwrap();
    (0..n).map(|_| d.sample(rng)).collect()
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(rng, n, std)).unwrap()
}

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn rel_frobenius(got: &[f32], want: &[f64]) -> f64 {
    let num: f64 = got.iter().zip(want).map(|(&g, &w)| (g as f64 - w).powi(2)).sum();
    let den: f64 = want.iter().map(|w| w * w).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Straight-line f64 evaluation of one residual Mamba block on a
/// time-major `[T × d_model]` input.
pub fn block_oracle(w: &MambaBlockWeights, u: &[f32], t_len: usize) -> Vec<f64> {
    let g = to_f64(w.norm_scale.f32());
    let d_model = g.len();
    let (k, d_inner) = (w.conv_kernel.shape()[0], w.conv_kernel.shape()[1]);
    let d_state = w.a_log.shape()[1];
    let dt_rank = w.dt_proj_weight.shape()[0];
    let xw = dt_rank + 2 * d_state;
    let in_proj = to_f64(w.in_proj.f32());
    let kern = to_f64(w.conv_kernel.f32());
    let cbias = to_f64(w.conv_bias.f32());
    let x_proj = to_f64(w.x_proj.f32());
    let dtw = to_f64(w.dt_proj_weight.f32());
    let dtb = to_f64(w.dt_proj_bias.f32());
    let a_log = to_f64(w.a_log.f32());
    let dvec = to_f64(w.d.f32());
    let out_proj = to_f64(w.out_proj.f32());
    let xin_scale = w.x_proj_input_scale.as_ref().map(|s| to_f64(s.f32()));
    let out_scale = w.out_proj_input_scale.as_ref().map(|s| to_f64(s.f32()));
    let u = to_f64(u);

    // norm + in_proj
    let mut xs = vec![vec![0.0; d_inner]; t_len];
    let mut zs = vec![vec![0.0; d_inner]; t_len];
    for t in 0..t_len {
        let row = &u[t * d_model..(t + 1) * d_model];
        let ms: f64 = row.iter().map(|v| v * v).sum::<f64>() / d_model as f64;
        let inv = 1.0 / (ms + 1e-5).sqrt();
        let normed: Vec<f64> = (0..d_model).map(|i| row[i] * inv * g[i]).collect();
        for j in 0..2 * d_inner {
            let mut acc = 0.0;
            for i in 0..d_model {
                acc += normed[i] * in_proj[i * 2 * d_inner + j];
            }
            if j < d_inner {
                xs[t][j] = acc;
            } else {
                zs[t][j - d_inner] = acc;
            }
        }
    }

    let mut h = vec![vec![0.0; d_state]; d_inner];
    let mut out = vec![0.0; t_len * d_model];
    for t in 0..t_len {
        // causal depthwise conv: tap k-1 multiplies the current step
        let mut xc = vec![0.0; d_inner];
        for c in 0..d_inner {
            let mut acc = cbias[c];
            for j in 0..k {
                let back = k - 1 - j;
                if t >= back {
                    acc += kern[j * d_inner + c] * xs[t - back][c];
                }
            }
            xc[c] = silu(acc);
        }
        let xp_in: Vec<f64> = match &xin_scale {
            Some(s) => xc.iter().zip(s).map(|(a, b)| a * b).collect(),
            None => xc.clone(),
        };
        let mut dbc = vec![0.0; xw];
        for o in 0..xw {
            for c in 0..d_inner {
                dbc[o] += xp_in[c] * x_proj[c * xw + o];
            }
        }
        let delta = &dbc[..dt_rank];
        let b = &dbc[dt_rank..dt_rank + d_state];
        let cc = &dbc[dt_rank + d_state..];
        let mut y = vec![0.0; d_inner];
        for c in 0..d_inner {
            let mut pre = dtb[c];
            for r in 0..dt_rank {
                pre += delta[r] * dtw[r * d_inner + c];
            }
            let dt = softplus(pre);
            let mut acc = 0.0;
            for s in 0..d_state {
                let a_bar = (-(a_log[c * d_state + s].exp()) * dt).exp();
                h[c][s] = a_bar * h[c][s] + dt * b[s] * xc[c];
                acc += cc[s] * h[c][s];
            }
            y[c] = acc + dvec[c] * xc[c];
        }
        let mut gated: Vec<f64> = (0..d_inner).map(|c| y[c] * silu(zs[t][c])).collect();
        if let Some(s) = &out_scale {
            gated.iter_mut().zip(s).for_each(|(v, f)| *v *= f);
        }
        for o in 0..d_model {
            let mut acc = 0.0;
            for c in 0..d_inner {
                acc += gated[c] * out_proj[c * d_model + o];
            }
            out[t * d_model + o] = u[t * d_model + o] + acc;
        }
    }
    out
}

/// A random config drawn from small but irregular dimensions.
pub fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let d_model = rng.random_range(4..=24);
    ModelConfig {
        n_layers: rng.random_range(1..=3),
        d_model,
        d_inner: rng.random_range(d_model..=3 * d_model),
        d_state: rng.random_range(1..=8),
        d_conv: rng.random_range(1..=4),
        dt_rank: rng.random_range(1..=4),
        vocab_size: rng.random_range(8..=40),
    }
    .validated()
    .unwrap()
}

/// A random model with every parameter family perturbed away from its
/// initialisation constants, so no code path multiplies by exactly one.
pub fn random_model(config: ModelConfig, seed: u64) -> MambaModel {
    let mut m = MambaModel::random(config, seed);
    let mut r = rng(seed ^ 0xabcdef);
    for l in &mut m.layers {
        for v in l.norm_scale.f32_mut() {
            *v = r.random_range(0.5..1.5);
        }
        for v in l.d.f32_mut() {
            *v = r.random_range(-1.0..1.0);
        }
        for v in l.a_log.f32_mut() {
            *v += r.random_range(-0.5..0.5);
        }
        for v in l.dt_proj_bias.f32_mut() {
            *v += r.random_range(-1.0..1.0);
        }
    }
    for v in m.norm_f.f32_mut() {
        *v = r.random_range(0.5..1.5);
    }
    m
}
