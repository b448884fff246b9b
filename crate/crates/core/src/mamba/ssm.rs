//! Selective state-space discretization and the sequential scan.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Input-dependent SSM parameters for one sequence.
///
/// `a_bar` and `b_bar` are `[T × d_inner × d_state]`, row-major in that order.
#[derive(Debug, Clone)]
pub struct SsmInputs {
    /// `[T × d_state]`
    pub b: Tensor,
    /// `[T × d_state]`
    pub c: Tensor,
    /// Low-rank timestep `[T × dt_rank]`.
    pub delta: Tensor,
    /// Softplus timestep `[T × d_inner]`, non-negative.
    pub delta_bar: Tensor,
    pub a_bar: Tensor,
    pub b_bar: Tensor,
}

/// Zero-order-hold discretization:
/// `Ā[t,c,s] = exp(-exp(A_log[c,s]) · Δ̄[t,c])`, `B̄[t,c,s] = Δ̄[t,c] · B[t,s]`.
pub fn discretize(a_log: &Tensor, delta_bar: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let (d_inner, d_state) = a_log.dims2()?;
    let (t_len, dc) = delta_bar.dims2()?;
    let (tb, ds) = b.dims2()?;
    if dc != d_inner || tb != t_len || ds != d_state {
        return Err(Error::Shape {
            op: "discretize",
            lhs: delta_bar.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let decay: Vec<f32> = a_log.f32().iter().map(|a| a.exp()).collect();
    let dv = delta_bar.f32();
    let bv = b.f32();
    let n = t_len * d_inner * d_state;
    let mut a_bar = Vec::with_capacity(n);
    let mut b_bar = Vec::with_capacity(n);
    for t in 0..t_len {
        for c in 0..d_inner {
            let dt = dv[t * d_inner + c];
            for s in 0..d_state {
                a_bar.push((-(decay[c * d_state + s] * dt)).exp());
                b_bar.push(dt * bv[t * d_state + s]);
            }
        }
    }
    let shape = [t_len, d_inner, d_state];
    Ok((Tensor::new(shape, a_bar)?, Tensor::new(shape, b_bar)?))
}

/// Run the recurrence
/// `h_t = Ā_t ⊙ h_{t-1} + B̄_t ⊙ u_t`, `y_t = Σ_s C_t[s] · h_t[·, s] + D ⊙ u_t`.
///
/// Returns all outputs `[T × d_inner]` and the final state `[d_inner × d_state]`.
pub fn selective_scan(
    inputs: &SsmInputs,
    u: &Tensor,
    d: &Tensor,
    h0: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let (t_len, d_inner) = u.dims2()?;
    let abar_shape = inputs.a_bar.shape();
    if abar_shape.len() != 3
        || abar_shape[0] != t_len
        || abar_shape[1] != d_inner
        || inputs.b_bar.shape() != abar_shape
        || d.shape() != [d_inner]
    {
        return Err(Error::Shape {
            op: "selective_scan",
            lhs: u.shape().to_vec(),
            rhs: abar_shape.to_vec(),
        });
    }
    let d_state = abar_shape[2];
    if inputs.c.shape() != [t_len, d_state] {
        return Err(Error::Shape {
            op: "selective_scan",
            lhs: inputs.c.shape().to_vec(),
            rhs: vec![t_len, d_state],
        });
    }
    let mut h = match h0 {
        Some(h0) if h0.shape() == [d_inner, d_state] => h0.f32().to_vec(),
        Some(h0) => {
            return Err(Error::Shape {
                op: "selective_scan h0",
                lhs: h0.shape().to_vec(),
                rhs: vec![d_inner, d_state],
            })
        }
        None => vec![0.0; d_inner * d_state],
    };
    let (av, bv, cv) = (inputs.a_bar.f32(), inputs.b_bar.f32(), inputs.c.f32());
    let (uv, dv) = (u.f32(), d.f32());
    let mut y = Vec::with_capacity(t_len * d_inner);
    for t in 0..t_len {
        let step = t * d_inner * d_state;
        let ct = &cv[t * d_state..(t + 1) * d_state];
        for ch in 0..d_inner {
            let ut = uv[t * d_inner + ch];
            let hs = &mut h[ch * d_state..(ch + 1) * d_state];
            let base = step + ch * d_state;
            let mut acc = 0.0f32;
            for s in 0..d_state {
                hs[s] = av[base + s] * hs[s] + bv[base + s] * ut;
                acc += ct[s] * hs[s];
            }
            y.push(acc + dv[ch] * ut);
        }
    }
    Ok((
        Tensor::new([t_len, d_inner], y)?,
        Tensor::new([d_inner, d_state], h)?,
    ))
}
