//! Composite layers built from tape primitives.

use crate::error::{dim_err, AutodiffError, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Weight `[in, out]` and bias `[out]` of an affine map.
#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

/// Applies `x @ W + b` over the last axis of `x`.
pub fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &LinearVars) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let w = tape.shape(p.weight).to_vec();
    let Some(&inner) = shape.last() else {
        return dim_err("linear", "rank-0 input");
    };
    if w.len() != 2 || w[0] != inner {
        return dim_err("linear", format!("{shape:?} @ {w:?}"));
    }
    let rows = shape.iter().product::<usize>() / inner;
    let flat = tape.reshape(x, vec![rows, inner])?;
    let y = tape.matmul(flat, p.weight)?;
    let y = tape.add_bias(y, p.bias)?;
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = w[1];
    tape.reshape(y, out_shape)
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub query: LinearVars,
    pub key: LinearVars,
    pub value: LinearVars,
    pub output: LinearVars,
}

pub struct AttentionOutput {
    /// `[N,S,D]`
    pub output: Var,
    /// Row-stochastic weights `[N*heads, S, S]`.
    pub weights: Var,
}

/// Scaled dot-product self-attention with learned projections.
///
/// `key_mask` has `N*S` entries; `false` keys receive zero weight.
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    p: &AttentionVars,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 {
        return dim_err("multi_head_attention", format!("{shape:?}"));
    }
    let (n, s, d) = (shape[0], shape[1], shape[2]);
    if heads == 0 || d % heads != 0 {
        return Err(AutodiffError::Config(format!(
            "model width {d} not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let split = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
        let v = tape.reshape(v, vec![n, s, heads, dh])?;
        let v = tape.permute(v, &[0, 2, 1, 3])?;
        tape.reshape(v, vec![n * heads, s, dh])
    };
    let q = linear(tape, x, &p.query)?;
    let k = linear(tape, x, &p.key)?;
    let v = linear(tape, x, &p.value)?;
    let (q, k, v) = (split(tape, q)?, split(tape, k)?, split(tape, v)?);
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, T::one() / T::from_usize(dh).unwrap().sqrt())?;
    let mask = match key_mask {
        Some(m) => {
            if m.len() != n * s {
                return dim_err("multi_head_attention", format!("key mask of {} for {n}x{s}", m.len()));
            }
            let mut full = Vec::with_capacity(n * heads * s * s);
            for b in 0..n * heads {
                let row = &m[(b / heads) * s..(b / heads + 1) * s];
                for _ in 0..s {
                    full.extend_from_slice(row);
                }
            }
            Some(full)
        }
        None => None,
    };
    let weights = tape.softmax(scores, mask.as_deref())?;
    let ctx = tape.bmm(weights, v, false)?;
    let ctx = tape.reshape(ctx, vec![n, heads, s, dh])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, vec![n, s, d])?;
    let output = linear(tape, ctx, &p.output)?;
    Ok(AttentionOutput { output, weights })
}

/// Single-layer GRU weights with gate blocks ordered `[reset | update | candidate]`.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    /// `[E, 3H]`
    pub w_input: Var,
    /// `[H, 3H]`
    pub w_hidden: Var,
    /// `[3H]`
    pub b_input: Var,
    /// `[3H]`
    pub b_hidden: Var,
}

/// Runs a GRU over `[N,S,E]` from a zero state and returns the final hidden
/// state `[N,H]`. Where `mask[n*S + t]` is false the state is carried over
/// unchanged, so right-padded sequences end at their last real token.
pub fn gru_encode<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &GruVars, mask: Option<&[bool]>) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || shape[1] == 0 {
        return dim_err("gru_encode", format!("{shape:?}"));
    }
    let (n, s, e) = (shape[0], shape[1], shape[2]);
    let wh = tape.shape(p.w_hidden).to_vec();
    if wh.len() != 2 || wh[1] != 3 * wh[0] || tape.shape(p.w_input) != [e, wh[1]] {
        return dim_err(
            "gru_encode",
            format!("input {shape:?}, w_input {:?}, w_hidden {wh:?}", tape.shape(p.w_input)),
        );
    }
    let hidden = wh[0];
    if let Some(m) = mask {
        if m.len() != n * s {
            return dim_err("gru_encode", format!("mask of {} for {n}x{s}", m.len()));
        }
    }
    let mut h = tape.constant(Tensor::zeros(vec![n, hidden]));
    for t in 0..s {
        let xt = tape.narrow(x, 1, t, 1)?;
        let xt = tape.reshape(xt, vec![n, e])?;
        let gi = tape.matmul(xt, p.w_input)?;
        let gi = tape.add_bias(gi, p.b_input)?;
        let gh = tape.matmul(h, p.w_hidden)?;
        let gh = tape.add_bias(gh, p.b_hidden)?;
        let (ir, iz, inn) = (
            tape.narrow(gi, 1, 0, hidden)?,
            tape.narrow(gi, 1, hidden, hidden)?,
            tape.narrow(gi, 1, 2 * hidden, hidden)?,
        );
        let (hr, hz, hn) = (
            tape.narrow(gh, 1, 0, hidden)?,
            tape.narrow(gh, 1, hidden, hidden)?,
            tape.narrow(gh, 1, 2 * hidden, hidden)?,
        );
        let r = tape.add(ir, hr)?;
        let r = tape.sigmoid(r)?;
        let z = tape.add(iz, hz)?;
        let z = tape.sigmoid(z)?;
        let rn = tape.mul(r, hn)?;
        let cand = tape.add(inn, rn)?;
        let cand = tape.tanh(cand)?;
        // h' = (1 - z) * cand + z * h = cand + z * (h - cand)
        let diff = tape.sub(h, cand)?;
        let zd = tape.mul(z, diff)?;
        let next = tape.add(cand, zd)?;
        h = match mask {
            Some(m) if (0..n).any(|i| !m[i * s + t]) => {
                let keep: Vec<T> = (0..n)
                    .flat_map(|i| {
                        let v = if m[i * s + t] { T::one() } else { T::zero() };
                        std::iter::repeat_n(v, hidden)
                    })
                    .collect();
                let keep = tape.constant(Tensor::new(vec![n, hidden], keep)?);
                let delta = tape.sub(next, h)?;
                let delta = tape.mul(delta, keep)?;
                tape.add(h, delta)?
            }
            _ => next,
        };
    }
    Ok(h)
}
