//! Central finite-difference gradient oracle.
//!
//! Only the forward pass of the function under test is used here; the
//! analytic side is whatever [`Tape::backward`] produces.

pub mod suite;

use crate::error::Result;
use crate::param::{ParamStore, Parameter, StoreId};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error `|a - n| / max(|a|, |n|)` in Euclidean norm; zero when
/// both vectors vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Finite-difference gradient of a scalar function of several tensors.
pub fn numeric_gradients<T: Scalar>(
    inputs: &[Tensor<T>],
    h: f64,
    f: &dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
) -> Result<Vec<Vec<f64>>> {
    let eval = |vals: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item().as_f64())
    };
    let mut all = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grads = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            let base = plus[i].data()[j];
            plus[i].data_mut()[j] = base + T::from_f64_lossy(h);
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] = base - T::from_f64_lossy(h);
            grads.push((eval(&plus)? - eval(&minus)?) / (2.0 * h));
        }
        all.push(grads);
    }
    Ok(all)
}

/// Gradients from the tape, with each input registered as a trainable parameter.
pub fn analytic_gradients<T: Scalar>(
    inputs: &[Tensor<T>],
    f: &dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
) -> Result<Vec<Vec<f64>>> {
    let mut store = ParamStore::new(StoreId(0));
    for (i, v) in inputs.iter().enumerate() {
        store.insert(Parameter::new(format!("input{i}"), v.clone(), true))?;
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = (0..inputs.len())
        .map(|i| tape.param_from(&store, &format!("input{i}")))
        .collect::<Result<_>>()?;
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok((0..inputs.len())
        .map(|i| {
            let key = store.key_of(&format!("input{i}")).unwrap();
            match grads.get(&key) {
                Some(g) => g.data().iter().map(|v| v.as_f64()).collect(),
                None => vec![0.0; inputs[i].numel()],
            }
        })
        .collect())
}

/// Per-input relative error between analytic and finite-difference gradients.
pub fn gradient_errors<T: Scalar>(
    inputs: &[Tensor<T>],
    h: f64,
    f: &dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
) -> Result<Vec<f64>> {
    let analytic = analytic_gradients(inputs, f)?;
    let numeric = numeric_gradients(inputs, h, f)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .collect())
}

/// Reduces a tensor to a scalar with fixed pseudo-random weights, so checks
/// do not degenerate on outputs whose plain sum is constant (softmax, norms).
pub fn project<T: Scalar>(tape: &mut Tape<T>, x: Var, salt: u64) -> Result<Var> {
    let n = tape.value(x).numel();
    let shape = tape.shape(x).to_vec();
    let mut state = salt.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x2545_F491_4F6C_DD1D);
    let weights: Vec<T> = (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            T::from_f64_lossy((state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0)
        })
        .collect();
    let w = tape.constant(Tensor::new(shape, weights)?);
    let prod = tape.mul(x, w)?;
    tape.sum(prod)
}
