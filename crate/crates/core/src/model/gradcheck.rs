//! Finite-difference cases for complete fusion layers.

use lilac_autodiff::nn::{AttentionVars, LinearVars};
use lilac_autodiff::numcheck::project;
use lilac_autodiff::numcheck::suite::{uniform, Case};
use lilac_autodiff::{AutodiffError, BnMode, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use super::{film_layer, transformer_layer, FilmLayerVars, ModuleKind, NormVars, TransformerLayerVars};

/// Minimum distance of relu inputs from the kink for a valid central difference.
pub const KINK_MARGIN: f64 = 5e-3;

pub fn film_vars(v: &[Var]) -> FilmLayerVars {
    FilmLayerVars {
        conv1: v[2],
        bn1: NormVars { gamma: v[3], beta: v[4] },
        conv2: v[5],
        mod_gamma: LinearVars { weight: v[6], bias: v[7] },
        mod_beta: LinearVars { weight: v[8], bias: v[9] },
        bn2: NormVars { gamma: v[10], beta: v[11] },
    }
}

/// Features `[2, 3, 4, 4]`, code `[2, 5]`, then the layer parameters in
/// [`film_vars`] order.
pub fn film_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let (n, c, e) = (2, 3, 5);
    vec![
        uniform(rng, &[n, c, 4, 4]),
        uniform(rng, &[n, e]),
        uniform(rng, &[c, c, 3, 3]),
        uniform(rng, &[c]),
        uniform(rng, &[c]),
        uniform(rng, &[c, c, 3, 3]),
        uniform(rng, &[e, c]),
        uniform(rng, &[c]),
        uniform(rng, &[e, c]),
        uniform(rng, &[c]),
        uniform(rng, &[c]),
        uniform(rng, &[c]),
    ]
}

pub fn transformer_vars(v: &[Var]) -> TransformerLayerVars {
    let lin = |i: usize| LinearVars { weight: v[i], bias: v[i + 1] };
    TransformerLayerVars {
        attn: AttentionVars {
            query: lin(1),
            key: lin(3),
            value: lin(5),
            output: lin(7),
        },
        norm1: NormVars { gamma: v[9], beta: v[10] },
        ffn1: lin(11),
        ffn2: lin(13),
        norm2: NormVars { gamma: v[15], beta: v[16] },
    }
}

/// Tokens `[2, 4, 6]`, then the layer parameters in [`transformer_vars`] order.
pub fn transformer_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let (d, f) = (6, 5);
    let mut v = vec![uniform(rng, &[2, 4, d])];
    for _ in 0..4 {
        v.push(uniform(rng, &[d, d]));
        v.push(uniform(rng, &[d]));
    }
    v.extend([
        uniform(rng, &[d]),
        uniform(rng, &[d]),
        uniform(rng, &[d, f]),
        uniform(rng, &[f]),
        uniform(rng, &[f, d]),
        uniform(rng, &[d]),
        uniform(rng, &[d]),
        uniform(rng, &[d]),
    ]);
    v
}

fn to_autodiff(e: crate::LilacError) -> AutodiffError {
    match e {
        crate::LilacError::Autodiff(e) => e,
        other => AutodiffError::Config(other.to_string()),
    }
}

const KEY_MASK: [bool; 8] = [true, true, false, true, true, true, true, false];

fn pre_relu(
    inputs: &[Tensor<f64>],
    layer: impl Fn(&mut Tape<f64>, &[Var]) -> Vec<(ModuleKind, Var)>,
    kinds: &[ModuleKind],
) -> Vec<f64> {
    let mut t = Tape::new();
    let v: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
    layer(&mut t, &v)
        .into_iter()
        .filter(|(k, _)| kinds.contains(k))
        .flat_map(|(_, v)| t.value(v).data().to_vec())
        .collect()
}

/// Redraws until no relu input lies within [`KINK_MARGIN`] of zero.
fn off_kink(
    rng: &mut ChaCha8Rng,
    draw: fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    layer: impl Fn(&mut Tape<f64>, &[Var]) -> Vec<(ModuleKind, Var)>,
    kinds: &[ModuleKind],
) -> Vec<Tensor<f64>> {
    loop {
        let inputs = draw(rng);
        if pre_relu(&inputs, &layer, kinds).iter().all(|v| v.abs() >= KINK_MARGIN) {
            return inputs;
        }
    }
}

fn film_activations(t: &mut Tape<f64>, v: &[Var]) -> Vec<(ModuleKind, Var)> {
    film_layer(t, v[0], v[1], &film_vars(v), [&BnMode::Train, &BnMode::Train])
        .expect("valid film shapes")
        .activations
}

fn transformer_activations(t: &mut Tape<f64>, v: &[Var]) -> Vec<(ModuleKind, Var)> {
    transformer_layer(t, v[0], Some(&KEY_MASK), &transformer_vars(v), 2)
        .expect("valid transformer shapes")
        .activations
}

/// A full FiLM layer with training-mode batch norm.
pub fn film_layer_case() -> Case {
    Case::new(
        "film_layer",
        |r| off_kink(r, film_inputs, film_activations, &[ModuleKind::Bn1, ModuleKind::Bn2]),
        |t, v| {
            let out = film_layer(t, v[0], v[1], &film_vars(v), [&BnMode::Train, &BnMode::Train])
                .map_err(to_autodiff)?;
            project(t, out.output, 41)
        },
    )
}

/// A full post-norm transformer layer with a key mask.
pub fn transformer_layer_case() -> Case {
    Case::new(
        "transformer_layer",
        |r| off_kink(r, transformer_inputs, transformer_activations, &[ModuleKind::Ffn1]),
        |t, v| {
            let out = transformer_layer(t, v[0], Some(&KEY_MASK), &transformer_vars(v), 2)
                .map_err(to_autodiff)?;
            project(t, out.output, 42)
        },
    )
    // Softmax over keys is invariant to the key bias.
    .with_zero_grad(&[4])
}

pub fn layer_cases() -> Vec<Case> {
    vec![film_layer_case(), transformer_layer_case()]
}
