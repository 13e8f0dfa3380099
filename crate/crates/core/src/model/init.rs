//! Parameter layouts and initialisers.

use lilac_autodiff::{ParamStore, Parameter, Scalar, StoreId, Tensor};
use rand::Rng;

use super::path::{ModuleKind, ModulePath};
use super::ModelConfig;
use crate::error::Result;
use crate::rng::SeedTree;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Uniform in `±gain·sqrt(3 / fan_in)`.
    Kaiming { fan_in: usize, gain: f64 },
    Uniform(f64),
    /// `[H, k·H]` made of `k` orthogonal `H×H` blocks.
    OrthogonalBlocks,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub trainable: bool,
}

fn spec(name: impl Into<String>, shape: Vec<usize>, init: Init) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape,
        init,
        trainable: true,
    }
}

fn norm_specs(prefix: &str, c: usize, running: bool) -> Vec<ParamSpec> {
    let mut v = vec![
        spec(format!("{prefix}gamma"), vec![c], Init::Ones),
        spec(format!("{prefix}beta"), vec![c], Init::Zeros),
    ];
    if running {
        for (n, init) in [("running_mean", Init::Zeros), ("running_var", Init::Ones)] {
            v.push(ParamSpec {
                trainable: false,
                ..spec(format!("{prefix}{n}"), vec![c], init)
            });
        }
    }
    v
}

fn linear_specs(prefix: &str, fan_in: usize, out: usize, gain: f64) -> Vec<ParamSpec> {
    vec![
        spec(format!("{prefix}weight"), vec![fan_in, out], Init::Kaiming { fan_in, gain }),
        spec(format!("{prefix}bias"), vec![out], Init::Zeros),
    ]
}

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

pub fn module_specs(cfg: &ModelConfig, path: ModulePath) -> Vec<ParamSpec> {
    let c = cfg.channels();
    let d = cfg.d_model;
    match path.kind {
        ModuleKind::Conv1 | ModuleKind::Conv2 => vec![spec(
            "kernel",
            vec![c, c, 3, 3],
            Init::Kaiming {
                fan_in: 9 * c,
                gain: RELU_GAIN,
            },
        )],
        ModuleKind::Bn1 | ModuleKind::Bn2 => norm_specs("", c, true),
        ModuleKind::ModGamma => vec![
            spec(
                "weight",
                vec![cfg.instr_dim, c],
                Init::Kaiming {
                    fan_in: cfg.instr_dim,
                    gain: 0.5,
                },
            ),
            spec("bias", vec![c], Init::Constant(1.0)),
        ],
        ModuleKind::ModBeta => linear_specs("", cfg.instr_dim, c, 0.5),
        ModuleKind::Attn => ["query.", "key.", "value.", "output."]
            .iter()
            .flat_map(|p| linear_specs(p, d, d, 1.0))
            .collect(),
        ModuleKind::Norm1 | ModuleKind::Norm2 => norm_specs("", d, false),
        ModuleKind::Ffn1 => linear_specs("", d, cfg.ffn_dim, RELU_GAIN),
        ModuleKind::Ffn2 => linear_specs("", cfg.ffn_dim, d, 1.0),
    }
}

pub fn encoder_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    let mut c_in = super::VISION_INPUT_CHANNELS;
    for (i, &c_out) in cfg.vision_channels.iter().enumerate() {
        v.push(spec(
            format!("vision.conv{i}.kernel"),
            vec![c_out, c_in, 3, 3],
            Init::Kaiming {
                fan_in: 9 * c_in,
                gain: RELU_GAIN,
            },
        ));
        v.extend(norm_specs(&format!("vision.bn{i}."), c_out, true));
        c_in = c_out;
    }
    let c = cfg.channels();
    match cfg.arch {
        super::Arch::Transformer => {
            let d = cfg.d_model;
            v.extend(linear_specs("vision.proj.", c, d, 1.0));
            v.push(spec("lang.embedding", vec![cfg.vocab(), d], Init::Uniform(1.0)));
            v.push(spec(
                "pos_embedding",
                vec![cfg.max_words() + cfg.grid_cells(), d],
                Init::Uniform(0.1),
            ));
            v.extend(linear_specs("decoder.", d, cfg.proj_dim, 1.0));
        }
        super::Arch::Film => {
            let (e, h) = (cfg.word_dim, cfg.instr_dim);
            v.push(spec("lang.embedding", vec![cfg.vocab(), e], Init::Uniform(1.0)));
            v.push(spec(
                "lang.gru.w_input",
                vec![e, 3 * h],
                Init::Kaiming { fan_in: e, gain: 1.0 },
            ));
            v.push(spec("lang.gru.w_hidden", vec![h, 3 * h], Init::OrthogonalBlocks));
            v.push(spec("lang.gru.b_input", vec![3 * h], Init::Zeros));
            v.push(spec("lang.gru.b_hidden", vec![3 * h], Init::Zeros));
            v.extend(linear_specs("decoder.", c, cfg.proj_dim, 1.0));
        }
    }
    v
}

/// Gram-Schmidt on a random square matrix.
fn orthogonal(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    for i in 0..n {
        for j in 0..i {
            let dot: f64 = (0..n).map(|k| m[i][k] * m[j][k]).sum();
            for k in 0..n {
                m[i][k] -= dot * m[j][k];
            }
        }
        let norm = m[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        m[i].iter_mut().for_each(|v| *v /= norm);
    }
    m.concat()
}

pub fn init_tensor<T: Scalar>(spec: &ParamSpec, seed: SeedTree) -> Tensor<T> {
    let n: usize = spec.shape.iter().product();
    let mut rng = seed.child(&spec.name).rng();
    let data: Vec<f64> = match spec.init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Constant(c) => vec![c; n],
        Init::Kaiming { fan_in, gain } => {
            let bound = gain * (3.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        }
        Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..b)).collect(),
        Init::OrthogonalBlocks => {
            let (h, cols) = (spec.shape[0], spec.shape[1]);
            let blocks: Vec<Vec<f64>> = (0..cols / h).map(|_| orthogonal(h, &mut rng)).collect();
            let mut out = vec![0.0; n];
            for (b, q) in blocks.iter().enumerate() {
                for r in 0..h {
                    for c in 0..h {
                        out[r * cols + b * h + c] = q[r * h + c];
                    }
                }
            }
            out
        }
    };
    Tensor::from_f64(spec.shape.clone(), &data).expect("spec shapes are positive")
}

pub fn build_store<T: Scalar>(id: StoreId, specs: &[ParamSpec], seed: SeedTree) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new(id);
    for s in specs {
        store.insert(Parameter::new(s.name.clone(), init_tensor(s, seed), s.trainable))?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_blocks_are_orthonormal() {
        let s = ParamSpec {
            name: "w".into(),
            shape: vec![5, 15],
            init: Init::OrthogonalBlocks,
            trainable: true,
        };
        let t = init_tensor::<f64>(&s, SeedTree::new(0));
        for b in 0..3 {
            for i in 0..5 {
                for j in 0..5 {
                    let dot: f64 = (0..5).map(|k| t.data()[k * 15 + b * 5 + i] * t.data()[k * 15 + b * 5 + j]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-9);
                }
            }
        }
    }
}
