//! Named finite-difference cases covering every differentiable op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{analytic_gradients, numeric_gradients, project, relative_error};
use crate::error::Result;
use crate::nn::{self, AttentionVars, GruVars, LinearVars};
use crate::tape::{BnMode, PoolMode, Tape, Var};
use crate::tensor::Tensor;

pub const TRIALS: u64 = 10;
pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;
/// Bound on both gradient norms for inputs whose true gradient is zero.
pub const ZERO_TOLERANCE: f64 = 1e-8;

type Inputs = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>;
type Function = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Inputs,
    pub f: Function,
    /// Inputs with an identically zero gradient, checked in absolute terms.
    pub zero_grad: Vec<usize>,
}

impl Case {
    pub fn new(
        name: &'static str,
        inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> + 'static,
        f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            name,
            inputs: Box::new(inputs),
            f: Box::new(f),
            zero_grad: Vec::new(),
        }
    }

    pub fn with_zero_grad(mut self, inputs: &[usize]) -> Self {
        self.zero_grad = inputs.to_vec();
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub name: &'static str,
    /// Largest relative error over all trials and inputs.
    pub worst: f64,
    pub failures: Vec<String>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Runs `trials` seeded trials of a case.
pub fn run(case: &Case, trials: u64) -> Result<Outcome> {
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let inputs = (case.inputs)(&mut rng);
        let analytic = analytic_gradients(&inputs, &*case.f)?;
        let numeric = numeric_gradients(&inputs, STEP, &*case.f)?;
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            if case.zero_grad.contains(&i) {
                let norm = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm(a) > ZERO_TOLERANCE || norm(n) > ZERO_TOLERANCE {
                    failures.push(format!("trial {trial} input {i}: gradient should vanish"));
                }
                continue;
            }
            let e = relative_error(a, n);
            worst = worst.max(e);
            if !(e <= TOLERANCE) {
                failures.push(format!("trial {trial} input {i}: relative error {e:e}"));
            }
        }
    }
    Ok(Outcome {
        name: case.name,
        worst,
        failures,
    })
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Values bounded away from zero, for ops with a kink there.
pub fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Distinct values spaced well beyond the probe step, in random order.
pub fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 0.5).collect();
    for i in (1..n).rev() {
        data.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn lin(v: &[Var], at: usize) -> LinearVars {
    LinearVars {
        weight: v[at],
        bias: v[at + 1],
    }
}

/// One case per op family of the tape and the `nn` blocks.
pub fn op_cases() -> Vec<Case> {
    let mut cases = vec![
        Case::new(
            "matmul",
            |r| vec![uniform(r, &[3, 4]), uniform(r, &[4, 5])],
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y, 1)
            },
        ),
        Case::new(
            "bmm",
            |r| vec![uniform(r, &[2, 3, 4]), uniform(r, &[2, 4, 5])],
            |t, v| {
                let y = t.bmm(v[0], v[1], false)?;
                project(t, y, 2)
            },
        ),
        Case::new(
            "bmm_transposed",
            |r| vec![uniform(r, &[2, 3, 4]), uniform(r, &[2, 5, 4])],
            |t, v| {
                let y = t.bmm(v[0], v[1], true)?;
                project(t, y, 3)
            },
        ),
        Case::new(
            "add_sub_mul_scale",
            |r| vec![uniform(r, &[2, 3]), uniform(r, &[2, 3])],
            |t, v| {
                let a = t.add(v[0], v[1])?;
                let s = t.sub(v[0], v[1])?;
                let m = t.mul(a, s)?;
                let m = t.scale(m, 0.7)?;
                project(t, m, 4)
            },
        ),
        Case::new(
            "add_bias",
            |r| vec![uniform(r, &[2, 3, 4]), uniform(r, &[4])],
            |t, v| {
                let y = t.add_bias(v[0], v[1])?;
                project(t, y, 5)
            },
        ),
        Case::new(
            "relu",
            |r| vec![off_zero(r, &[4, 5])],
            |t, v| {
                let y = t.relu(v[0])?;
                project(t, y, 6)
            },
        ),
        Case::new(
            "sigmoid",
            |r| vec![uniform(r, &[4, 5]).map(|x| 3.0 * x)],
            |t, v| {
                let y = t.sigmoid(v[0])?;
                project(t, y, 7)
            },
        ),
        Case::new(
            "tanh",
            |r| vec![uniform(r, &[4, 5]).map(|x| 3.0 * x)],
            |t, v| {
                let y = t.tanh(v[0])?;
                project(t, y, 8)
            },
        ),
        Case::new(
            "softplus",
            |r| vec![uniform(r, &[4, 5]).map(|x| 3.0 * x)],
            |t, v| {
                let y = t.softplus(v[0])?;
                project(t, y, 9)
            },
        ),
        Case::new(
            "softmax",
            |r| vec![uniform(r, &[3, 5])],
            |t, v| {
                let y = t.softmax(v[0], None)?;
                project(t, y, 10)
            },
        ),
        Case::new(
            "masked_softmax",
            |r| vec![uniform(r, &[3, 5])],
            |t, v| {
                let mask: Vec<bool> = (0..15).map(|i| i % 5 != 3 && i != 6).collect();
                let y = t.softmax(v[0], Some(&mask))?;
                project(t, y, 11)
            },
        ),
        Case::new(
            "reshape_permute",
            |r| vec![uniform(r, &[2, 3, 4])],
            |t, v| {
                let y = t.permute(v[0], &[2, 0, 1])?;
                let y = t.reshape(y, vec![4, 6])?;
                project(t, y, 12)
            },
        ),
        Case::new(
            "concat_narrow_mean_sum",
            |r| vec![uniform(r, &[2, 3]), uniform(r, &[2, 4])],
            |t, v| {
                let c = t.concat(&[v[0], v[1]], 1)?;
                let n = t.narrow(c, 1, 2, 3)?;
                let s = t.mean(n)?;
                let p = project(t, c, 13)?;
                let y = t.mul(s, p)?;
                t.sum(y)
            },
        ),
        Case::new(
            "mean_pool",
            |r| vec![uniform(r, &[2, 3, 4, 5])],
            |t, v| {
                let y = t.pool(v[0], &[2, 3], PoolMode::Mean)?;
                project(t, y, 14)
            },
        ),
        Case::new(
            "max_pool",
            |r| vec![distinct(r, &[2, 3, 4])],
            |t, v| {
                let y = t.pool(v[0], &[1], PoolMode::Max)?;
                project(t, y, 15)
            },
        ),
    ];
    for (name, stride) in [("conv2d_stride1", 1usize), ("conv2d_stride2", 2)] {
        cases.push(Case::new(
            name,
            |r| vec![uniform(r, &[2, 2, 5, 6]), uniform(r, &[3, 2, 3, 3])],
            move |t, v| {
                let y = t.conv2d(v[0], v[1], stride)?;
                project(t, y, 16 + stride as u64)
            },
        ));
    }
    cases.extend([
        Case::new(
            "batch_norm_train",
            |r| vec![uniform(r, &[4, 3, 2, 2]), uniform(r, &[3]), uniform(r, &[3])],
            |t, v| {
                let (y, _) = t.batch_norm(v[0], v[1], v[2], &BnMode::Train, 1e-5)?;
                project(t, y, 20)
            },
        ),
        Case::new(
            "batch_norm_eval",
            |r| vec![uniform(r, &[4, 3, 2, 2]), uniform(r, &[3]), uniform(r, &[3])],
            |t, v| {
                let mode = BnMode::Eval {
                    mean: vec![0.1, -0.2, 0.3],
                    var: vec![0.5, 1.5, 0.9],
                };
                let (y, _) = t.batch_norm(v[0], v[1], v[2], &mode, 1e-5)?;
                project(t, y, 21)
            },
        ),
        Case::new(
            "layer_norm",
            |r| vec![uniform(r, &[2, 3, 6]), uniform(r, &[6]), uniform(r, &[6])],
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                project(t, y, 22)
            },
        ),
        Case::new(
            "film",
            |r| vec![uniform(r, &[2, 3, 2, 2]), uniform(r, &[2, 3]), uniform(r, &[2, 3])],
            |t, v| {
                let y = t.film(v[0], v[1], v[2])?;
                project(t, y, 23)
            },
        ),
        Case::new(
            "embedding",
            |r| vec![uniform(r, &[5, 3])],
            |t, v| {
                let y = t.embedding(v[0], &[4, 0, 4, 2])?;
                project(t, y, 24)
            },
        ),
        Case::new(
            "row_cosine",
            |r| vec![uniform(r, &[4, 6]), uniform(r, &[4, 6])],
            |t, v| {
                let y = t.row_cosine(v[0], v[1], 1e-8)?;
                project(t, y, 25)
            },
        ),
        Case::new(
            "multi_head_attention",
            |r| {
                let mut v = vec![uniform(r, &[2, 4, 6])];
                for _ in 0..4 {
                    v.push(uniform(r, &[6, 6]));
                    v.push(uniform(r, &[6]));
                }
                v
            },
            |t, v| {
                let mask = [true, true, true, false, true, true, false, false];
                let p = AttentionVars {
                    query: lin(v, 1),
                    key: lin(v, 3),
                    value: lin(v, 5),
                    output: lin(v, 7),
                };
                let out = nn::multi_head_attention(t, v[0], &p, 2, Some(&mask))?;
                project(t, out.output, 26)
            },
        )
        // A key bias shifts every score of a query equally; softmax ignores it.
        .with_zero_grad(&[4]),
        Case::new(
            "gru",
            |r| {
                vec![
                    uniform(r, &[2, 4, 3]),
                    uniform(r, &[3, 15]),
                    uniform(r, &[5, 15]),
                    uniform(r, &[15]),
                    uniform(r, &[15]),
                ]
            },
            |t, v| {
                let mask = [true, true, true, true, true, false, false, false];
                let p = GruVars {
                    w_input: v[1],
                    w_hidden: v[2],
                    b_input: v[3],
                    b_hidden: v[4],
                };
                let h = nn::gru_encode(t, v[0], &p, Some(&mask))?;
                project(t, h, 27)
            },
        ),
    ]);
    cases
}
