//! Wengert tape: every primitive executed during a forward pass is appended
//! in order, so replaying the list backwards is a valid topological sweep.

use crate::error::{AutodiffError, Result};
use crate::param::{ParamKey, ParamSource, Parameter};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Mean,
}

#[derive(Clone, Debug)]
pub enum BnMode<T> {
    /// Normalise with batch statistics.
    Train,
    /// Normalise with stored running statistics.
    Eval { mean: Vec<T>, var: Vec<T> },
}

/// Per-channel statistics of a training-mode batch norm call.
/// `var` is the unbiased estimate, ready for a running-average update.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub(crate) enum Op<T> {
    Leaf,
    Param(ParamKey),
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Softmax {
        x: Var,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    Pool {
        x: Var,
        axes: Vec<usize>,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    Conv2d {
        x: Var,
        k: Var,
        stride: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    Film {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    RowCosine {
        a: Var,
        b: Var,
        eps: T,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Ordered record of executed primitives with their outputs.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_with_grad(value, op, requires_grad)
    }

    pub(crate) fn push_with_grad(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_with_grad(value, Op::Leaf, false)
    }

    /// Records a parameter read. Only trainable parameters get gradients.
    pub fn param(&mut self, key: ParamKey, param: &Parameter<T>) -> Var {
        self.push_with_grad(param.value.clone(), Op::Param(key), param.trainable)
    }

    pub fn param_from(&mut self, source: &dyn ParamSource<T>, id: &str) -> Result<Var> {
        let (key, p) = source
            .lookup(id)
            .ok_or_else(|| AutodiffError::UnknownParameter(id.to_string()))?;
        Ok(self.param(key, p))
    }
}
