//! Tape-based reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] owns every value produced during one forward pass. Tensors are
//! lightweight handles ([`Tensor`]) into that tape. Operations are recorded in
//! execution order, so the tape is topologically sorted by construction and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Tapes are meant to live for one training step: build, backward, read the
//! gradients of the leaves, drop.

mod gradcheck;
mod kernels;

pub use gradcheck::{grad_check, GradCheckError, GradCheckReport};

use thiserror::Error;

/// Errors raised while recording or differentiating a computation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("contract violation in `{op}`: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("contract violation in `{op}`: {detail}")]
    Contract { op: &'static str, detail: String },
    #[error("numeric overflow: `{op}` produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tensor(usize);

impl Tensor {
    pub fn id(self) -> usize {
        self.0
    }
}

/// A named, shaped block of trainable values that lives outside any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self {
            name: name.into(),
            shape,
            values,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![0.0; n])
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Primitive operations. Attributes are carried inline.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Trainable input; gradients are tracked.
    Leaf,
    /// Constant input; no gradient flows into it.
    Constant,
    /// `[m, k] x [k, n] -> [m, n]`.
    MatMul,
    /// Elementwise sum. The right operand may also be a row (`[n]` or `[1, n]`)
    /// or a column (`[m, 1]`) broadcast over a rank-2 left operand.
    Add,
    /// Elementwise difference, same broadcasting as [`Op::Add`].
    Sub,
    /// Elementwise product of equal shapes.
    Mul,
    Scale(f64),
    Shift(f64),
    Tanh,
    Sigmoid,
    Exp,
    Log,
    /// Max-subtracted log-sum-exp; removes `axis`.
    LogSumExp {
        axis: usize,
    },
    /// `softmax(alpha * x)` along `axis`, max-subtracted.
    Softmax {
        axis: usize,
        alpha: f64,
    },
    /// `(x_j - c_k)^2` for every constant centre `c_k`: `[N...] -> [K, N]`.
    /// The centres are constants, so no gradient flows into them.
    SqDiffConst {
        centers: Vec<f64>,
    },
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    /// Embedding lookup: rows of a `[R, ...]` input.
    RowSelect {
        rows: Vec<usize>,
    },
    /// `sum_i w_i * x_i` for `w: [m]` and `x: [m, ...]`.
    WeightedSum,
    Sum,
    SumAxis {
        axis: usize,
    },
    Mean,
    Reshape {
        shape: Vec<usize>,
    },
    Transpose,
    /// Picks entries of the flattened input.
    Gather {
        indices: Vec<usize>,
    },
    /// `[len(ids), depth]` matrix of `ids[i] == j` indicators. Constant output.
    OneHotMask {
        ids: Vec<usize>,
        depth: usize,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Shift(_) => "shift",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::LogSumExp { .. } => "logsumexp",
            Op::Softmax { .. } => "softmax",
            Op::SqDiffConst { .. } => "sqdiff",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::RowSelect { .. } => "row_select",
            Op::WeightedSum => "weighted_sum",
            Op::Sum => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Mean => "mean",
            Op::Reshape { .. } => "reshape",
            Op::Transpose => "transpose",
            Op::Gather { .. } => "gather",
            Op::OneHotMask { .. } => "one_hot",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<Tensor>,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node on a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    numels: Vec<usize>,
}

impl Gradients {
    /// Gradient of `t`, or `None` when the loss does not depend on it.
    pub fn get(&self, t: Tensor) -> Option<&[f64]> {
        self.grads.get(t.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `t`, zero-filled when unreachable.
    pub fn wrt(&self, t: Tensor) -> Vec<f64> {
        match self.get(t) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.numels[t.0]],
        }
    }

    /// Adds the gradient of `t` into `acc`, skipping unreachable nodes.
    pub fn accumulate_into(&self, t: Tensor, acc: &mut [f64]) {
        if let Some(g) = self.get(t) {
            for (a, g) in acc.iter_mut().zip(g) {
                *a += g;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn value(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].value
    }

    /// The single entry of a one-element tensor.
    pub fn scalar(&self, t: Tensor) -> f64 {
        let v = self.value(t);
        debug_assert_eq!(v.len(), 1);
        v[0]
    }

    pub fn op(&self, t: Tensor) -> &Op {
        &self.nodes[t.0].op
    }

    fn push(
        &mut self,
        op: Op,
        inputs: Vec<Tensor>,
        shape: Vec<usize>,
        value: Vec<f64>,
        requires_grad: bool,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            value,
            requires_grad,
        });
        Tensor(self.nodes.len() - 1)
    }

    fn input(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op) -> Result<Tensor> {
        let name = op.name();
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != values.len()
        {
            return Err(TensorError::ShapeMismatch {
                op: name,
                shapes: vec![shape, vec![values.len()]],
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let rg = matches!(op, Op::Leaf);
        Ok(self.push(op, Vec::new(), shape, values, rg))
    }

    /// Records a trainable input.
    pub fn leaf(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor> {
        self.input(shape, values, Op::Leaf)
    }

    /// Records a constant input.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor> {
        self.input(shape, values, Op::Constant)
    }

    pub fn param(&mut self, p: &Param) -> Result<Tensor> {
        self.leaf(p.shape.clone(), p.values.clone())
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Result<Tensor> {
        let n = shape.iter().product();
        self.constant(shape, vec![0.0; n])
    }

    /// Records `op` applied to `inputs` and returns the output tensor.
    pub fn apply(&mut self, op: Op, inputs: &[Tensor]) -> Result<Tensor> {
        if matches!(op, Op::Leaf | Op::Constant) {
            return Err(TensorError::Contract {
                op: op.name(),
                detail: "inputs are created with Tape::leaf / Tape::constant".into(),
            });
        }
        let shapes: Vec<&[usize]> = inputs.iter().map(|t| self.shape(*t)).collect();
        let values: Vec<&[f64]> = inputs.iter().map(|t| self.value(*t)).collect();
        let (shape, value) = kernels::forward(&op, &shapes, &values)?;
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = !matches!(op, Op::OneHotMask { .. })
            && inputs.iter().any(|t| self.nodes[t.0].requires_grad);
        Ok(self.push(op, inputs.to_vec(), shape, value, requires_grad))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Tensor) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar {
                shape: shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let shapes: Vec<&[usize]> = node.inputs.iter().map(|t| self.shape(*t)).collect();
            let values: Vec<&[f64]> = node.inputs.iter().map(|t| self.value(*t)).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|t| self.nodes[t.0].requires_grad)
                .collect();
            let input_grads =
                kernels::backward(&node.op, &shapes, &values, &node.value, &g, &needs);
            for ((t, ig), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let (Some(ig), true) = (ig, need) else {
                    continue;
                };
                match &mut grads[t.0] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
            grads[id] = Some(g);
        }
        let numels = self.nodes.iter().map(|n| n.value.len()).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, numels })
    }

    // Convenience wrappers over `apply`.

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        self.apply(Op::Scale(c), &[a])
    }
    pub fn shift(&mut self, a: Tensor, c: f64) -> Result<Tensor> {
        self.apply(Op::Shift(c), &[a])
    }
    pub fn tanh(&mut self, a: Tensor) -> Result<Tensor> {
        self.apply(Op::Tanh, &[a])
    }
    pub fn sigmoid(&mut self, a: Tensor) -> Result<Tensor> {
        self.apply(Op::Sigmoid, &[a])
    }
    pub fn exp(&mut self, a: Tensor) -> Result<Tensor> {
        self.apply(Op::Exp, &[a])
    }
    pub fn log(&mut self, a: Tensor) -> Result<Tensor> {
        self.apply(Op::Log, &[a])
    }
    pub fn logsumexp(&mut self, a: Tensor, axis: usize) -> Result<Tensor> {
        self.apply(Op::LogSumExp { axis }, &[a])
    }
    pub fn softmax(&mut self, a: Tensor, axis: usize, alpha: f64) -> Result<Tensor> {
        self.apply(Op::Softmax { axis, alpha }, &[a])
    }
    pub fn sq_diff_const(&mut self, a: Tensor, centers: Vec<f64>) -> Result<Tensor> {
        self.apply(Op::SqDiffConst { centers }, &[a])
    }
    pub fn concat(&mut self, parts: &[Tensor], axis: usize) -> Result<Tensor> {
        self.apply(Op::Concat { axis }, parts)
    }
    pub fn slice(&mut self, a: Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.apply(Op::Slice { axis, start, len }, &[a])
    }
    pub fn row_select(&mut self, a: Tensor, rows: Vec<usize>) -> Result<Tensor> {
        self.apply(Op::RowSelect { rows }, &[a])
    }
    pub fn weighted_sum(&mut self, w: Tensor, x: Tensor) -> Result<Tensor> {
        self.apply(Op::WeightedSum, &[w, x])
    }
    pub fn sum(&mut self, a: Tensor) -> Result<Tensor> {
        self.apply(Op::Sum, &[a])
    }
    pub fn sum_axis(&mut self, a: Tensor, axis: usize) -> Result<Tensor> {
        self.apply(Op::SumAxis { axis }, &[a])
    }
    pub fn mean(&mut self, a: Tensor) -> Result<Tensor> {
        self.apply(Op::Mean, &[a])
    }
    pub fn reshape(&mut self, a: Tensor, shape: Vec<usize>) -> Result<Tensor> {
        self.apply(Op::Reshape { shape }, &[a])
    }
    pub fn transpose(&mut self, a: Tensor) -> Result<Tensor> {
        self.apply(Op::Transpose, &[a])
    }
    pub fn gather(&mut self, a: Tensor, indices: Vec<usize>) -> Result<Tensor> {
        self.apply(Op::Gather { indices }, &[a])
    }
    pub fn one_hot_mask(&mut self, ids: Vec<usize>, depth: usize) -> Result<Tensor> {
        self.apply(Op::OneHotMask { ids, depth }, &[])
    }
}
