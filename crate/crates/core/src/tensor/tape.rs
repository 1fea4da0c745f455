use std::borrow::Cow;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(super) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
pub(super) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Row layout of a normalization: `rows` independent rows of length `len`.
/// `affine_per_row` selects whether gain/bias index rows (channel norm) or
/// columns (layer norm).
#[derive(Debug, Clone, Copy)]
pub(super) struct NormGeom {
    pub rows: usize,
    pub len: usize,
    pub affine_per_row: bool,
}

#[derive(Debug)]
pub(super) enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    Relu { a: Var },
    AddBias { a: Var, bias: Var },
    Softmax { a: Var },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        geom: NormGeom,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout { a: Var, mask: Vec<T> },
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<T> },
    GlobalAvgPool { a: Var },
    Embedding { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var> },
    SliceCols { a: Var, start: usize },
    SelectRow { a: Var, row: usize },
    Reshape { a: Var },
    Sum { a: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

impl<T> Op<T> {
    pub(super) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::AddBias { .. } => "add_bias",
            Op::Softmax { .. } => "softmax",
            Op::Norm { .. } => "norm",
            Op::Dropout { .. } => "dropout",
            Op::Conv2d { .. } => "conv2d",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Embedding { .. } => "embedding_lookup",
            Op::Concat { .. } => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::SelectRow { .. } => "select_row",
            Op::Reshape { .. } => "reshape",
            Op::Sum { .. } => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Transpose { a }
            | Op::Scale { a, .. }
            | Op::Relu { a }
            | Op::Softmax { a }
            | Op::Dropout { a, .. }
            | Op::GlobalAvgPool { a }
            | Op::SliceCols { a, .. }
            | Op::SelectRow { a, .. }
            | Op::Reshape { a }
            | Op::Sum { a } => vec![*a],
            Op::AddBias { a, bias } => vec![*a, *bias],
            Op::Norm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Embedding { table, .. } => vec![*table],
            Op::Concat { parts } => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

pub(super) struct Node<'a, T: Scalar> {
    pub value: Cow<'a, Tensor<T>>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Ordered record of a forward computation.
///
/// Leaves may borrow their tensors (`'a`), so model parameters are never
/// copied onto the tape. Nodes are appended in execution order, which makes
/// the record topologically sorted by construction.
pub struct Tape<'a, T: Scalar> {
    pub(super) nodes: Vec<Node<'a, T>>,
    pub(super) grads: Vec<Option<Vec<T>>>,
    pub(super) fault: bool,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            fault: false,
        }
    }

    /// Deliberately skews the matmul backward rule. Only useful for checking
    /// that the gradient checker notices a broken backward pass.
    pub fn with_fault_injection(mut self) -> Self {
        self.fault = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf that owns its tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(Cow::Owned(value), true)
    }

    /// Trainable leaf that borrows its tensor.
    pub fn param(&mut self, value: &'a Tensor<T>) -> Var {
        self.push_leaf(Cow::Borrowed(value), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(Cow::Owned(value), false)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub(super) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
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

    /// Gradient accumulated for `v` by the last [`Tape::backward`], shaped
    /// like its value. `None` for values that do not require a gradient or
    /// that the root does not depend on.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: node.value.shape().to_vec(),
            data: g.clone(),
        })
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Reverse-mode sweep from a scalar root. Previously accumulated
    /// gradients are discarded first; within one sweep, a value used by
    /// several nodes receives the sum of their contributions.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "root {} is not on this tape ({} nodes)",
                root.0,
                self.nodes.len()
            )));
        }
        let root_shape = self.nodes[root.0].value.shape();
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {root_shape:?}"
            )));
        }
        self.zero_grad();
        self.grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                super::ops::backward_node(&self.nodes, &mut self.grads, i, &g, self.fault);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

/// Gradient buffer for `v`, zero-initialised on first use.
pub(super) fn grad_buf<'g, T: Scalar>(
    grads: &'g mut [Option<Vec<T>>],
    v: Var,
    len: usize,
) -> &'g mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}
