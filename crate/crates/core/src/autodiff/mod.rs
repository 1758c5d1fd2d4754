//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Tensor`] is a cheap handle to an immutable node. Every operation on
//! tensors that require gradients records its inputs, so a forward pass
//! builds a DAG rooted at the loss; [`Tensor::backward`] walks that DAG once
//! in reverse topological order, accumulating into leaf gradients and
//! releasing the recorded operations as it goes.
//!
//! Leaf gradients accumulate across graphs until [`Tensor::zero_grad`]; a
//! second backward from the same root is rejected with
//! [`TensorError::AlreadyBackpropagated`].
//!
//! Only scalar-tensor broadcasting exists. Bias adds and other expansions go
//! through the explicit [`Tensor::repeat`].

mod grad;
mod ops;

use std::cell::{Cell, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("buffer of length {got} does not fill shape {shape:?}")]
    DataLength { shape: Vec<usize>, got: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran from this root")]
    AlreadyBackpropagated,
    #[error("label {label} at row {row} is not a class index below {classes}")]
    InvalidLabel {
        row: usize,
        label: usize,
        classes: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) enum Op<T: Scalar> {
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    Div(Tensor<T>, Tensor<T>),
    AddScalar(Tensor<T>),
    MulScalar(Tensor<T>, T),
    Recip(Tensor<T>),
    Exp(Tensor<T>),
    Log(Tensor<T>),
    Sigmoid(Tensor<T>),
    Tanh(Tensor<T>),
    Relu(Tensor<T>),
    Clamp(Tensor<T>, T, T),
    MatMul(Tensor<T>, Tensor<T>),
    Bmm(Tensor<T>, Tensor<T>),
    Transpose(Tensor<T>),
    Reshape(Tensor<T>),
    Concat(Vec<Tensor<T>>, usize),
    Slice(Tensor<T>, usize, usize),
    Softmax(Tensor<T>),
    LayerNorm(Tensor<T>, Vec<T>),
    Sum(Tensor<T>),
    Mean(Tensor<T>),
    SumAxis(Tensor<T>, usize),
    Repeat(Tensor<T>),
    CrossEntropy(Tensor<T>, Vec<T>, Vec<usize>),
}

impl<T: Scalar> Op<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        use Op::*;
        match self {
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) | Bmm(a, b) => {
                vec![a, b]
            }
            AddScalar(a) | MulScalar(a, _) | Recip(a) | Exp(a) | Log(a) | Sigmoid(a)
            | Tanh(a) | Relu(a) | Clamp(a, _, _) | Transpose(a) | Reshape(a) | Slice(a, _, _)
            | Softmax(a) | LayerNorm(a, _) | Sum(a) | Mean(a) | SumAxis(a, _) | Repeat(a)
            | CrossEntropy(a, _, _) => vec![a],
            Concat(parts, _) => parts.iter().collect(),
        }
    }
}

pub(crate) struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    op: RefCell<Option<Op<T>>>,
    backpropagated: Cell<bool>,
}

/// Dense tensor with an optional recorded history.
pub struct Tensor<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &self.0.data)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn build(data: Vec<T>, shape: Vec<usize>, requires_grad: bool, op: Option<Op<T>>) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        Self(Rc::new(Node {
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            op: RefCell::new(op),
            backpropagated: Cell::new(false),
        }))
    }

    /// Result of an operation: recorded only when some input needs gradients.
    pub(crate) fn from_op(data: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Self {
        let requires_grad = op.inputs().iter().any(|t| t.requires_grad());
        let op = requires_grad.then_some(op);
        Self::build(data, shape, requires_grad, op)
    }

    /// Constant tensor (no gradient).
    pub fn new(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                got: data.len(),
            });
        }
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    /// Leaf tensor whose gradient is collected by [`backward`](Self::backward).
    pub fn param(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                got: data.len(),
            });
        }
        Ok(Self::build(data, shape.to_vec(), true, None))
    }

    pub fn scalar(x: T) -> Self {
        Self::build(vec![x], Vec::new(), false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(vec![T::zero(); numel(shape)], shape.to_vec(), false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() == 1 {
            Ok(self.0.data[0])
        } else {
            Err(TensorError::NotScalar(self.shape().to_vec()))
        }
    }

    /// Accumulated gradient, if any backward pass reached this tensor.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    /// Accumulated gradient, zeros when none was accumulated.
    pub fn grad_or_zeros(&self) -> Vec<T> {
        self.grad().unwrap_or_else(|| vec![T::zero(); self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    pub(crate) fn grad_mut(&self) -> RefMut<'_, Vec<T>> {
        let n = self.numel();
        RefMut::map(self.0.grad.borrow_mut(), |g| {
            g.get_or_insert_with(|| vec![T::zero(); n])
        })
    }

    fn id(&self) -> *const Node<T> {
        Rc::as_ptr(&self.0)
    }

    /// Back-propagates from this scalar, accumulating leaf gradients.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.shape().to_vec()));
        }
        if self.0.backpropagated.replace(true) {
            return Err(TensorError::AlreadyBackpropagated);
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topological_order();
        self.grad_mut()[0] += T::one();
        for node in order.iter().rev() {
            let Some(op) = node.0.op.borrow_mut().take() else {
                continue;
            };
            let g = node
                .0
                .grad
                .borrow_mut()
                .take()
                .unwrap_or_else(|| vec![T::zero(); node.numel()]);
            grad::propagate(&op, node, &g);
        }
        Ok(())
    }

    /// Post-order over recorded nodes reachable from `self`; each node once.
    fn topological_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node<T>> = HashSet::new();
        // (node, children already pushed)
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !seen.insert(node.id()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(op) = node.0.op.borrow().as_ref() {
                for input in op.inputs() {
                    if input.requires_grad() && !seen.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}
