//! Reverse-mode automatic differentiation on dense f64 tensors.
//!
//! A [`Tape`] is an append-only arena of nodes. Each operation records its
//! inputs and enough saved state to run the adjoint later; [`Tape::backward`]
//! walks the arena in reverse and accumulates gradients for every node that
//! (transitively) depends on a parameter leaf. Tensors are identified by
//! plain [`TensorId`] indices, so handles are `Copy` and the arena owns all
//! storage. A tape and its tensors are confined to one execution context;
//! parameter sets ([`params::ParamSet`]) are plain data and may be shared
//! read-only between contexts.
//!
//! Gradient-bearing graphs and no-grad evaluation use the same kernels, so a
//! value computed under `requires_grad = false` is bitwise identical to the
//! taped one.

mod checkpoint;
mod gradcheck;
mod ops;
mod params;

pub use checkpoint::{load_params, save_params, CheckpointDtype};
pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{init_normal, init_value, Bound, ParamSet};

use std::cell::RefCell;
use std::rc::Rc;
use thiserror::Error;

/// Handle to a tensor stored on a tape.
pub type TensorId = usize;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: invalid argument: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already consumed this tape")]
    TapeConsumed,
    #[error("non-finite value detected in {context}")]
    NonFinite { context: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Operation record; holds input ids and any state the adjoint needs.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    /// rhs shape is a trailing suffix of lhs shape; broadcast over leading dims.
    AddBroadcast(TensorId, TensorId),
    Mul(TensorId, TensorId),
    MulBroadcast(TensorId, TensorId),
    Scale(TensorId, f64),
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    Reshape(TensorId),
    Concat(Vec<TensorId>, usize),
    Slice { src: TensorId, axis: usize, start: usize, len: usize },
    SoftmaxLast(TensorId),
    RmsNormLast { src: TensorId, eps: f64 },
    Silu(TensorId),
    Exp(TensorId),
    Log(TensorId),
    EmbedLookup { table: TensorId, ids: Rc<Vec<usize>> },
    /// Keeps entries where mask is true, replaces the rest with `value`.
    MaskedFill { src: TensorId, mask: Rc<Vec<bool>> },
    Mean(TensorId),
    Sum(TensorId),
    /// Scalar mean NLL over rows; saves the softmax for the adjoint.
    CrossEntropy { logits: TensorId, targets: Rc<Vec<usize>>, probs: Rc<Vec<f64>> },
    SquaredError(TensorId, TensorId),
    /// Rotary pair rotation on a [T, D] tensor, angle per (position, pair).
    Rope { src: TensorId, positions: Rc<Vec<usize>>, base: f64, freq_half: usize },
}

#[derive(Debug)]
struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// Append-only autodiff arena. See module docs.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: RefCell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), consumed: RefCell::new(false) }
    }

    fn push(&self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { data, shape, requires_grad, op });
        nodes.len() - 1
    }

    /// Constant input; gradients do not flow into it.
    pub fn constant(&self, shape: &[usize], data: Vec<f64>) -> TensorId {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "constant: data/shape mismatch");
        self.push(data, shape.to_vec(), false, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> TensorId {
        self.push(vec![value], vec![], false, Op::Leaf)
    }

    /// Parameter leaf; gradients accumulate here.
    pub fn leaf(&self, shape: &[usize], data: Vec<f64>) -> TensorId {
        assert_eq!(data.len(), shape.iter().product::<usize>(), "leaf: data/shape mismatch");
        self.push(data, shape.to_vec(), true, Op::Leaf)
    }

    /// Copy of `id`'s current value as a fresh constant; cuts the grad link.
    pub fn detach(&self, id: TensorId) -> TensorId {
        let (data, shape) = {
            let nodes = self.nodes.borrow();
            (nodes[id].data.clone(), nodes[id].shape.clone())
        };
        self.push(data, shape, false, Op::Leaf)
    }

    pub fn shape(&self, id: TensorId) -> Vec<usize> {
        self.nodes.borrow()[id].shape.clone()
    }

    pub fn data(&self, id: TensorId) -> Vec<f64> {
        self.nodes.borrow()[id].data.clone()
    }

    pub fn value_scalar(&self, id: TensorId) -> f64 {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[id].data.len(), 1, "value_scalar on non-scalar tensor");
        nodes[id].data[0]
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// True if any entry of `id` is NaN or infinite.
    pub fn has_non_finite(&self, id: TensorId) -> bool {
        self.nodes.borrow()[id].data.iter().any(|x| !x.is_finite())
    }

    /// Reverse pass from a scalar `loss`. Returns per-node gradients
    /// (`None` for nodes gradients never reached). Errors on a second call:
    /// adjoint state is consumed.
    pub fn backward(&self, loss: TensorId) -> Result<Grads> {
        if *self.consumed.borrow() {
            return Err(TensorError::TapeConsumed);
        }
        *self.consumed.borrow_mut() = true;

        let nodes = self.nodes.borrow();
        if nodes[loss].data.len() != 1 {
            return Err(TensorError::NotScalar(nodes[loss].shape.clone()));
        }
        if !nodes[loss].data[0].is_finite() {
            return Err(TensorError::NonFinite { context: "backward loss".into() });
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            if grads[id].is_none() || !nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            ops::backward_step(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Grads { by_id: grads })
    }
}

/// Gradients produced by [`Tape::backward`], addressed by tensor id.
pub struct Grads {
    by_id: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.by_id.get(id).and_then(|g| g.as_deref())
    }

    /// Gradient for `id`, or zeros of the given length if it never received one.
    pub fn get_or_zeros(&self, id: TensorId, len: usize) -> Vec<f64> {
        match self.get(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; len],
        }
    }
}

#[cfg(test)]
mod tests;
