//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape. Every operation on a [`Tensor`]
//! pushes one node holding its output value, the ids of its inputs and
//! whatever activations its backward rule needs. Because inputs always
//! precede their consumers, [`Tensor::backward`] is a single sweep over the
//! tape in reverse append order.
//!
//! Gradients are retained for leaves created with `requires_grad` and for
//! intermediates registered with [`Tensor::watch`]; everything else is
//! dropped as soon as it has been propagated.
//!
//! ```
//! use mcn_core::tensor::Graph;
//!
//! let g = Graph::new();
//! let x = g.tensor(&[1], vec![3.0], true).unwrap();
//! let y = x.mul(&x).unwrap().sum();
//! y.backward().unwrap();
//! assert_eq!(x.grad().unwrap(), vec![6.0]);
//! ```
//!
//! A graph is confined to the thread that built it. Independent episodes on
//! separate graphs can run concurrently.

mod check;
pub(crate) mod gemm;
mod ops;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

pub use check::{finite_diff_check, max_relative_error, numerical_gradient};
pub use ops::{column_moments, log1p_exp, logistic, NORM_GUARD};
use ops::Op;

use crate::error::{Error, Result};

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    retain: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
struct Tape {
    nodes: Vec<Node>,
}

/// Handle to a differentiation tape. Cloning shares the tape.
#[derive(Clone, Default)]
pub struct Graph {
    tape: Rc<RefCell<Tape>>,
}

/// A node on a [`Graph`].
#[derive(Clone)]
pub struct Tensor {
    graph: Graph,
    id: usize,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Creates a leaf tensor. Fails on a shape/length mismatch or a
    /// non-finite value.
    pub fn tensor(&self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value {} at index {pos}",
                values[pos]
            )));
        }
        Ok(self.push(shape.to_vec(), values, Op::Leaf, requires_grad))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        self.tensor(shape, values, false)
    }

    /// Scalar constant (shape `[]`).
    pub fn scalar(&self, value: f64) -> Result<Tensor> {
        self.tensor(&[], vec![value], false)
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut tape = self.tape.borrow_mut();
        let id = tape.nodes.len();
        tape.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            retain: false,
            grad: None,
        });
        Tensor {
            graph: self.clone(),
            id,
        }
    }

    fn same(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.tape, &other.tape)
    }

    /// Backpropagates from several (possibly non-scalar) outputs at once, each
    /// seeded with an explicit upstream gradient.
    ///
    /// This is how a larger computation is split across tapes: the gradient
    /// arriving at a tensor on one tape is injected as the seed of another.
    pub fn backward_seeded(&self, seeds: &[(&Tensor, &[f64])]) -> Result<()> {
        let mut tape = self.tape.borrow_mut();
        let Some(top) = seeds.iter().map(|(t, _)| t.id).max() else {
            return Ok(());
        };
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(top + 1);
        grads.resize_with(top + 1, || None);
        for (t, g) in seeds {
            if !self.same(&t.graph) {
                return Err(Error::shape("seed tensor belongs to another graph"));
            }
            let node = &tape.nodes[t.id];
            if g.len() != node.value.len() {
                return Err(Error::shape(format!(
                    "seed gradient has {} values for a tensor of shape {:?}",
                    g.len(),
                    node.shape
                )));
            }
            ops::accumulate(&mut grads[t.id], g);
        }

        let mut retained = Vec::new();
        for id in (0..=top).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &tape.nodes[id];
            if !node.requires_grad {
                continue;
            }
            ops::propagate(&tape.nodes, id, &grad, &mut grads);
            if node.retain || matches!(node.op, Op::Leaf) {
                retained.push((id, grad));
            }
        }
        for (id, grad) in retained {
            ops::accumulate(&mut tape.nodes[id].grad, &grad);
        }
        Ok(())
    }

    /// Clears every retained gradient on the tape.
    pub fn zero_grad(&self) {
        for node in self.tape.borrow_mut().nodes.iter_mut() {
            node.grad = None;
        }
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.len()).finish()
    }
}

impl Tensor {
    pub fn from_values(graph: &Graph, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<Self> {
        graph.tensor(shape, values, requires_grad)
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.tape.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.tape.borrow().nodes[self.id].value.len()
    }

    pub fn values(&self) -> Vec<f64> {
        self.graph.tape.borrow().nodes[self.id].value.clone()
    }

    /// Runs `f` on the value buffer without copying it.
    pub fn with_values<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.graph.tape.borrow().nodes[self.id].value)
    }

    /// First (for scalars, the only) value.
    pub fn item(&self) -> f64 {
        self.graph.tape.borrow().nodes[self.id].value[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.tape.borrow().nodes[self.id].requires_grad
    }

    /// Retained gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.graph.tape.borrow().nodes[self.id].grad.clone()
    }

    pub fn zero_grad(&self) {
        self.graph.tape.borrow_mut().nodes[self.id].grad = None;
    }

    /// Registers this tensor as a watch-point: backward will retain
    /// `d(root)/d(self)` here even though it is not a leaf.
    ///
    /// Must be called before any operation consumes the tensor, since
    /// gradient tracking is decided when consumers are recorded.
    pub fn watch(&self) {
        let mut tape = self.graph.tape.borrow_mut();
        let node = &mut tape.nodes[self.id];
        node.retain = true;
        node.requires_grad = true;
    }

    /// Backpropagates from this scalar.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape()
            )));
        }
        self.graph.backward_seeded(&[(self, &[1.0])])
    }

    fn check_graph(&self, other: &Tensor) -> Result<()> {
        if self.graph.same(&other.graph) {
            Ok(())
        } else {
            Err(Error::shape("operands live on different graphs"))
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tape = self.graph.tape.borrow();
        let node = &tape.nodes[self.id];
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &node.shape)
            .field("requires_grad", &node.requires_grad)
            .finish()
    }
}
