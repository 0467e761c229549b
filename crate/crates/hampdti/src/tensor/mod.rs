//! Dense f64 matrices with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records one op node per forward call whose output requires
//! gradients; [`Tape::backward`] replays the record in exact reverse,
//! accumulating into each tensor's grad buffer. Parameters outlive tapes; a
//! fresh tape is recorded per training step.
//!
//! Every op checks its output for NaN/Inf and fails with the op name rather
//! than propagating poison through a training run.

mod ops;
mod optim;

pub mod gradcheck;

pub use optim::{Adam, AdamConfig};

use crate::sparse::SparseMatrix;
use std::cell::{Ref, RefCell};
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: left {lr}x{lc}, right {rr}x{rc}")]
    ShapeMismatch {
        op: &'static str,
        lr: usize,
        lc: usize,
        rr: usize,
        rc: usize,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("{0} expects a scalar (1x1) tensor")]
    NotScalar(&'static str),
    #[error("loss tensor is not the output of the recorded tape")]
    LossNotOnTape,
    #[error("parameter {0} has no gradient; run backward first")]
    MissingGradient(usize),
    #[error("empty mask: loss needs at least one labeled entry")]
    EmptyMask,
}

struct Inner {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Shared handle to a dense matrix. Cloning is cheap and aliases storage.
#[derive(Clone)]
pub struct Tensor(Rc<RefCell<Inner>>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.0.borrow();
        write!(
            f,
            "Tensor({}x{}, requires_grad={})",
            inner.rows, inner.cols, inner.requires_grad
        )
    }
}

impl Tensor {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        assert_eq!(data.len(), rows * cols, "data length must match shape");
        Tensor(Rc::new(RefCell::new(Inner {
            rows,
            cols,
            data,
            requires_grad: false,
            grad: None,
        })))
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor::from_vec(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar_value(v: f64) -> Tensor {
        Tensor::from_vec(1, 1, vec![v])
    }

    /// Trainable parameter: gradient accumulation enabled.
    pub fn param(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        let t = Tensor::from_vec(rows, cols, data);
        t.0.borrow_mut().requires_grad = true;
        t
    }

    pub fn rows(&self) -> usize {
        self.0.borrow().rows
    }

    pub fn cols(&self) -> usize {
        self.0.borrow().cols
    }

    pub fn shape(&self) -> (usize, usize) {
        let i = self.0.borrow();
        (i.rows, i.cols)
    }

    pub fn len(&self) -> usize {
        let i = self.0.borrow();
        i.rows * i.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, yes: bool) {
        self.0.borrow_mut().requires_grad = yes;
    }

    pub fn value(&self) -> Ref<'_, Vec<f64>> {
        Ref::map(self.0.borrow(), |i| &i.data)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.borrow().data.clone()
    }

    pub fn scalar(&self) -> Result<f64, TensorError> {
        let i = self.0.borrow();
        if i.rows * i.cols != 1 {
            return Err(TensorError::NotScalar("scalar"));
        }
        Ok(i.data[0])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let i = self.0.borrow();
        i.data[r * i.cols + c]
    }

    /// Overwrite the data in place (same shape). Used by the optimizer and
    /// by finite-difference probes.
    pub fn set_data(&self, data: &[f64]) {
        let mut i = self.0.borrow_mut();
        assert_eq!(data.len(), i.data.len());
        i.data.copy_from_slice(data);
    }

    pub fn nudge(&self, flat_index: usize, delta: f64) {
        self.0.borrow_mut().data[flat_index] += delta;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut i = self.0.borrow_mut();
        match &mut i.grad {
            Some(buf) => {
                for (b, &x) in buf.iter_mut().zip(g) {
                    *b += x;
                }
            }
            None => i.grad = Some(g.to_vec()),
        }
    }

    fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }
}

/// One recorded operation. Saved fields are whatever backward needs.
enum Node {
    Matmul {
        a: Tensor,
        b: Tensor,
        out: Tensor,
    },
    /// out = a * b^T
    MatmulNT {
        a: Tensor,
        b: Tensor,
        out: Tensor,
    },
    Add {
        a: Tensor,
        b: Tensor,
        out: Tensor,
    },
    AddRowBroadcast {
        x: Tensor,
        bias: Tensor,
        out: Tensor,
    },
    Relu {
        x: Tensor,
        out: Tensor,
    },
    Sigmoid {
        x: Tensor,
        out: Tensor,
    },
    SoftmaxVec {
        x: Tensor,
        out: Tensor,
    },
    RowMaxPool {
        x: Tensor,
        out: Tensor,
        argmax: Vec<usize>,
    },
    Mul {
        a: Tensor,
        b: Tensor,
        out: Tensor,
    },
    Sum {
        x: Tensor,
        out: Tensor,
    },
    SpmmDense {
        s: Rc<SparseMatrix>,
        x: Tensor,
        out: Tensor,
    },
    WeightedRowBlock {
        alpha: Tensor,
        rels: Rc<Vec<SparseMatrix>>,
        row_start: usize,
        out: Tensor,
    },
    WeightedRightMul {
        x: Tensor,
        alpha: Tensor,
        rels: Rc<Vec<SparseMatrix>>,
        out: Tensor,
    },
    SliceCols {
        x: Tensor,
        col_start: usize,
        out: Tensor,
    },
    SliceRows {
        x: Tensor,
        row_start: usize,
        out: Tensor,
    },
    BipartiteEmbed {
        block: Tensor,
        out: Tensor,
    },
    SymNormalize {
        p: Tensor,
        out: Tensor,
        inv_sqrt_deg: Vec<f64>,
    },
    Fuse {
        weights: Tensor,
        items: Vec<Tensor>,
        out: Tensor,
    },
    VStack {
        items: Vec<Tensor>,
        out: Tensor,
    },
    MaskedWeightedSqLoss {
        pred: Tensor,
        entries: Rc<Vec<(usize, f64)>>,
        gamma: f64,
        out: Tensor,
    },
}

/// Records op nodes during a forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn finish(
        &mut self,
        node: impl FnOnce(Tensor) -> Node,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        requires_grad: bool,
        op: &'static str,
    ) -> Result<Tensor, TensorError> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(op));
        }
        let out = Tensor::from_vec(rows, cols, data);
        if requires_grad {
            out.0.borrow_mut().requires_grad = true;
            self.nodes.push(node(out.clone()));
        }
        Ok(out)
    }

    /// Reverse pass from a scalar loss. Gradients land in every tensor with
    /// `requires_grad`; the tape is drained.
    pub fn backward(&mut self, loss: &Tensor) -> Result<(), TensorError> {
        if loss.len() != 1 {
            return Err(TensorError::NotScalar("backward"));
        }
        let on_tape = self.nodes.iter().rev().any(|n| node_out(n).ptr_eq(loss));
        if !on_tape {
            return Err(TensorError::LossNotOnTape);
        }
        loss.accumulate_grad(&[1.0]);
        for node in self.nodes.drain(..).rev() {
            ops::backward_node(&node)?;
        }
        Ok(())
    }

    /// Drop the recorded nodes without propagating gradients (inference).
    pub fn clear(&mut self) {
        self.nodes.clear();
    }
}

fn node_out(n: &Node) -> &Tensor {
    match n {
        Node::Matmul { out, .. }
        | Node::MatmulNT { out, .. }
        | Node::Add { out, .. }
        | Node::AddRowBroadcast { out, .. }
        | Node::Relu { out, .. }
        | Node::Sigmoid { out, .. }
        | Node::SoftmaxVec { out, .. }
        | Node::RowMaxPool { out, .. }
        | Node::Mul { out, .. }
        | Node::Sum { out, .. }
        | Node::SpmmDense { out, .. }
        | Node::WeightedRowBlock { out, .. }
        | Node::WeightedRightMul { out, .. }
        | Node::SliceCols { out, .. }
        | Node::SliceRows { out, .. }
        | Node::BipartiteEmbed { out, .. }
        | Node::SymNormalize { out, .. }
        | Node::Fuse { out, .. }
        | Node::VStack { out, .. }
        | Node::MaskedWeightedSqLoss { out, .. } => out,
    }
}

#[cfg(test)]
mod tests;
