//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every differentiable operation applied to its
//! [`Var`]s in execution order, which is already a topological order of the
//! computation graph. [`Tape::backward`] walks the records once in reverse
//! and returns a [`Gradients`] table. A tape can be differentiated once;
//! build a new tape for every forward pass.

mod conv;
mod ops;
mod pool;

pub use conv::ConvSpec;
pub use ops::{concat, gated_fuse};
pub use pool::PoolMode;

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use ops::Broadcast;

/// Deliberate backward-pass defects, used to confirm that the gradient
/// checker notices a broken derivative. Never set outside of tests and the
/// `gradcheck --inject-fault` path.
#[doc(hidden)]
pub mod fault {
    use std::cell::Cell;

    #[derive(Clone, Copy, Debug, PartialEq, Eq)]
    pub enum Fault {
        None,
        /// Negates the gate gradient of the residual gated fusion.
        FlipFuseGateGrad,
    }

    thread_local! {
        static ACTIVE: Cell<Fault> = const { Cell::new(Fault::None) };
    }

    pub fn set(f: Fault) {
        ACTIVE.with(|a| a.set(f));
    }

    pub fn active() -> Fault {
        ACTIVE.with(|a| a.get())
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Reshape {
        x: usize,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Conv2d {
        x: usize,
        k: usize,
        b: Option<usize>,
        geom: conv::Geometry,
        cols: Vec<T>,
    },
    Pool {
        x: usize,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    Add {
        a: usize,
        b: usize,
        bc: Broadcast,
    },
    Mul {
        a: usize,
        b: usize,
        bc: Broadcast,
    },
    Relu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Scale {
        x: usize,
        factor: T,
    },
    Sum {
        x: usize,
    },
    Concat {
        xs: Vec<usize>,
        axis: usize,
    },
    Dropout {
        x: usize,
        mask: Vec<T>,
    },
    SoftmaxCe {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Fuse {
        dst: usize,
        gate: usize,
        src: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Reshape { .. } => "reshape",
            Op::MatMul { .. } => "matmul",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::Pool { mode, .. } => mode.name(),
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Concat { .. } => "concat",
            Op::Dropout { .. } => "dropout",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::Fuse { .. } => "gated_fuse",
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    differentiated: Cell<bool>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Real> Copy for Var<'_, T> {}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            differentiated: Cell::new(false),
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Records a constant input; no gradient is tracked for it.
    pub fn constant(&self, value: Tensor<T>) -> Result<Var<'_, T>> {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable input whose gradient [`Gradients::get`] reports.
    pub fn param(&self, value: Tensor<T>) -> Result<Var<'_, T>> {
        self.push(value, Op::Leaf, true)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Names of the operations recorded so far, in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op.name()).collect()
    }

    /// Hash of every piecewise-linear branch decision on the tape: the sign
    /// pattern of each ReLU input and the winner of each max pool. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01B3;
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        let mut feed = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(PRIME);
        };
        let nodes = self.nodes.borrow();
        for node in nodes.iter() {
            match &node.op {
                Op::Relu { x } => {
                    for v in nodes[*x].value.data() {
                        feed((*v > T::zero()) as u64);
                    }
                }
                Op::Pool { argmax, .. } => {
                    for &i in argmax {
                        feed(i as u64);
                    }
                }
                _ => {}
            }
        }
        h
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Usage("loss was recorded on a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        let seed_shape = nodes[loss.id].value.shape().to_vec();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {seed_shape:?}"
            )));
        }
        if self.differentiated.replace(true) {
            return Err(Error::Usage(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let keep: Vec<bool> = nodes
            .iter()
            .map(|n| matches!(n.op, Op::Leaf) && n.requires_grad)
            .collect();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(seed_shape));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contributions = ops::backward_op(&nodes, id, &g)?;
            for (input, grad) in contributions {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            }
            if keep[id] {
                grads[id] = Some(g);
            }
        }
        for (id, g) in grads.iter_mut().enumerate() {
            if !keep[id] {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients of a scalar loss with respect to every parameter leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`; parameters the loss does not depend on get zeros.
    pub fn get(&self, v: Var<'_, T>) -> Tensor<T> {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.id].clone()),
        }
    }

    /// Moves the gradient of `v` out of the table.
    pub fn take(&mut self, v: Var<'_, T>) -> Tensor<T> {
        self.grads[v.id]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.id].clone()))
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn same_tape(&self, other: &Var<'_, T>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Usage(format!("{op}: operands recorded on different tapes")))
        }
    }
}
