//! Define-by-run reverse-mode tape.
//!
//! Every operation appends one node holding its output value and the rule that
//! maps the output gradient back to its inputs. Inputs always precede the node
//! that consumes them, so reverse recording order is a valid backward schedule.

use crate::autodiff::ops::Op;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub requires_grad: bool,
    pub op: Op,
}

#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_node(value, true, Op::Leaf)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, false, Op::Leaf)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        // Non-differentiable results keep no saved state.
        let op = if requires_grad { op } else { Op::Leaf };
        self.push_node(value, requires_grad, op)
    }

    fn push_node(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Back-propagates from a scalar `loss`.
    ///
    /// Gradients are recomputed from scratch on each call and then added to
    /// whatever each node already holds, so calling `backward` twice without
    /// [`zero_grad`](Self::zero_grad) doubles every stored gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument("backward on an empty tape".into()));
        }
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }

        let needs: Vec<bool> = self.nodes[..=loss.0].iter().map(|n| n.requires_grad).collect();
        let mut acc = GradAccum { grads: vec![None; loss.0 + 1], needs: &needs };
        acc.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gout) = acc.grads[i].take() else { continue };
            let node = &self.nodes[i];
            node.op.backward(&node.value, &gout, &self.nodes, &mut acc);
            acc.grads[i] = Some(gout);
        }

        for (node, fresh) in self.nodes.iter_mut().zip(acc.grads) {
            let Some(fresh) = fresh else { continue };
            match &mut node.grad {
                Some(g) => g.add_assign(&fresh),
                None => {
                    node.grad = Some(Tensor::new(node.value.shape().to_vec(), fresh).expect("grad shape"))
                }
            }
        }
        Ok(())
    }
}

/// Scratch gradient buffers for one backward sweep.
pub(crate) struct GradAccum<'a> {
    grads: Vec<Option<Vec<f64>>>,
    needs: &'a [bool],
}

impl GradAccum<'_> {
    pub fn wants(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    pub fn add(&mut self, v: Var, g: &[f64]) {
        if !self.needs[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    /// Lets `f` write (`beta = 0`) or add (`beta = 1`) a gradient of `len`
    /// elements straight into the slot for `v`.
    pub fn accumulate_with(&mut self, v: Var, len: usize, f: impl FnOnce(&mut [f64], f64)) {
        if !self.needs[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => f(acc, 1.0),
            slot @ None => {
                let mut buf = vec![0.0; len];
                f(&mut buf, 0.0);
                *slot = Some(buf);
            }
        }
    }

    pub fn add_owned(&mut self, v: Var, g: Vec<f64>) {
        if !self.needs[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}
