//! Recording tape and reverse sweep.
//!
//! A [`Graph`] owns every value produced during a forward pass. Operations
//! append nodes in execution order, so the node list is always
//! topologically sorted and the reverse sweep is a single backwards scan.
//! Handles into the graph are [`Var`]s, which are `Copy` and borrow the
//! graph for its lifetime.

use std::cell::{Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Everything a backward rule may look at.
pub struct BackwardCtx<'a, S> {
    pub inputs: &'a [&'a [S]],
    pub input_shapes: &'a [&'a [usize]],
    pub output: &'a [S],
    pub output_shape: &'a [usize],
    /// Upstream gradient, same layout as `output`.
    pub grad: &'a [S],
    /// Whether input `i` needs a gradient. Rules may return `None` for
    /// inputs that don't.
    pub needs: &'a [bool],
}

/// Maps an upstream gradient to one contribution per input.
pub type BackwardFn<S> = Box<dyn Fn(&BackwardCtx<'_, S>) -> Vec<Option<Vec<S>>>>;

struct Node<S> {
    op: &'static str,
    shape: Vec<usize>,
    value: Vec<S>,
    inputs: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<S>>,
}

/// The computation tape. Confined to one thread.
pub struct Graph<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    leaf_grads: RefCell<Vec<Option<Vec<S>>>>,
    nonfinite: RefCell<Option<&'static str>>,
}

/// A handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, S: Scalar> {
    graph: &'g Graph<S>,
    id: usize,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            leaf_grads: RefCell::new(Vec::new()),
            nonfinite: RefCell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, node: Node<S>) -> Var<'_, S> {
        debug_assert_eq!(numel(&node.shape), node.value.len());
        if self.nonfinite.borrow().is_none() && node.value.iter().any(|v| !v.is_finite()) {
            *self.nonfinite.borrow_mut() = Some(node.op);
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(node);
        Var { graph: self, id }
    }

    /// A leaf node. Leaves with `requires_grad` collect gradients on
    /// [`Graph::backward`].
    pub fn leaf(&self, tensor: Tensor<S>, requires_grad: bool) -> Var<'_, S> {
        let shape = tensor.shape().to_vec();
        self.push(Node {
            op: "leaf",
            shape,
            value: tensor.into_data(),
            inputs: Vec::new(),
            requires_grad,
            backward: None,
        })
    }

    pub fn constant(&self, tensor: Tensor<S>) -> Var<'_, S> {
        self.leaf(tensor, false)
    }

    pub fn variable(&self, tensor: Tensor<S>) -> Var<'_, S> {
        self.leaf(tensor, true)
    }

    pub fn scalar(&self, value: S) -> Var<'_, S> {
        self.constant(Tensor::scalar(value))
    }

    /// Records an operation whose value the caller already computed.
    ///
    /// This is the extension point every built-in op goes through; it is
    /// public so downstream code can register its own differentiable ops.
    pub fn apply<'g>(
        &'g self,
        op: &'static str,
        inputs: &[Var<'g, S>],
        shape: Vec<usize>,
        value: Vec<S>,
        backward: BackwardFn<S>,
    ) -> Var<'g, S> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        self.push(Node {
            op,
            shape,
            value,
            inputs: inputs.iter().map(|v| v.id).collect(),
            requires_grad,
            backward: if requires_grad { Some(backward) } else { None },
        })
    }

    /// Name of the first op that produced a NaN or infinity, if any.
    pub fn first_nonfinite(&self) -> Option<&'static str> {
        *self.nonfinite.borrow()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.first_nonfinite() {
            Some(op) => Err(Error::NonFinite(op.to_string())),
            None => Ok(()),
        }
    }

    /// Reverse sweep from a scalar `loss`, adding `∂loss/∂leaf` into the
    /// gradient of every reachable leaf that requires one. Calling it twice
    /// accumulates.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<()> {
        self.check_finite()?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![S::one()]);

        let mut leaf_grads = self.leaf_grads.borrow_mut();
        if leaf_grads.len() < nodes.len() {
            leaf_grads.resize_with(nodes.len(), || None);
        }

        for id in (0..=loss.id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = &node.backward else {
                match &mut leaf_grads[id] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, &g)| *a = *a + g),
                    slot => *slot = Some(grad),
                }
                continue;
            };
            let inputs: Vec<&[S]> = node.inputs.iter().map(|&i| nodes[i].value.as_slice()).collect();
            let shapes: Vec<&[usize]> = node.inputs.iter().map(|&i| nodes[i].shape.as_slice()).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let ctx = BackwardCtx {
                inputs: &inputs,
                input_shapes: &shapes,
                output: &node.value,
                output_shape: &node.shape,
                grad: &grad,
                needs: &needs,
            };
            let contributions = backward(&ctx);
            debug_assert_eq!(contributions.len(), node.inputs.len(), "op {}", node.op);
            for (&input, contribution) in node.inputs.iter().zip(contributions) {
                let Some(c) = contribution else { continue };
                if !nodes[input].requires_grad {
                    continue;
                }
                debug_assert_eq!(c.len(), nodes[input].value.len(), "op {}", node.op);
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &g)| *a = *a + g),
                    slot => *slot = Some(c),
                }
            }
        }
        drop(leaf_grads);
        let finite = self
            .leaf_grads
            .borrow()
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()));
        if finite {
            Ok(())
        } else {
            Err(Error::NonFinite("backward".into()))
        }
    }

    /// Accumulated gradient of a leaf, if it received one.
    pub fn grad(&self, var: Var<'_, S>) -> Option<Tensor<S>> {
        let shape = self.nodes.borrow()[var.id].shape.clone();
        self.leaf_grads
            .borrow()
            .get(var.id)
            .and_then(|g| g.clone())
            .map(|g| Tensor::new(&shape, g).expect("gradient shape matches its leaf"))
    }

    pub fn zero_grad(&self) {
        self.leaf_grads.borrow_mut().clear();
    }
}

impl<'g, S: Scalar> Var<'g, S> {
    pub fn graph(&self) -> &'g Graph<S> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Borrowed view of the node value. Drop it before recording new ops.
    pub fn data(&self) -> Ref<'g, [S]> {
        Ref::map(self.graph.nodes.borrow(), |n| n[self.id].value.as_slice())
    }

    pub fn value(&self) -> Tensor<S> {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape matches its value")
    }

    /// First element; convenient for scalar losses.
    pub fn item(&self) -> S {
        self.graph.nodes.borrow()[self.id].value[0]
    }

    pub fn grad(&self) -> Option<Tensor<S>> {
        self.graph.grad(*self)
    }

    pub fn backward(&self) -> Result<()> {
        self.graph.backward(*self)
    }

    /// A new constant leaf with the same value; cuts gradient flow.
    pub fn detach(&self) -> Var<'g, S> {
        self.graph.constant(self.value())
    }
}

impl<S: Scalar> fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}
