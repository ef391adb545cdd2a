//! Reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every differentiable operation appends its output
//! node in creation order, and [`Graph::backward`] replays the recorded nodes
//! in exact reverse order, accumulating adjoints into parents. A graph is
//! never shared across concurrent passes; dropping (or clearing) it frees all
//! recorded nodes, so gradients from one tape cannot leak into the next.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};

use super::real::Real;
use super::tensor::Tensor;

pub(crate) struct Node<T: Real> {
    pub(super) value: Tensor<T>,
    pub(super) grad: RefCell<Option<Vec<T>>>,
    pub(super) needs_grad: bool,
    /// Accumulates `upstream` into the parents' grad cells. `None` for leaves.
    #[allow(clippy::type_complexity)]
    pub(super) back: Option<Box<dyn Fn(&[T])>>,
}

impl<T: Real> Node<T> {
    pub(super) fn accumulate(&self, upstream: &[T]) {
        if !self.needs_grad {
            return;
        }
        debug_assert_eq!(upstream.len(), self.value.numel());
        let mut slot = self.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, u) in acc.iter_mut().zip(upstream) {
                    *a = *a + *u;
                }
            }
            None => *slot = Some(upstream.to_vec()),
        }
    }
}

pub(super) struct GraphInner<T: Real> {
    pub(super) grad_enabled: bool,
    pub(super) tape: RefCell<Vec<Rc<Node<T>>>>,
    pub(super) param_leaves: RefCell<HashMap<u64, Var<T>>>,
}

/// Handle to a computation tape. Cheap to clone; not thread-safe by design.
pub struct Graph<T: Real> {
    pub(super) inner: Rc<GraphInner<T>>,
}

impl<T: Real> Clone for Graph<T> {
    fn clone(&self) -> Self {
        Graph { inner: Rc::clone(&self.inner) }
    }
}

/// A value in a graph, with enough structure to replay adjoints.
pub struct Var<T: Real> {
    pub(super) node: Rc<Node<T>>,
    pub(super) graph: Rc<GraphInner<T>>,
}

impl<T: Real> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var { node: Rc::clone(&self.node), graph: Rc::clone(&self.graph) }
    }
}

impl<T: Real> Graph<T> {
    /// A recording graph: operations on gradient-carrying inputs are taped.
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(GraphInner {
                grad_enabled: true,
                tape: RefCell::new(Vec::new()),
                param_leaves: RefCell::new(HashMap::new()),
            }),
        }
    }

    /// A non-recording graph for pure inference; nothing is taped.
    pub fn no_grad() -> Self {
        Graph {
            inner: Rc::new(GraphInner {
                grad_enabled: false,
                tape: RefCell::new(Vec::new()),
                param_leaves: RefCell::new(HashMap::new()),
            }),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.inner.grad_enabled
    }

    /// Number of recorded (replayable) nodes.
    pub fn recorded(&self) -> usize {
        self.inner.tape.borrow().len()
    }

    /// Drop all recorded nodes and cached parameter leaves.
    pub fn clear(&self) {
        self.inner.tape.borrow_mut().clear();
        self.inner.param_leaves.borrow_mut().clear();
    }

    pub(super) fn make(&self, value: Tensor<T>, needs_grad: bool, back: Option<Box<dyn Fn(&[T])>>) -> Var<T> {
        let needs = needs_grad && self.inner.grad_enabled;
        let node = Rc::new(Node {
            value,
            grad: RefCell::new(None),
            needs_grad: needs,
            back: if needs { back } else { None },
        });
        if needs {
            self.inner.tape.borrow_mut().push(Rc::clone(&node));
        }
        Var { node, graph: Rc::clone(&self.inner) }
    }

    /// A leaf that participates in differentiation.
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        self.make(value, true, None)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        self.make(value, false, None)
    }

    pub fn scalar(&self, v: T) -> Var<T> {
        self.constant(Tensor::scalar(v))
    }

    /// Cached leaf for a named parameter: repeated calls within one graph
    /// return the same node so gradient contributions accumulate in one place.
    pub fn param_leaf(&self, id: u64, value: &Tensor<T>) -> Var<T> {
        if let Some(v) = self.inner.param_leaves.borrow().get(&id) {
            return v.clone();
        }
        let var = self.make(value.clone(), value.requires_grad(), None);
        self.inner.param_leaves.borrow_mut().insert(id, var.clone());
        var
    }

    /// Pre-bind a parameter id to an existing var, so a later `param_leaf`
    /// call for that id resolves to it. Lets verification code route an
    /// arbitrary leaf (e.g. a finite-difference probe) into a model forward.
    pub fn bind_param(&self, id: u64, var: Var<T>) {
        self.inner.param_leaves.borrow_mut().insert(id, var);
    }

    /// Gradient accumulated for a parameter leaf, if any flowed.
    pub fn param_grad(&self, id: u64) -> Option<Vec<T>> {
        let leaves = self.inner.param_leaves.borrow();
        let var = leaves.get(&id)?;
        let grad = var.node.grad.borrow().clone();
        grad
    }

    /// Replay the tape in reverse from a scalar loss.
    pub fn backward(&self, loss: &Var<T>) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::numeric(format!(
                "backward requires a scalar, got shape {:?}",
                loss.value().shape()
            )));
        }
        if !loss.value().is_finite() {
            return Err(Error::numeric("non-finite loss value in backward"));
        }
        if !loss.node.needs_grad {
            return Err(Error::numeric("loss does not depend on any gradient-enabled input"));
        }
        *loss.node.grad.borrow_mut() = Some(vec![T::one()]);
        let tape = self.inner.tape.borrow();
        for node in tape.iter().rev() {
            let upstream = if node.back.is_some() {
                node.grad.borrow_mut().take()
            } else {
                None
            };
            if let (Some(g), Some(back)) = (upstream, node.back.as_ref()) {
                back(&g);
            }
        }
        Ok(())
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Graph::new()
    }
}

impl<T: Real> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.node.value
    }

    pub fn shape(&self) -> &[usize] {
        self.node.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.node.value.numel()
    }

    pub fn data(&self) -> &[T] {
        self.node.value.data()
    }

    pub fn item(&self) -> T {
        self.node.value.item()
    }

    /// Gradient accumulated on this node (populated by `Graph::backward`).
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub fn grad_tensor(&self) -> Option<Tensor<T>> {
        self.grad().map(|g| Tensor::raw(self.shape().to_vec(), g))
    }

    /// A copy of this value that is cut off from the tape.
    pub fn detach(&self) -> Var<T> {
        let g = Graph { inner: Rc::clone(&self.graph) };
        g.constant(self.node.value.clone())
    }

    pub(super) fn graph_handle(&self) -> Graph<T> {
        Graph { inner: Rc::clone(&self.graph) }
    }

    pub(super) fn same_graph(&self, other: &Var<T>) -> bool {
        Rc::ptr_eq(&self.graph, &other.graph)
    }
}

/// Gradients of a scalar-valued function at the given inputs, by reverse-mode
/// differentiation. The function must produce a single finite scalar; every
/// input receives a same-shaped gradient (zero where no gradient flows).
pub fn reverse_gradient<T: Real>(
    f: impl Fn(&Graph<T>, &[Var<T>]) -> Var<T>,
    inputs: &[Tensor<T>],
) -> Result<Vec<Tensor<T>>> {
    let graph = Graph::new();
    let vars: Vec<Var<T>> = inputs.iter().map(|t| graph.leaf(t.clone())).collect();
    let out = f(&graph, &vars);
    if out.numel() != 1 {
        return Err(Error::numeric(format!(
            "reverse_gradient requires a scalar-valued function, got shape {:?}",
            out.shape()
        )));
    }
    if !out.value().is_finite() {
        return Err(Error::numeric("non-finite value encountered during forward"));
    }
    graph.backward(&out)?;
    let mut grads = Vec::with_capacity(vars.len());
    for (var, input) in vars.iter().zip(inputs) {
        let g = var
            .grad_tensor()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        if !g.is_finite() {
            return Err(Error::numeric("non-finite value encountered during backward"));
        }
        grads.push(g);
    }
    Ok(grads)
}
