//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape rebuilt for every training step. Operations append a
//! node holding the forward value and a backward rule; [`Graph::backward`]
//! walks the tape in reverse creation order, which is a valid reverse
//! topological order because nodes can only reference earlier nodes.
//!
//! Trainable state lives in a [`ParamSet`]. Binding a parameter into a graph
//! shares its value (no copy); after `backward`, [`ParamSet::accumulate`] adds
//! the gradients into the set's accumulators, so repeated backward passes add
//! up until [`ParamSet::zero_grad`].
//!
//! Any NaN or infinity produced by an operation aborts with
//! [`AutogradError::NonFinite`] naming the operation.

mod gradcheck;
mod ops;

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use thiserror::Error;

use crate::tensor::Tensor;

pub use gradcheck::{check_gradients, check_gradients_with, GradcheckReport, DEFAULT_STEP, REL_ERROR_FLOOR};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutogradError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range for {bound}")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, AutogradError>;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule: receives the output gradient and which inputs need a
/// gradient; returns one optional gradient per input.
pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    op: &'static str,
    value: Rc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<ParamId, Var>>,
    grad_enabled: bool,
    fault: Option<String>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
            grad_enabled: true,
            fault: None,
        }
    }

    /// A graph that records no backward rules; for evaluation and inference.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    /// Test fixture: corrupts the backward rule of every node whose operation
    /// is named `op`, so verification tooling can be shown to catch it.
    pub fn with_fault(mut self, op: impl Into<String>) -> Self {
        self.fault = Some(op.into());
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_leaf("constant", Rc::new(value), false, None)
    }

    /// A leaf that receives gradients (when the graph records them).
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push_leaf("leaf", Rc::new(value), self.grad_enabled, None)
    }

    /// Binds a parameter. Binding the same id twice returns the same node.
    pub fn param(&self, set: &ParamSet, id: ParamId) -> Var {
        if let Some(v) = self.bound.borrow().get(&id) {
            return *v;
        }
        let p = &set.params[id.0];
        let v = self.push_leaf("param", Rc::clone(&p.value), self.grad_enabled && p.trainable, Some(id));
        self.bound.borrow_mut().insert(id, v);
        v
    }

    /// Routes later `param(set, id)` calls to `v` instead of the stored value,
    /// so gradients of a model can be taken with respect to arbitrary leaves.
    pub fn bind(&self, id: ParamId, v: Var) {
        self.bound.borrow_mut().insert(id, v);
    }

    fn push_leaf(&self, op: &'static str, value: Rc<Tensor>, requires_grad: bool, param: Option<ParamId>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value, parents: Vec::new(), backward: None, requires_grad, param });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Appends an operation node after checking its output for poison.
    pub(crate) fn push_op(
        &self,
        op: &'static str,
        value: Tensor,
        parents: &[Var],
        backward: BackwardFn,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutogradError::NonFinite { op });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.grad_enabled && parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            op,
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
            param: None,
        });
        Ok(Var(nodes.len() - 1))
    }

    /// Propagates d(loss)/d(node) back to every gradient-requiring leaf.
    /// Leaves the loss does not depend on get no entry, which
    /// [`Gradients::wrt`] reports as zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(AutogradError::NotScalar(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(loss_value.shape()));
        let mut leaves = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let Some(rule) = &node.backward else {
                if node.requires_grad {
                    leaves.insert(i, g);
                }
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let contributions = rule(&g, &needs);
            debug_assert_eq!(contributions.len(), node.parents.len(), "{} backward arity", node.op);
            let corrupt = self.fault.as_deref() == Some(node.op);
            for ((&p, c), need) in node.parents.iter().zip(contributions).zip(needs) {
                let Some(mut c) = c else { continue };
                if !need {
                    continue;
                }
                if corrupt {
                    c = c.map(|v| 1.5 * v + 1e-3);
                }
                if !c.is_finite() {
                    return Err(AutogradError::NonFinite { op: node.op });
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        let bindings = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|id| (id, i)))
            .collect();
        Ok(Gradients { leaves, bindings })
    }
}

/// Result of [`Graph::backward`]: gradients of every reached leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    bindings: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    /// Gradient with respect to `v`, zeros when `v` is disconnected from the loss.
    pub fn wrt(&self, g: &Graph, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&g.shape(v)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    name: String,
    value: Rc<Tensor>,
    grad: Tensor,
    trainable: bool,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    /// Buffers (e.g. running statistics) are stored but not trained.
    pub fn trainable(&self) -> bool {
        self.trainable
    }
}

/// Named, ordered collection of parameters and buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on duplicate names; names identify tensors in checkpoints.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value: Rc::new(value), grad, trainable });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    /// Mutable access to a value; copies first if a graph still shares it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(value.shape(), self.params[id.0].value.shape(), "set_value shape mismatch");
        self.params[id.0].value = Rc::new(value);
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    /// Mutable value and gradient together, for optimizers.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut Tensor, &Tensor) {
        let p = &mut self.params[id.0];
        (Rc::make_mut(&mut p.value), &p.grad)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad.fill(0.0));
    }

    /// Adds the gradients of every bound parameter into its accumulator.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for &(id, node) in &grads.bindings {
            if let Some(g) = grads.leaves.get(&node) {
                self.params[id.0].grad.add_assign(g);
            }
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn sum_of_squares_gives_2x() {
        let g = Graph::new();
        let x = g.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn disconnected_leaf_reports_zero() {
        let g = Graph::new();
        let x = g.leaf(Tensor::ones(&[2]));
        let y = g.leaf(Tensor::ones(&[4]));
        let loss = g.sum(x).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(y).is_none());
        assert_eq!(grads.wrt(&g, y), Tensor::zeros(&[4]));
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut set = ParamSet::new();
        let w = set.add("w", Tensor::new(&[2], vec![1.0, 3.0]), true);
        let g = Graph::new();
        let wv = g.param(&set, w);
        assert_eq!(g.param(&set, w), wv);
        let sq = g.mul(wv, wv).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        set.accumulate(&grads);
        let grads = g.backward(loss).unwrap();
        set.accumulate(&grads);
        assert_eq!(set.grad(w).data(), &[4.0, 12.0]);
        set.zero_grad();
        assert_eq!(set.grad(w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let g = Graph::new();
        let x = g.leaf(Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(AutogradError::NotScalar(_))));
    }

    #[test]
    fn poison_aborts() {
        let g = Graph::new();
        let x = g.leaf(Tensor::new(&[1], vec![1000.0]));
        assert_eq!(g.exp(x).unwrap_err(), AutogradError::NonFinite { op: "exp" });
    }

    #[test]
    fn inference_graph_records_nothing() {
        let mut set = ParamSet::new();
        let w = set.add("w", Tensor::ones(&[2]), true);
        let g = Graph::inference();
        let wv = g.param(&set, w);
        let y = g.tanh(wv).unwrap();
        assert!(!g.requires_grad(y));
    }
}
