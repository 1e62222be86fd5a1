//! Named parameter registry and per-forward binding into a graph.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::moe::GateRecord;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Optimizer partition of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Pretrained-trunk weights; never updated.
    Frozen,
    /// Injected low-rank adapters, experts and gates.
    Adapter,
    /// Fusion, decoder and memory parameters.
    Other,
}

impl ParamGroup {
    pub fn is_trainable(self) -> bool {
        self != ParamGroup::Frozen
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Frozen => "frozen",
            ParamGroup::Adapter => "adapter",
            ParamGroup::Other => "other",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub group: ParamGroup,
}

/// Every parameter of a model, addressed by [`ParamId`] or unique name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
    by_name: HashMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a parameter. Names are unique; registering one twice is a
    /// construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>, group: ParamGroup) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, group });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        let slot = &mut self.params[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::shape("ParamStore::set", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group.is_trainable()).map(|(id, _)| id).collect()
    }

    /// Scalar count of all parameters in `group`.
    pub fn count(&self, group: ParamGroup) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Same registry in another precision; ids are preserved.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    group: p.group,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// One forward pass: a graph, the parameters bound into it, and the gate
/// records emitted along the way.
pub struct Session<'g, S: Scalar> {
    graph: &'g Graph<S>,
    store: &'g ParamStore<S>,
    bound: RefCell<HashMap<ParamId, Var<'g, S>>>,
    gates: RefCell<Vec<GateRecord<'g, S>>>,
}

impl<'g, S: Scalar> Session<'g, S> {
    pub fn new(graph: &'g Graph<S>, store: &'g ParamStore<S>) -> Self {
        Self {
            graph,
            store,
            bound: RefCell::new(HashMap::new()),
            gates: RefCell::new(Vec::new()),
        }
    }

    pub fn graph(&self) -> &'g Graph<S> {
        self.graph
    }

    pub fn store(&self) -> &'g ParamStore<S> {
        self.store
    }

    /// The graph leaf for a parameter. A parameter used several times in
    /// one pass maps to a single leaf, so shared weights receive the sum of
    /// their gradients.
    pub fn param(&self, id: ParamId) -> Var<'g, S> {
        if let Some(v) = self.bound.borrow().get(&id) {
            return *v;
        }
        let p = self.store.get(id);
        let v = self.graph.leaf(p.value.clone(), p.group.is_trainable());
        self.bound.borrow_mut().insert(id, v);
        v
    }

    pub fn constant(&self, t: Tensor<S>) -> Var<'g, S> {
        self.graph.constant(t)
    }

    pub(crate) fn record_gate(&self, record: GateRecord<'g, S>) {
        self.gates.borrow_mut().push(record);
    }

    pub fn gate_records(&self) -> Vec<GateRecord<'g, S>> {
        self.gates.borrow().clone()
    }

    /// Gradients of every bound trainable parameter after a backward pass,
    /// in id order.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<S>)> {
        let mut out: Vec<_> = self
            .bound
            .borrow()
            .iter()
            .filter_map(|(&id, v)| v.grad().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
