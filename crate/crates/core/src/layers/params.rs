//! Named parameter storage and the per-forward binding of parameters to a tape.

use std::cell::RefCell;

use crate::autodiff::{Gradients, Tape, Var};
use crate::tensor::Tensor;

use super::ops::BatchStats;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Flat, insertion-ordered parameter table keyed by hierarchical names.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(id, _)| id)
            .collect()
    }

    /// Number of scalar trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn apply_stat_updates(&mut self, updates: Vec<StatUpdate>) {
        for u in updates {
            let n = u.stats.count as f64;
            let unbiased = if u.stats.count > 1 { n / (n - 1.0) } else { 1.0 };
            let m = u.momentum;
            for (r, b) in self.get_mut(u.running_mean).data_mut().iter_mut().zip(&u.stats.mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in self.get_mut(u.running_var).data_mut().iter_mut().zip(&u.stats.var) {
                *r = (1.0 - m) * *r + m * b * unbiased;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pending running-statistics update produced by a train-mode forward.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub stats: BatchStats,
}

/// One forward pass: trainable parameters bound as tape leaves.
pub struct Forward<'a> {
    pub tape: &'a Tape,
    store: &'a ParamStore,
    vars: Vec<Var>,
    mode: Mode,
    updates: RefCell<Vec<StatUpdate>>,
}

impl<'a> Forward<'a> {
    pub fn new(tape: &'a Tape, store: &'a ParamStore, mode: Mode) -> Self {
        let vars = store
            .entries
            .iter()
            .map(|e| match e.kind {
                ParamKind::Trainable => tape.leaf(e.value.clone()),
                ParamKind::Buffer => Var::constant(e.value.clone()),
            })
            .collect();
        Forward {
            tape,
            store,
            vars,
            mode,
            updates: RefCell::new(Vec::new()),
        }
    }

    /// Like [`Forward::new`], but binds the given parameters to existing vars.
    pub fn with_vars(
        tape: &'a Tape,
        store: &'a ParamStore,
        mode: Mode,
        bound: impl IntoIterator<Item = (ParamId, Var)>,
    ) -> Self {
        let mut fw = Forward::new(tape, store, mode);
        for (id, v) in bound {
            fw.vars[id.0] = v;
        }
        fw
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        self.store.get(id)
    }

    pub(crate) fn push_update(&self, u: StatUpdate) {
        self.updates.borrow_mut().push(u);
    }

    /// Gradients of every trainable parameter, zero where unreachable.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.store
            .trainable_ids()
            .into_iter()
            .map(|id| (id, grads.wrt(&self.vars[id.0])))
            .collect()
    }

    pub fn into_updates(self) -> Vec<StatUpdate> {
        self.updates.into_inner()
    }
}
