//! Named parameter storage, initialization, and per-forward parameter binding.

use std::collections::HashMap;

use rand_distr::{Distribution, Normal};

use crate::autograd::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer and counted as a model parameter.
    Learnable,
    /// Batch-norm running estimate; saved in checkpoints, never optimized.
    RunningStat,
}

impl ParamKind {
    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Learnable => "param",
            ParamKind::RunningStat => "stat",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn declare(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::arg(format!("invalid parameter name {name:?}")));
        }
        if self.by_name.contains_key(&name) {
            return Err(Error::arg(format!("parameter {name} declared twice")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, kind, value });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn learnable_ids(&self) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.entries[id.0].kind == ParamKind::Learnable)
            .collect()
    }

    /// Number of learnable scalars; running statistics are excluded.
    pub fn count_learnable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Learnable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Overwrites every value from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::shape("parameter stores have different layouts"));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::shape(format!("parameter {} does not match {}", dst.name, src.name)));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

/// Declares parameters with deterministic fan-in scaled initialization.
///
/// Every tensor draws from its own stream keyed by `(seed, name)`, so a
/// parameter's initial value does not depend on which other modules exist.
pub struct ParamBuilder<'a, T> {
    store: &'a mut ParamStore<T>,
    seed: u64,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        ParamBuilder { store, seed }
    }

    /// Kaiming-normal weights: std = sqrt(2 / fan_in).
    pub fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| Error::arg(e.to_string()))?;
        let mut r = rng::stream(self.seed, name, &[]);
        let t = Tensor::from_fn(shape, |_| T::cast(normal.sample(&mut r)))?;
        self.store.declare(name, ParamKind::Learnable, t)
    }

    pub fn filled(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.declare(name, ParamKind::Learnable, Tensor::full(shape, T::cast(value))?)
    }

    pub fn running(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.declare(name, ParamKind::RunningStat, Tensor::full(shape, T::cast(value))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates recorded, gradients tracked.
    Train,
    /// Running statistics, parameters bound as constants.
    Eval,
}

struct StatUpdate<T> {
    mean: ParamId,
    var: ParamId,
    stats: BatchStats<T>,
}

/// One forward pass over a [`ParamStore`]: parameters are bound into the
/// graph on first use and batch-norm statistic updates are deferred until
/// [`Bindings::apply_running_stats`].
pub struct Session<'a, T: Scalar> {
    pub graph: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    mode: Mode,
    bound: Vec<Option<Var>>,
    updates: Vec<StatUpdate<T>>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, store: &'a ParamStore<T>, mode: Mode) -> Self {
        Session {
            graph,
            store,
            mode,
            bound: vec![None; store.len()],
            updates: Vec::new(),
        }
    }

    /// A training session whose learnable parameters are already graph leaves,
    /// given in `store.learnable_ids()` order. Used by gradient checks that
    /// perturb parameters directly.
    pub fn with_bound(graph: &'a mut Graph<T>, store: &'a ParamStore<T>, vars: &[Var]) -> Result<Self> {
        let ids = store.learnable_ids();
        if ids.len() != vars.len() {
            return Err(Error::arg(format!(
                "{} learnable parameters but {} bound vars",
                ids.len(),
                vars.len()
            )));
        }
        let mut s = Self::new(graph, store, Mode::Train);
        for (id, &v) in ids.into_iter().zip(vars) {
            if graph_shape_mismatch(s.graph, v, store.get(id)) {
                return Err(Error::shape(format!("bound var for {} has the wrong shape", store.entry(id).name)));
            }
            s.bound[id.0] = Some(v);
        }
        Ok(s)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = match self.mode {
            Mode::Train => self.graph.param(value),
            Mode::Eval => self.graph.constant(value),
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn stored(&self, id: ParamId) -> &'a Tensor<T> {
        self.store.get(id)
    }

    pub fn record_stats(&mut self, mean: ParamId, var: ParamId, stats: BatchStats<T>) {
        self.updates.push(StatUpdate { mean, var, stats });
    }

    pub fn finish(self) -> Bindings<T> {
        Bindings {
            bound: self.bound,
            updates: self.updates,
        }
    }
}

fn graph_shape_mismatch<T: Scalar>(g: &Graph<T>, v: Var, t: &Tensor<T>) -> bool {
    g.value(v).shape() != t.shape()
}

/// What a finished [`Session`] leaves behind.
pub struct Bindings<T> {
    bound: Vec<Option<Var>>,
    updates: Vec<StatUpdate<T>>,
}

impl<T: Scalar> Bindings<T> {
    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    /// Gradient for each learnable parameter (zeros where a parameter was unused).
    pub fn learnable_grads(&self, graph: &Graph<T>, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .learnable_ids()
            .into_iter()
            .map(|id| {
                self.bound[id.0]
                    .and_then(|v| graph.grad(v).cloned())
                    .unwrap_or_else(|| store.get(id).zeros_like())
            })
            .collect()
    }

    /// Exponential moving average of batch statistics into the running
    /// estimates; variance uses the unbiased batch estimate.
    pub fn apply_running_stats(&self, store: &mut ParamStore<T>, momentum: f64) {
        let m = T::cast(momentum);
        let keep = T::one() - m;
        for u in &self.updates {
            let correction = if u.stats.count > 1 {
                T::cast(u.stats.count as f64 / (u.stats.count - 1) as f64)
            } else {
                T::one()
            };
            for (r, &b) in store.get_mut(u.mean).data_mut().iter_mut().zip(&u.stats.mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in store.get_mut(u.var).data_mut().iter_mut().zip(&u.stats.var) {
                *r = keep * *r + m * b * correction;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.declare("a", ParamKind::Learnable, Tensor::ones(&[2]).unwrap()).unwrap();
        assert!(s.declare("a", ParamKind::Learnable, Tensor::ones(&[2]).unwrap()).is_err());
        assert!(s.declare("has space", ParamKind::Learnable, Tensor::ones(&[2]).unwrap()).is_err());
    }

    #[test]
    fn init_independent_of_declaration_order() {
        let mut a = ParamStore::<f32>::new();
        let mut b = ParamStore::<f32>::new();
        {
            let mut pa = ParamBuilder::new(&mut a, 3);
            pa.kaiming("x", &[4, 4], 4).unwrap();
            pa.kaiming("y", &[8], 8).unwrap();
        }
        {
            let mut pb = ParamBuilder::new(&mut b, 3);
            pb.kaiming("y", &[8], 8).unwrap();
            pb.kaiming("x", &[4, 4], 4).unwrap();
        }
        assert_eq!(a.get(a.lookup("x").unwrap()), b.get(b.lookup("x").unwrap()));
    }

    #[test]
    fn counts_only_learnables() {
        let mut s = ParamStore::<f32>::new();
        let mut b = ParamBuilder::new(&mut s, 0);
        b.filled("w", &[1, 1, 1, 1], 0.0).unwrap();
        b.filled("b", &[1], 0.0).unwrap();
        b.running("m", &[1], 0.0).unwrap();
        assert_eq!(s.count_learnable(), 2);
    }
}
