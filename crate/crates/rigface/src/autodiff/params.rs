//! Named parameter tensors, their gradients, and the Adam optimizer.

use indexmap::IndexMap;
use ndarray::ArrayD;

use super::{Gradients, Tape, Var};

pub type Arr = ArrayD<f64>;

/// Ordered map of named parameter tensors. Iteration order is insertion
/// order, which keeps checkpoints and updates deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: IndexMap<String, Arr>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Arr) {
        let name = name.into();
        debug_assert!(!self.entries.contains_key(&name), "duplicate parameter {name}");
        self.entries.insert(name, value);
    }

    pub fn get(&self, name: &str) -> Option<&Arr> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Arr> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arr)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|a| a.iter().all(|v| v.is_finite()))
    }
}

/// Binds store parameters to tape leaves on demand, remembering which `Var`
/// belongs to which name so gradients can be harvested after `backward`.
pub struct BoundParams<'s> {
    store: &'s ParamStore,
    map: IndexMap<String, Var>,
}

impl<'s> BoundParams<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        BoundParams { store, map: IndexMap::new() }
    }

    /// Leaf `Var` for a named parameter (created on first use).
    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Var {
        if let Some(v) = self.map.get(name) {
            return *v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
            .clone();
        let v = tape.leaf(value);
        self.map.insert(name.to_string(), v);
        v
    }

    /// Collect this pass's parameter gradients by name.
    pub fn harvest(&self, grads: &Gradients) -> IndexMap<String, Arr> {
        let mut out = IndexMap::new();
        for (name, var) in &self.map {
            if let Some(g) = grads.get(*var) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

/// Adam state: first and second moments per parameter plus the step count.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub m: IndexMap<String, Arr>,
    pub v: IndexMap<String, Arr>,
    pub steps: u64,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: IndexMap::new(),
            v: IndexMap::new(),
            steps: 0,
        }
    }

    /// One update over every parameter that received a gradient. Parameters
    /// without a gradient this step keep their moments untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &IndexMap<String, Arr>) {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter `{name}`"));
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Arr::zeros(g.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= self.learning_rate * mh / (vh.sqrt() + self.epsilon);
                });
        }
    }
}

/// Global L2 norm of a gradient collection.
pub fn global_norm(grads: &IndexMap<String, Arr>) -> f64 {
    grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scale all gradients so the global norm does not exceed `max_norm`.
pub fn clip_global_norm(grads: &mut IndexMap<String, Arr>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}
