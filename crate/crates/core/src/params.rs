//! Named trainable parameters shared by every model.
//!
//! A [`ParamSet`] owns the master f64 tensors. Each training step binds all
//! parameters onto a fresh tape ([`BoundParams`]), runs the forward and
//! backward passes, and collects per-parameter gradients into a
//! [`GradStore`] for the optimizer.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, NodeId, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Scalars grouped by name prefix (text before the first `.`).
    pub fn scalars_by_group(&self) -> Vec<(String, usize)> {
        let mut groups: std::collections::BTreeMap<String, usize> = Default::default();
        for (name, value) in self.names.iter().zip(&self.values) {
            let group = name.split('.').next().unwrap_or(name).to_string();
            *groups.entry(group).or_default() += value.len();
        }
        groups.into_iter().collect()
    }

    /// Sum of squared parameter values, the L2 penalty before weighting.
    pub fn sq_norm(&self) -> f64 {
        self.values.iter().map(Tensor::sq_norm).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        ParamSet::new()
    }
}

/// Leaf node per parameter on one tape, in parameter order.
pub struct BoundParams {
    leaves: Vec<NodeId>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &ParamSet) -> Self {
        BoundParams {
            leaves: params.values.iter().map(|v| tape.leaf(v.clone())).collect(),
        }
    }

    pub fn leaf(&self, id: ParamId) -> NodeId {
        self.leaves[id.0]
    }
}

/// Per-parameter gradient accumulator aligned with a [`ParamSet`].
pub struct GradStore {
    grads: Vec<Tensor>,
}

impl GradStore {
    pub fn zeros(params: &ParamSet) -> Self {
        GradStore {
            grads: params
                .values
                .iter()
                .map(|v| Tensor::zeros(v.rows(), v.cols()))
                .collect(),
        }
    }

    /// Pull every parameter's gradient out of a backward sweep.
    pub fn collect(params: &ParamSet, bound: &BoundParams, gradients: &Gradients) -> Self {
        let mut store = GradStore::zeros(params);
        for id in params.ids() {
            store.grads[id.0] = gradients.wrt(bound.leaf(id));
        }
        store
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    /// Add the gradient of `lambda * ||theta||^2`, which is `2 lambda theta`.
    pub fn add_l2(&mut self, params: &ParamSet, lambda: f64) {
        if lambda == 0.0 {
            return;
        }
        for (g, v) in self.grads.iter_mut().zip(&params.values) {
            for (gx, vx) in g.data_mut().iter_mut().zip(v.data()) {
                *gx += 2.0 * lambda * vx;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }
}

/// Uniform Xavier/Glorot initialization.
pub fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(rows, cols, data)
}

/// Small uniform initialization for embedding tables.
pub fn embedding_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-0.1..0.1)).collect();
    Tensor::from_vec(rows, cols, data)
}
