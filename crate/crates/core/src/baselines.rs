//! Baseline CTR models sharing the pairwise training interface:
//! a factorization machine and a plain feed-forward network over
//! concatenated field embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::data::{FeatureSchema, InteractionRecord};
use crate::error::Result;
use crate::model::PairwiseModel;
use crate::params::{xavier, BoundParams, ParamId, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FmConfig {
    /// Latent factor width per field value.
    pub latent_dim: usize,
    pub lambda: f64,
}

impl Default for FmConfig {
    fn default() -> Self {
        FmConfig { latent_dim: 8, lambda: 1e-5 }
    }
}

/// Second-order factorization machine: bias, per-value linear terms and the
/// sum-of-squares form of the pairwise latent interactions.
pub struct FmModel {
    cfg: FmConfig,
    schema: FeatureSchema,
    params: ParamSet,
    bias: ParamId,
    linear: Vec<ParamId>,
    latent: Vec<ParamId>,
}

impl FmModel {
    pub fn new(schema: &FeatureSchema, cfg: FmConfig, seed: u64) -> Result<Self> {
        schema.validate()?;
        if cfg.latent_dim == 0 {
            return Err(crate::Error::Config("fm config: latent_dim must be positive".into()));
        }
        if !(cfg.lambda >= 0.0) {
            return Err(crate::Error::Config(format!(
                "fm config: lambda {} must be non-negative",
                cfg.lambda
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let bias = params.add("fm.bias", Tensor::zeros(1, 1));
        let linear = schema
            .fields
            .iter()
            .map(|f| params.add(format!("fm.linear.{}", f.name), Tensor::zeros(f.cardinality, 1)))
            .collect();
        let latent = schema
            .fields
            .iter()
            .map(|f| {
                let t = crate::params::embedding_init(&mut rng, f.cardinality, cfg.latent_dim);
                params.add(format!("fm.latent.{}", f.name), t)
            })
            .collect();
        Ok(FmModel { cfg: cfg.clone(), schema: schema.clone(), params, bias, linear, latent })
    }
}

impl PairwiseModel for FmModel {
    fn kind(&self) -> &'static str {
        "fm"
    }

    fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn lambda(&self) -> f64 {
        self.cfg.lambda
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::json!({ "model": "fm", "config": self.cfg })
    }

    fn record_logit(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        record: &InteractionRecord,
    ) -> NodeId {
        let n = self.schema.n_fields() as f64;
        // Linear part: bias plus one weight per active value.
        let mut logit = bound.leaf(self.bias);
        for (&table, &code) in self.linear.iter().zip(&record.features) {
            let leaf = bound.leaf(table);
            let w = tape.gather_rows(leaf, &[code as usize]);
            logit = tape.add(logit, w);
        }
        // Interactions via 0.5 * sum_d [(sum_f v_fd)^2 - sum_f v_fd^2].
        let rows: Vec<NodeId> = self
            .latent
            .iter()
            .zip(&record.features)
            .map(|(&table, &code)| {
                let leaf = bound.leaf(table);
                tape.gather_rows(leaf, &[code as usize])
            })
            .collect();
        let v = tape.concat_rows(&rows);
        let col_means = tape.mean_rows(v);
        let col_sums = tape.scale(col_means, n);
        let sum_sq = tape.hadamard(col_sums, col_sums);
        let v_sq = tape.hadamard(v, v);
        let sq_means = tape.mean_rows(v_sq);
        let sq_sums = tape.scale(sq_means, n);
        let diff = tape.sub(sum_sq, sq_sums);
        let interaction_sum = tape.sum_all(diff);
        let interaction = tape.scale(interaction_sum, 0.5);
        tape.add(logit, interaction)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Embedding width per field.
    pub embed_dim: usize,
    /// Hidden layer widths; empty means a single linear layer.
    pub hidden: Vec<usize>,
    pub lambda: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig { embed_dim: 8, hidden: vec![64, 32], lambda: 1e-5 }
    }
}

/// Feed-forward network over the concatenation of all field embeddings.
pub struct MlpModel {
    cfg: MlpConfig,
    schema: FeatureSchema,
    params: ParamSet,
    embeddings: Vec<ParamId>,
    layers: Vec<(ParamId, ParamId)>,
    out: (ParamId, ParamId),
}

impl MlpModel {
    pub fn new(schema: &FeatureSchema, cfg: MlpConfig, seed: u64) -> Result<Self> {
        schema.validate()?;
        if cfg.embed_dim == 0 {
            return Err(crate::Error::Config("mlp config: embed_dim must be positive".into()));
        }
        if cfg.hidden.iter().any(|&h| h == 0) {
            return Err(crate::Error::Config("mlp config: hidden widths must be positive".into()));
        }
        if !(cfg.lambda >= 0.0) {
            return Err(crate::Error::Config(format!(
                "mlp config: lambda {} must be non-negative",
                cfg.lambda
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let embeddings: Vec<ParamId> = schema
            .fields
            .iter()
            .map(|f| {
                let t = crate::params::embedding_init(&mut rng, f.cardinality, cfg.embed_dim);
                params.add(format!("embedding.{}", f.name), t)
            })
            .collect();
        let mut width = schema.n_fields() * cfg.embed_dim;
        let mut layers = Vec::with_capacity(cfg.hidden.len());
        for (i, &h) in cfg.hidden.iter().enumerate() {
            let w = params.add(format!("mlp.{i}.w"), xavier(&mut rng, h, width));
            let b = params.add(format!("mlp.{i}.b"), Tensor::zeros(1, h));
            layers.push((w, b));
            width = h;
        }
        let out_w = params.add("mlp.out.w", xavier(&mut rng, 1, width));
        let out_b = params.add("mlp.out.b", Tensor::zeros(1, 1));
        Ok(MlpModel {
            cfg: cfg.clone(),
            schema: schema.clone(),
            params,
            embeddings,
            layers,
            out: (out_w, out_b),
        })
    }
}

impl PairwiseModel for MlpModel {
    fn kind(&self) -> &'static str {
        "mlp"
    }

    fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn lambda(&self) -> f64 {
        self.cfg.lambda
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::json!({ "model": "mlp", "config": self.cfg })
    }

    fn record_logit(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        record: &InteractionRecord,
    ) -> NodeId {
        let rows: Vec<NodeId> = self
            .embeddings
            .iter()
            .zip(&record.features)
            .map(|(&table, &code)| {
                let leaf = bound.leaf(table);
                tape.gather_rows(leaf, &[code as usize])
            })
            .collect();
        let e = tape.concat_rows(&rows);
        let flat = tape.reshape(e, 1, self.schema.n_fields() * self.cfg.embed_dim);
        let mut x = flat;
        for &(w, b) in &self.layers {
            let w_leaf = bound.leaf(w);
            let b_leaf = bound.leaf(b);
            let w_t = tape.transpose(w_leaf);
            let prod = tape.matmul(x, w_t);
            let affine = tape.add(prod, b_leaf);
            x = tape.relu(affine);
        }
        let w_leaf = bound.leaf(self.out.0);
        let b_leaf = bound.leaf(self.out.1);
        let w_t = tape.transpose(w_leaf);
        let prod = tape.matmul(x, w_t);
        tape.add(prod, b_leaf)
    }
}
