//! CTR models trained on pairwise click preferences.
//!
//! [`DisectrModel`] is the disentangled-interest architecture: embedding,
//! M parallel sparse-attention sub-encoders, prototype clustering, shared
//! interest supervision and attentive aggregation. Baselines implementing
//! the same [`PairwiseModel`] trait live in [`crate::baselines`].

mod aggregator;
mod disentangler;
mod encoder;

pub use encoder::default_active_queries;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::data::{Dataset, InteractionRecord, PairBatch};
use crate::error::{Error, Result};
use crate::metrics::ScoredSet;
use crate::ood::GroupRule;
use crate::params::{xavier, BoundParams, GradStore, ParamId, ParamSet};

/// Norm floor shared by every cosine/normalization in the model.
pub const NORM_EPS: f64 = 1e-12;

/// Records scored per tape during prediction, bounding tape memory.
const PREDICT_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    /// softmax(cos / tau): always a valid distribution.
    Softmax,
    /// cos / sum(cos) exactly as a ratio of raw cosines; requires positive
    /// row sums and exists for ablation comparisons.
    RawNormalized,
}

/// How the training objective is recorded on the tape.
///
/// `Train` is the real objective: adversarial weak-supervision rows pass
/// through gradient reversal. The `Fd*` modes build plain (reversal-free)
/// surrogates whose analytic gradients coincide with the `Train` sweep on a
/// parameter subset, letting finite differences verify an objective that is
/// not the gradient field of any single scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectiveMode {
    Train,
    /// Weak CE terms with the written signs (attribute minus others);
    /// matches `Train` gradients for everything except the weak classifier.
    FdAsWritten,
    /// All weak CE terms positive; matches `Train` gradients for the weak
    /// classifier itself.
    FdAllPositive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding width d per field.
    pub embed_dim: usize,
    /// Attention heads H per sub-encoder; interest width is d' = H * d.
    pub n_heads: usize,
    /// Number of interest sub-encoders M.
    pub n_interests: usize,
    /// Aggregator attention heads h.
    pub agg_heads: usize,
    /// Active queries c per sub-encoder; `None` means ceil(ln N).
    pub active_queries: Option<usize>,
    /// Projection temperature for softmax clustering.
    pub tau: f64,
    pub projection: ProjectionKind,
    pub use_prototypes: bool,
    /// Enables shared-row averaging during pairwise training.
    pub use_weak_supervision: bool,
    /// Group classes for the weak classifier head; `Some` allocates the
    /// classifier and requires a group rule at training time.
    pub n_weak_groups: Option<usize>,
    /// Weight of the interest discrepancy penalty.
    pub alpha: f64,
    /// Weight of the weak classifier loss.
    pub beta: f64,
    /// L2 weight decay coefficient.
    pub lambda: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 8,
            n_heads: 2,
            n_interests: 4,
            agg_heads: 4,
            active_queries: None,
            tau: 1.0,
            projection: ProjectionKind::Softmax,
            use_prototypes: true,
            use_weak_supervision: true,
            n_weak_groups: None,
            alpha: 0.1,
            beta: 0.1,
            lambda: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Interest representation width d' = H * d.
    pub fn d_prime(&self) -> usize {
        self.embed_dim * self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("n_heads", self.n_heads),
            ("n_interests", self.n_interests),
            ("agg_heads", self.agg_heads),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model config: {name} must be positive")));
            }
        }
        if self.active_queries == Some(0) {
            return Err(Error::Config("model config: active_queries must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("model config: tau {} must be positive", self.tau)));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!(
                    "model config: {name} {v} must be non-negative"
                )));
            }
        }
        match self.n_weak_groups {
            Some(g) if g < 2 => {
                return Err(Error::Config(format!(
                    "model config: n_weak_groups {g} must be at least 2"
                )))
            }
            Some(_) if !self.use_weak_supervision => {
                return Err(Error::Config(
                    "model config: weak classifier groups require use_weak_supervision".into(),
                ))
            }
            _ => {}
        }
        Ok(())
    }
}

/// Reported loss components of one batch; `total` is the loss as defined
/// (ranking + weighted penalties + L2), using the written-sign weak term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bpr: f64,
    pub discrepancy: f64,
    pub weak: f64,
    pub l2: f64,
    pub total: f64,
}

/// Encoder state for one record: pooled interests plus the per-sub-encoder
/// attended matrices and active query sets that produced them.
#[derive(Clone, Debug)]
pub struct EncoderProbe {
    /// M x d' matrix, one pooled row per sub-encoder.
    pub z: Tensor,
    /// Attended N x d' matrix per sub-encoder, before pooling.
    pub attended: Vec<Tensor>,
    /// Active query rows per sub-encoder, ascending.
    pub active: Vec<Vec<usize>>,
}

/// Disentangler trace for one positive/negative pair: projection weights,
/// interest matrices before and after shared-row replacement, the chosen
/// shared row, and the summed pairwise-cosine discrepancy of the two sides.
#[derive(Clone, Debug)]
pub struct PairProbe {
    pub projection_pos: Option<Tensor>,
    pub projection_neg: Option<Tensor>,
    pub pre_pos: Tensor,
    pub pre_neg: Tensor,
    pub post_pos: Tensor,
    pub post_neg: Tensor,
    pub shared_row: Option<usize>,
    pub discrepancy: f64,
}

#[derive(Debug)]
pub struct BatchLoss {
    /// Scalar node to backpropagate (excludes the L2 term, whose gradient
    /// is added analytically).
    pub node: NodeId,
    pub breakdown: LossBreakdown,
}

/// A CTR model trainable with pairwise ranking on a shared tape.
pub trait PairwiseModel {
    fn kind(&self) -> &'static str;
    fn schema(&self) -> &crate::data::FeatureSchema;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    /// L2 weight decay coefficient applied by the trainer.
    fn lambda(&self) -> f64;
    /// Configuration snapshot stored in checkpoints.
    fn config_json(&self) -> serde_json::Value;
    /// Whether training must supply a supervision group rule.
    fn needs_group_rule(&self) -> bool {
        false
    }

    /// Pre-sigmoid click logit of one record (1x1 node).
    fn record_logit(&self, tape: &mut Tape, bound: &BoundParams, record: &InteractionRecord)
        -> NodeId;

    /// Mean training objective over a pair batch. The default is the plain
    /// pairwise ranking loss.
    fn batch_objective(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        ds: &Dataset,
        batch: &PairBatch,
        weak_rule: Option<&GroupRule>,
        mode: ObjectiveMode,
    ) -> Result<BatchLoss> {
        let _ = (weak_rule, mode);
        let mut losses = Vec::with_capacity(batch.len());
        for (&p, &n) in batch.pos.iter().zip(&batch.neg) {
            let pos = self.record_logit(tape, bound, &ds.records[p]);
            let neg = self.record_logit(tape, bound, &ds.records[n]);
            losses.push(aggregator::bpr_loss(tape, pos, neg));
        }
        let total = tape.sum_list(&losses);
        let node = tape.scale(total, 1.0 / batch.len() as f64);
        let bpr = tape.value(node).item();
        let l2 = self.lambda() * self.params().sq_norm();
        Ok(BatchLoss {
            node,
            breakdown: LossBreakdown {
                bpr,
                discrepancy: 0.0,
                weak: 0.0,
                l2,
                total: bpr + l2,
            },
        })
    }

    /// Click probabilities for the given record indices.
    fn predict(&self, ds: &Dataset, indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len());
        for chunk in indices.chunks(PREDICT_CHUNK) {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, self.params());
            for &i in chunk {
                let logit = self.record_logit(&mut tape, &bound, &ds.records[i]);
                let prob = tape.sigmoid(logit);
                out.push(tape.value(prob).item());
            }
        }
        out
    }
}

/// Score every record of a dataset for metric computation.
pub fn score_dataset(model: &(impl PairwiseModel + ?Sized), ds: &Dataset) -> ScoredSet {
    let indices: Vec<usize> = (0..ds.len()).collect();
    let scores = model.predict(ds, &indices);
    let mut set = ScoredSet::default();
    for (i, score) in indices.into_iter().zip(scores) {
        set.push(ds.records[i].user(&ds.schema), score, ds.records[i].label);
    }
    set
}

/// Run a backward sweep for one batch and return (gradients, breakdown):
/// tape gradients of the recorded objective plus the analytic L2 term.
pub fn batch_gradients(
    model: &(impl PairwiseModel + ?Sized),
    ds: &Dataset,
    batch: &PairBatch,
    weak_rule: Option<&GroupRule>,
) -> Result<(GradStore, LossBreakdown)> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, model.params());
    let loss = model.batch_objective(&mut tape, &bound, ds, batch, weak_rule, ObjectiveMode::Train)?;
    if !tape.value(loss.node).item().is_finite() {
        return Err(Error::Numerical(format!(
            "batch objective is not finite: {:?}",
            loss.breakdown
        )));
    }
    let grads = tape.backward(loss.node);
    let mut store = GradStore::collect(model.params(), &bound, &grads);
    store.add_l2(model.params(), model.lambda());
    if !store.is_finite() {
        return Err(Error::Numerical("gradient overflow in backward sweep".into()));
    }
    Ok((store, loss.breakdown))
}

struct SubEncoderIds {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
}

pub struct DisectrModel {
    cfg: ModelConfig,
    schema: crate::data::FeatureSchema,
    params: ParamSet,
    embeddings: Vec<ParamId>,
    encoders: Vec<SubEncoderIds>,
    prototypes: Option<ParamId>,
    w_agg: ParamId,
    w_ctr: ParamId,
    w_weak: Option<ParamId>,
}

impl DisectrModel {
    pub fn new(schema: &crate::data::FeatureSchema, cfg: ModelConfig, seed: u64) -> Result<Self> {
        schema.validate()?;
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = cfg.embed_dim;
        let dp = cfg.d_prime();

        let embeddings = schema
            .fields
            .iter()
            .map(|f| {
                let t = crate::params::embedding_init(&mut rng, f.cardinality, d);
                params.add(format!("embedding.{}", f.name), t)
            })
            .collect();
        let encoders = (0..cfg.n_interests)
            .map(|m| SubEncoderIds {
                w_q: params.add(format!("encoder.{m}.w_q"), xavier(&mut rng, dp, d)),
                w_k: params.add(format!("encoder.{m}.w_k"), xavier(&mut rng, dp, d)),
                w_v: params.add(format!("encoder.{m}.w_v"), xavier(&mut rng, dp, d)),
            })
            .collect();
        let prototypes = cfg
            .use_prototypes
            .then(|| params.add("prototypes", xavier(&mut rng, cfg.n_interests, dp)));
        let w_agg = params.add("aggregator.w_agg", xavier(&mut rng, cfg.agg_heads, dp));
        let w_ctr = params.add(
            "aggregator.w_ctr",
            xavier(&mut rng, 1, cfg.agg_heads * dp),
        );
        let w_weak = cfg
            .n_weak_groups
            .map(|g| params.add("weak.w_weak", xavier(&mut rng, g, dp)));

        Ok(DisectrModel {
            cfg,
            schema: schema.clone(),
            params,
            embeddings,
            encoders,
            prototypes,
            w_agg,
            w_ctr,
            w_weak,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn active_queries(&self) -> usize {
        self.cfg
            .active_queries
            .unwrap_or_else(|| default_active_queries(self.schema.n_fields()))
    }

    fn encode_record(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        record: &InteractionRecord,
    ) -> encoder::EncoderOutput {
        let e = encoder::embed(tape, bound, &self.embeddings, record);
        let subs: Vec<encoder::SubEncoderNodes> = self
            .encoders
            .iter()
            .map(|s| encoder::SubEncoderNodes {
                w_q: bound.leaf(s.w_q),
                w_k: bound.leaf(s.w_k),
                w_v: bound.leaf(s.w_v),
            })
            .collect();
        encoder::encode(tape, &self.cfg, &subs, e, self.active_queries())
    }

    /// Encode and cluster one record; returns the M x d' interest matrix and,
    /// when prototypes are enabled, the M x M projection matrix.
    fn clustered(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        record: &InteractionRecord,
    ) -> (NodeId, Option<NodeId>) {
        let out = self.encode_record(tape, bound, record);
        match self.prototypes {
            Some(p) => {
                let protos = bound.leaf(p);
                let cluster =
                    disentangler::cluster_project(tape, self.cfg.projection, self.cfg.tau, protos, out.z);
                (cluster.z_hat, Some(cluster.p))
            }
            None => (out.z, None),
        }
    }

    /// Embed, encode and cluster one record into its M x d' interest matrix.
    fn interests(&self, tape: &mut Tape, bound: &BoundParams, record: &InteractionRecord) -> NodeId {
        self.clustered(tape, bound, record).0
    }

    /// Encoder state for one record, before clustering.
    pub fn probe_encoder(&self, record: &InteractionRecord) -> EncoderProbe {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &self.params);
        let out = self.encode_record(&mut tape, &bound, record);
        EncoderProbe {
            z: tape.value(out.z).clone(),
            attended: out.attended.iter().map(|&a| tape.value(a).clone()).collect(),
            active: out.active,
        }
    }

    /// Disentangler trace for one positive/negative pair.
    pub fn probe_pair(
        &self,
        pos: &InteractionRecord,
        neg: &InteractionRecord,
        rule: Option<&GroupRule>,
    ) -> PairProbe {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &self.params);
        let (zp, pp) = self.clustered(&mut tape, &bound, pos);
        let (zn, pn) = self.clustered(&mut tape, &bound, neg);
        let dp = disentangler::discrepancy(&mut tape, zp);
        let dn = disentangler::discrepancy(&mut tape, zn);
        let discrepancy = tape.value(dp).item() + tape.value(dn).item();
        let shared = if self.cfg.use_weak_supervision {
            match rule {
                Some(rule) => disentangler::select_shared_by_group(
                    rule.group_of(pos),
                    rule.group_of(neg),
                    self.cfg.n_interests,
                ),
                None => Some(disentangler::select_shared_adaptive(
                    tape.value(zp),
                    tape.value(zn),
                )),
            }
        } else {
            None
        };
        let (zp_final, zn_final) = match shared {
            Some(k) => disentangler::weak_supervise(&mut tape, zp, zn, k),
            None => (zp, zn),
        };
        PairProbe {
            projection_pos: pp.map(|id| tape.value(id).clone()),
            projection_neg: pn.map(|id| tape.value(id).clone()),
            pre_pos: tape.value(zp).clone(),
            pre_neg: tape.value(zn).clone(),
            post_pos: tape.value(zp_final).clone(),
            post_neg: tape.value(zn_final).clone(),
            shared_row: shared,
            discrepancy,
        }
    }

    /// Mean aggregator attention per interest over (up to) `limit` records.
    pub fn attention_profile(&self, ds: &Dataset, limit: usize) -> Vec<f64> {
        let mut sums = vec![0.0; self.cfg.n_interests];
        let mut n_rows = 0usize;
        for chunk in (0..ds.len().min(limit)).collect::<Vec<_>>().chunks(PREDICT_CHUNK) {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &self.params);
            for &i in chunk {
                let z = self.interests(&mut tape, &bound, &ds.records[i]);
                let w_agg = bound.leaf(self.w_agg);
                let w_ctr = bound.leaf(self.w_ctr);
                let agg = aggregator::aggregate(&mut tape, w_agg, w_ctr, z);
                let attn = tape.value(agg.attention);
                for r in 0..attn.rows() {
                    for (m, s) in sums.iter_mut().enumerate() {
                        *s += attn.get(r, m);
                    }
                    n_rows += 1;
                }
            }
        }
        if n_rows > 0 {
            for s in &mut sums {
                *s /= n_rows as f64;
            }
        }
        sums
    }
}

impl PairwiseModel for DisectrModel {
    fn kind(&self) -> &'static str {
        "disectr"
    }

    fn schema(&self) -> &crate::data::FeatureSchema {
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
        serde_json::json!({ "model": "disectr", "config": self.cfg })
    }

    fn needs_group_rule(&self) -> bool {
        self.w_weak.is_some()
    }

    fn record_logit(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        record: &InteractionRecord,
    ) -> NodeId {
        let z = self.interests(tape, bound, record);
        let w_agg = bound.leaf(self.w_agg);
        let w_ctr = bound.leaf(self.w_ctr);
        aggregator::aggregate(tape, w_agg, w_ctr, z).logit
    }

    fn batch_objective(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        ds: &Dataset,
        batch: &PairBatch,
        weak_rule: Option<&GroupRule>,
        mode: ObjectiveMode,
    ) -> Result<BatchLoss> {
        if batch.is_empty() {
            return Err(Error::Data("batch_objective: empty batch".into()));
        }
        if self.w_weak.is_some() && weak_rule.is_none() && self.cfg.beta > 0.0 {
            return Err(Error::Config(
                "model has a weak classifier but no group rule was supplied".into(),
            ));
        }
        let m = self.cfg.n_interests;
        let w_agg = bound.leaf(self.w_agg);
        let w_ctr = bound.leaf(self.w_ctr);
        let use_weak_ce =
            self.cfg.beta > 0.0 && self.w_weak.is_some() && weak_rule.is_some();

        let mut bpr_terms = Vec::with_capacity(batch.len());
        let mut dis_terms = Vec::with_capacity(batch.len());
        let mut weak_terms = Vec::with_capacity(batch.len());
        let mut weak_reported_sum = 0.0;
        for (&pi, &ni) in batch.pos.iter().zip(&batch.neg) {
            let pos_rec = &ds.records[pi];
            let neg_rec = &ds.records[ni];
            let zp = self.interests(tape, bound, pos_rec);
            let zn = self.interests(tape, bound, neg_rec);

            if self.cfg.alpha > 0.0 {
                let dp = disentangler::discrepancy(tape, zp);
                let dn = disentangler::discrepancy(tape, zn);
                dis_terms.push(tape.add(dp, dn));
            }

            let shared = if self.cfg.use_weak_supervision {
                match weak_rule {
                    Some(rule) => disentangler::select_shared_by_group(
                        rule.group_of(pos_rec),
                        rule.group_of(neg_rec),
                        m,
                    ),
                    None => Some(disentangler::select_shared_adaptive(
                        tape.value(zp),
                        tape.value(zn),
                    )),
                }
            } else {
                None
            };
            let (zp_final, zn_final) = match shared {
                Some(k) => disentangler::weak_supervise(tape, zp, zn, k),
                None => (zp, zn),
            };

            if use_weak_ce {
                let rule = weak_rule.unwrap();
                let w = bound.leaf(self.w_weak.unwrap());
                let ce_p = disentangler::weak_classifier_ce(
                    tape,
                    w,
                    zp_final,
                    rule.group_of(pos_rec) as usize,
                    mode,
                );
                let ce_n = disentangler::weak_classifier_ce(
                    tape,
                    w,
                    zn_final,
                    rule.group_of(neg_rec) as usize,
                    mode,
                );
                let pair = tape.add(ce_p.node, ce_n.node);
                weak_terms.push(tape.scale(pair, 0.5));
                weak_reported_sum += 0.5 * (ce_p.reported + ce_n.reported);
            }

            let pos_logit = aggregator::aggregate(tape, w_agg, w_ctr, zp_final).logit;
            let neg_logit = aggregator::aggregate(tape, w_agg, w_ctr, zn_final).logit;
            bpr_terms.push(aggregator::bpr_loss(tape, pos_logit, neg_logit));
        }

        let inv_b = 1.0 / batch.len() as f64;
        let bpr_sum = tape.sum_list(&bpr_terms);
        let mut objective = tape.scale(bpr_sum, inv_b);
        let bpr_value = tape.value(objective).item();

        let mut dis_value = 0.0;
        if !dis_terms.is_empty() {
            let dis_sum = tape.sum_list(&dis_terms);
            let dis_mean = tape.scale(dis_sum, inv_b);
            dis_value = tape.value(dis_mean).item();
            let weighted = tape.scale(dis_mean, self.cfg.alpha);
            objective = tape.add(objective, weighted);
        }
        let mut weak_value = 0.0;
        if !weak_terms.is_empty() {
            let weak_sum = tape.sum_list(&weak_terms);
            let weak_mean = tape.scale(weak_sum, inv_b);
            weak_value = weak_reported_sum * inv_b;
            let weighted = tape.scale(weak_mean, self.cfg.beta);
            objective = tape.add(objective, weighted);
        }
        let l2 = self.cfg.lambda * self.params.sq_norm();
        Ok(BatchLoss {
            node: objective,
            breakdown: LossBreakdown {
                bpr: bpr_value,
                discrepancy: dis_value,
                weak: weak_value,
                l2,
                total: bpr_value + self.cfg.alpha * dis_value + self.cfg.beta * weak_value + l2,
            },
        })
    }
}
