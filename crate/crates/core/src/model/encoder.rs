//! Field embedding and the bank of parallel attention sub-encoders.
//!
//! Each record embeds to an N x d matrix (one row per field). Every
//! sub-encoder projects it to queries, keys and values of width d' = H * d,
//! splits them into H heads, and scores queries by how far their strongest
//! key response sits above their mean response. Only the top-c queries
//! (one set per sub-encoder, shared across its heads) receive softmax
//! attention; the remaining rows fall back to the head's mean value vector.
//! Attended heads concatenate back to N x d' and mean-pool into one
//! d'-vector per sub-encoder.

use crate::autodiff::{NodeId, Tape};
use crate::data::InteractionRecord;
use crate::params::{BoundParams, ParamId};

use super::ModelConfig;

/// Active query count used when the config leaves it unset: ceil(ln N),
/// floored at one query.
pub fn default_active_queries(n: usize) -> usize {
    ((n as f64).ln().ceil() as usize).max(1)
}

/// One row per field, gathered from that field's embedding table.
pub(crate) fn embed(
    tape: &mut Tape,
    bound: &BoundParams,
    embeddings: &[ParamId],
    record: &InteractionRecord,
) -> NodeId {
    let rows: Vec<NodeId> = embeddings
        .iter()
        .zip(&record.features)
        .map(|(&table, &code)| {
            let leaf = bound.leaf(table);
            tape.gather_rows(leaf, &[code as usize])
        })
        .collect();
    tape.concat_rows(&rows)
}

/// Projection weights of one sub-encoder, each d' x d.
#[derive(Clone, Copy)]
pub(crate) struct SubEncoderNodes {
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
}

pub(crate) struct EncoderOutput {
    /// M x d' matrix, one pooled row per sub-encoder.
    pub z: NodeId,
    /// Attended N x d' matrix per sub-encoder, before pooling.
    pub attended: Vec<NodeId>,
    /// Active query rows per sub-encoder, ascending.
    pub active: Vec<Vec<usize>>,
}

/// Indices of the `c` rows with the largest measure, ties broken toward the
/// lower index, returned in ascending order.
fn top_c(measure: &[f64], c: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..measure.len()).collect();
    idx.sort_by(|&a, &b| measure[b].total_cmp(&measure[a]).then(a.cmp(&b)));
    idx.truncate(c);
    idx.sort_unstable();
    idx
}

pub(crate) fn encode(
    tape: &mut Tape,
    cfg: &ModelConfig,
    subs: &[SubEncoderNodes],
    e: NodeId,
    active_queries: usize,
) -> EncoderOutput {
    let n = tape.value(e).rows();
    let d = cfg.embed_dim;
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let c = active_queries.min(n).max(1);

    let mut z_rows = Vec::with_capacity(subs.len());
    let mut attended = Vec::with_capacity(subs.len());
    let mut active_sets = Vec::with_capacity(subs.len());
    for sub in subs {
        let wq_t = tape.transpose(sub.w_q);
        let q = tape.matmul(e, wq_t);
        let wk_t = tape.transpose(sub.w_k);
        let k = tape.matmul(e, wk_t);
        let wv_t = tape.transpose(sub.w_v);
        let v = tape.matmul(e, wv_t);

        let mut head_scores = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, h * d, d);
            let kh = tape.slice_cols(k, h * d, d);
            let kh_t = tape.transpose(kh);
            let raw = tape.matmul(qh, kh_t);
            head_scores.push(tape.scale(raw, inv_sqrt_d));
        }

        // Query sparsity measure: max response minus mean response, summed
        // over heads so the sub-encoder keeps one active set. The selection
        // itself is discrete and carries no gradient.
        let mut measure = vec![0.0; n];
        for &s in &head_scores {
            let sv = tape.value(s);
            for (i, m) in measure.iter_mut().enumerate() {
                let row = sv.row(i);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mean = row.iter().sum::<f64>() / n as f64;
                *m += mx - mean;
            }
        }
        let active = top_c(&measure, c);

        let mut head_outs = Vec::with_capacity(cfg.n_heads);
        for (h, &scores) in head_scores.iter().enumerate() {
            let vh = tape.slice_cols(v, h * d, d);
            let picked = tape.gather_rows(scores, &active);
            let attn = tape.softmax_rows(picked);
            let out_active = tape.matmul(attn, vh);
            let v_mean = tape.mean_rows(vh);
            let rows: Vec<NodeId> = (0..n)
                .map(|i| match active.binary_search(&i) {
                    Ok(pos) => tape.gather_rows(out_active, &[pos]),
                    Err(_) => v_mean,
                })
                .collect();
            head_outs.push(tape.concat_rows(&rows));
        }
        let a_tilde = tape.concat_cols(&head_outs);
        z_rows.push(tape.mean_rows(a_tilde));
        attended.push(a_tilde);
        active_sets.push(active);
    }
    EncoderOutput {
        z: tape.concat_rows(&z_rows),
        attended,
        active: active_sets,
    }
}
