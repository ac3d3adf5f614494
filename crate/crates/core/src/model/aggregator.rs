//! Attentive aggregation of interest rows into a click logit, and the
//! pairwise ranking loss.

use crate::autodiff::{NodeId, Tape};

pub(crate) struct AggOut {
    /// 1x1 pre-sigmoid click logit.
    pub logit: NodeId,
    /// h x M attention weights over interests, rows summing to one.
    pub attention: NodeId,
}

/// z_agg = softmax(W_agg Z^T) Z flattened and scored by w_ctr.
pub(crate) fn aggregate(tape: &mut Tape, w_agg: NodeId, w_ctr: NodeId, z: NodeId) -> AggOut {
    let z_t = tape.transpose(z);
    let scores = tape.matmul(w_agg, z_t);
    let attention = tape.softmax_rows(scores);
    let z_agg = tape.matmul(attention, z);
    let (h, dp) = tape.value(z_agg).shape();
    let flat = tape.reshape(z_agg, 1, h * dp);
    let w_ctr_t = tape.transpose(w_ctr);
    let logit = tape.matmul(flat, w_ctr_t);
    AggOut { logit, attention }
}

/// Pairwise ranking loss on pre-sigmoid logits:
/// -ln sigmoid(pos - neg) = softplus(neg - pos), which stays finite for
/// any logit gap.
pub(crate) fn bpr_loss(tape: &mut Tape, pos_logit: NodeId, neg_logit: NodeId) -> NodeId {
    let diff = tape.sub(pos_logit, neg_logit);
    let flipped = tape.neg(diff);
    tape.softplus(flipped)
}
