//! Prototype clustering, shared-interest supervision and the interest
//! discrepancy penalty.
//!
//! Clustering projects the M encoder rows onto M learned prototypes via
//! cosine affinities (softmax-normalized by default) and mixes the rows with
//! the transposed projection matrix. During pairwise training one row is
//! designated "shared" between the positive and negative sample (the least
//! similar row pair when selecting adaptively, or the last row when both
//! records fall in the same supervision group) and replaced by the average
//! of the two sides. An optional linear group classifier pushes group
//! information into the last row and, through gradient reversal, out of the
//! others.

use crate::autodiff::{NodeId, Tape, Tensor};

use super::{ObjectiveMode, ProjectionKind, NORM_EPS};

pub(crate) struct ClusterOut {
    /// M x d' clustered interests.
    pub z_hat: NodeId,
    /// M x M projection matrix; rows sum to one.
    pub p: NodeId,
}

pub(crate) fn cluster_project(
    tape: &mut Tape,
    kind: ProjectionKind,
    tau: f64,
    prototypes: NodeId,
    z: NodeId,
) -> ClusterOut {
    let zn = tape.normalize_rows(z, NORM_EPS);
    let pn = tape.normalize_rows(prototypes, NORM_EPS);
    let pn_t = tape.transpose(pn);
    let cos = tape.matmul(zn, pn_t);
    let p = match kind {
        ProjectionKind::Softmax => {
            let scaled = tape.scale(cos, 1.0 / tau);
            tape.softmax_rows(scaled)
        }
        ProjectionKind::RawNormalized => tape.row_sum_normalize(cos),
    };
    let p_t = tape.transpose(p);
    let z_hat = tape.matmul(p_t, z);
    ClusterOut { z_hat, p }
}

/// Row index whose positive/negative pair is least similar: the interest a
/// clicked and an unclicked item most plausibly share. Ties resolve to the
/// lowest index.
pub(crate) fn select_shared_adaptive(z_pos: &Tensor, z_neg: &Tensor) -> usize {
    assert_eq!(z_pos.shape(), z_neg.shape());
    let mut best = 0;
    let mut best_cos = f64::INFINITY;
    for i in 0..z_pos.rows() {
        let c = crate::autodiff::tensor_cosine(z_pos.row(i), z_neg.row(i), NORM_EPS);
        if c < best_cos {
            best_cos = c;
            best = i;
        }
    }
    best
}

/// Group-code rule: the last row is shared exactly when both records carry
/// the same supervision group.
pub(crate) fn select_shared_by_group(g_pos: u8, g_neg: u8, m: usize) -> Option<usize> {
    (g_pos == g_neg).then_some(m - 1)
}

/// Replace row `shared` on both sides with the average of the two rows.
pub(crate) fn weak_supervise(
    tape: &mut Tape,
    z_pos: NodeId,
    z_neg: NodeId,
    shared: usize,
) -> (NodeId, NodeId) {
    let m = tape.value(z_pos).rows();
    assert!(shared < m, "shared row {shared} out of range for {m} interests");
    let pos_row = tape.gather_rows(z_pos, &[shared]);
    let neg_row = tape.gather_rows(z_neg, &[shared]);
    let sum = tape.add(pos_row, neg_row);
    let avg = tape.scale(sum, 0.5);
    let rebuild = |tape: &mut Tape, z: NodeId| -> NodeId {
        let rows: Vec<NodeId> = (0..m)
            .map(|i| {
                if i == shared {
                    avg
                } else {
                    tape.gather_rows(z, &[i])
                }
            })
            .collect();
        tape.concat_rows(&rows)
    };
    (rebuild(tape, z_pos), rebuild(tape, z_neg))
}

/// Sum of pairwise cosine similarities over distinct interest rows (i < j).
pub(crate) fn discrepancy(tape: &mut Tape, z: NodeId) -> NodeId {
    let m = tape.value(z).rows();
    let zn = tape.normalize_rows(z, NORM_EPS);
    let zn_t = tape.transpose(zn);
    let gram = tape.matmul(zn, zn_t);
    let mut mask = Tensor::zeros(m, m);
    for i in 0..m {
        for j in i + 1..m {
            mask.set(i, j, 1.0);
        }
    }
    let mask = tape.leaf(mask);
    let upper = tape.hadamard(gram, mask);
    tape.sum_all(upper)
}

pub(crate) struct WeakCe {
    /// Differentiable objective contribution (construction depends on mode).
    pub node: NodeId,
    /// Loss as defined: CE of the last row minus the CE of the others.
    pub reported: f64,
}

/// Group cross-entropy terms over the M interest rows. The last row is the
/// attribute slot and its CE enters positively. The other rows are
/// adversarial: in `Train` mode their rows pass through gradient reversal so
/// one backward sweep trains the classifier on every row while pushing the
/// encoder side away from group information; the Fd modes instead build the
/// surrogate objectives that plain differentiation of this parameter subset
/// would produce (used by finite-difference verification).
pub(crate) fn weak_classifier_ce(
    tape: &mut Tape,
    w_weak: NodeId,
    z: NodeId,
    group: usize,
    mode: ObjectiveMode,
) -> WeakCe {
    let m = tape.value(z).rows();
    let n_groups = tape.value(w_weak).rows();
    assert!(group < n_groups, "group {group} out of range for {n_groups} classes");
    let w_t = tape.transpose(w_weak);
    let mut terms = Vec::with_capacity(m);
    let mut reported = 0.0;
    for i in 0..m {
        let attribute_row = i == m - 1;
        let mut row = tape.gather_rows(z, &[i]);
        if !attribute_row && mode == ObjectiveMode::Train {
            row = tape.grad_reverse(row);
        }
        let logits = tape.matmul(row, w_t);
        let lse = tape.log_sum_exp_rows(logits);
        let picked = tape.get(logits, 0, group);
        let ce = tape.sub(lse, picked);
        let ce_value = tape.value(ce).item();
        if attribute_row {
            reported += ce_value;
            terms.push(ce);
        } else {
            reported -= ce_value;
            let term = match mode {
                ObjectiveMode::Train | ObjectiveMode::FdAllPositive => ce,
                ObjectiveMode::FdAsWritten => tape.neg(ce),
            };
            terms.push(term);
        }
    }
    let node = if terms.len() == 1 {
        terms[0]
    } else {
        tape.sum_list(&terms)
    };
    WeakCe { node, reported }
}
