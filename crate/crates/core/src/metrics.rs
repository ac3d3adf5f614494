//! Ranking and calibration metrics plus a distribution-shift diagnostic.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Model scores aligned with labels and user ids, ready for evaluation.
#[derive(Clone, Debug, Default)]
pub struct ScoredSet {
    pub users: Vec<u32>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredSet {
    pub fn push(&mut self, user: u32, score: f64, label: u8) {
        self.users.push(user);
        self.scores.push(score);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Area under the ROC curve via average ranks; ties contribute one half.
/// Undefined unless both classes are present.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::UndefinedMetric(format!(
            "auc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auc needs both classes, got {n_pos} positives and {n_neg} negatives"
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numerical("auc: non-finite score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share the average rank.
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    let nn = n_neg as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaucResult {
    pub value: f64,
    /// Users contributing to the average.
    pub eligible_users: usize,
    /// Users skipped because all their labels agree.
    pub excluded_users: usize,
}

/// Impression-weighted mean of per-user AUC over users that have both a
/// positive and a negative. Users are visited in ascending code order so the
/// floating-point sum is reproducible.
pub fn gauc(set: &ScoredSet) -> Result<GaucResult> {
    let mut per_user: BTreeMap<u32, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for i in 0..set.len() {
        let entry = per_user.entry(set.users[i]).or_default();
        entry.0.push(set.scores[i]);
        entry.1.push(set.labels[i]);
    }
    let mut weighted = 0.0;
    let mut total_weight = 0.0;
    let mut eligible = 0usize;
    let mut excluded = 0usize;
    for (scores, labels) in per_user.values() {
        let has_pos = labels.iter().any(|&l| l == 1);
        let has_neg = labels.iter().any(|&l| l == 0);
        if has_pos && has_neg {
            let w = scores.len() as f64;
            weighted += w * auc(scores, labels)?;
            total_weight += w;
            eligible += 1;
        } else {
            excluded += 1;
        }
    }
    if eligible == 0 {
        return Err(Error::UndefinedMetric(
            "gauc: no user has both positive and negative records".into(),
        ));
    }
    Ok(GaucResult {
        value: weighted / total_weight,
        eligible_users: eligible,
        excluded_users: excluded,
    })
}

const LOGLOSS_CLIP: f64 = 1e-7;

/// Mean negative log likelihood with probabilities clipped into
/// `[1e-7, 1 - 1e-7]`, so degenerate predictions stay finite.
pub fn logloss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "logloss: {} probabilities vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (&p, &l) in probs.iter().zip(labels) {
        if !p.is_finite() {
            return Err(Error::Numerical("logloss: non-finite probability".into()));
        }
        let p = p.clamp(LOGLOSS_CLIP, 1.0 - LOGLOSS_CLIP);
        total += if l == 1 { -p.ln() } else { -(1.0 - p).ln() };
    }
    Ok(total / probs.len() as f64)
}

/// Headline metrics for one scored evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub auc: f64,
    pub gauc: f64,
    pub logloss: f64,
    pub n_records: usize,
    pub gauc_eligible_users: usize,
    pub gauc_excluded_users: usize,
}

impl MetricsSummary {
    pub fn compute(set: &ScoredSet) -> Result<Self> {
        let g = gauc(set)?;
        Ok(MetricsSummary {
            auc: auc(&set.scores, &set.labels)?,
            gauc: g.value,
            logloss: logloss(&set.scores, &set.labels)?,
            n_records: set.len(),
            gauc_eligible_users: g.eligible_users,
            gauc_excluded_users: g.excluded_users,
        })
    }
}

pub const CTR_SHIFT_BIN_WIDTH: f64 = 0.05;
pub const CTR_SHIFT_THRESHOLD: f64 = 0.1;

/// Histogram of per-user CTR change on popular items between two splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtrShiftHistogram {
    /// Counts over 40 bins of width 0.05 spanning shifts in [-1, 1].
    pub bins: Vec<usize>,
    pub n_users: usize,
    /// Fraction of users whose absolute CTR shift exceeds 0.1.
    pub frac_large_shift: f64,
    pub n_popular_items: usize,
}

/// Per-user CTR change on popular items between `train` and `test`.
///
/// Popular items are the top `popular_cutoff` fraction (by train impression
/// count, ties broken by code) of the distinct codes in `item_field`. Users
/// need at least one popular-item impression in each split to contribute.
pub fn ctr_shift_histogram(
    train: &Dataset,
    test: &Dataset,
    item_field: usize,
    popular_cutoff: f64,
) -> Result<CtrShiftHistogram> {
    if item_field >= train.schema.n_fields() {
        return Err(Error::Config(format!(
            "ctr shift: item field index {item_field} out of range"
        )));
    }
    if !(popular_cutoff > 0.0 && popular_cutoff <= 1.0) {
        return Err(Error::Config(format!(
            "ctr shift: popular cutoff {popular_cutoff} outside (0, 1]"
        )));
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for r in &train.records {
        *counts.entry(r.features[item_field]).or_default() += 1;
    }
    if counts.is_empty() {
        return Err(Error::UndefinedMetric("ctr shift: empty train split".into()));
    }
    let mut items: Vec<(u32, usize)> = counts.into_iter().collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let n_popular = ((popular_cutoff * items.len() as f64).ceil() as usize).max(1);
    let popular: BTreeSet<u32> = items.iter().take(n_popular).map(|&(c, _)| c).collect();

    let user_ctr = |ds: &Dataset| -> BTreeMap<u32, (usize, usize)> {
        let mut map: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
        for r in &ds.records {
            if popular.contains(&r.features[item_field]) {
                let e = map.entry(r.user(&ds.schema)).or_default();
                e.0 += r.label as usize;
                e.1 += 1;
            }
        }
        map
    };
    let train_ctr = user_ctr(train);
    let test_ctr = user_ctr(test);

    let mut bins = vec![0usize; 40];
    let mut n_users = 0usize;
    let mut large = 0usize;
    for (user, &(pos_tr, n_tr)) in &train_ctr {
        let Some(&(pos_te, n_te)) = test_ctr.get(user) else { continue };
        let shift = pos_te as f64 / n_te as f64 - pos_tr as f64 / n_tr as f64;
        let idx = (((shift + 1.0) / CTR_SHIFT_BIN_WIDTH).floor() as isize).clamp(0, 39) as usize;
        bins[idx] += 1;
        if shift.abs() > CTR_SHIFT_THRESHOLD {
            large += 1;
        }
        n_users += 1;
    }
    if n_users == 0 {
        return Err(Error::UndefinedMetric(
            "ctr shift: no user has popular-item impressions in both splits".into(),
        ));
    }
    Ok(CtrShiftHistogram {
        bins,
        n_users,
        frac_large_shift: large as f64 / n_users as f64,
        n_popular_items: n_popular,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureSchema, FieldSpec, InteractionRecord};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Pair-counting definition: wins plus half-credit for ties over all
    /// positive/negative pairs.
    fn auc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            if labels[i] != 1 {
                continue;
            }
            for j in 0..scores.len() {
                if labels[j] != 0 {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_handles_perfect_reversed_and_tied_rankings() {
        let labels = [1u8, 1, 0, 0];
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &labels).unwrap(), 1.0);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 0.0);
        assert_eq!(auc(&[0.5, 0.5, 0.5, 0.5], &labels).unwrap(), 0.5);
    }

    #[test]
    fn auc_matches_pair_counting_exactly_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let n = rng.gen_range(2..60);
            // Coarse score grid so ties actually occur.
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 / 7.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            labels[0] = 1;
            labels[n - 1] = 0;
            let fast = auc(&scores, &labels).unwrap();
            let slow = auc_pairs(&scores, &labels);
            assert_eq!(fast, slow, "scores={scores:?} labels={labels:?}");
        }
    }

    #[test]
    fn auc_requires_both_classes() {
        assert!(matches!(
            auc(&[0.1, 0.2], &[1, 1]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(
            auc(&[0.1, 0.2], &[0, 0]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    proptest! {
        #[test]
        fn auc_is_invariant_to_monotone_transforms(
            raw in proptest::collection::vec(0u8..12, 4..40),
            labels in proptest::collection::vec(0u8..2, 4..40),
        ) {
            let n = raw.len().min(labels.len());
            let scores: Vec<f64> = raw[..n].iter().map(|&x| x as f64 / 11.0).collect();
            let mut labels = labels[..n].to_vec();
            labels[0] = 1;
            labels[n - 1] = 0;
            let base = auc(&scores, &labels).unwrap();
            let affine: Vec<f64> = scores.iter().map(|&s| 3.5 * s + 1.25).collect();
            let logistic: Vec<f64> = scores.iter().map(|&s| 1.0 / (1.0 + (-4.0 * s).exp())).collect();
            prop_assert_eq!(base, auc(&affine, &labels).unwrap());
            prop_assert_eq!(base, auc(&logistic, &labels).unwrap());
        }
    }

    #[test]
    fn gauc_weights_users_by_impressions() {
        let mut set = ScoredSet::default();
        // User 1: 2 impressions, AUC 1.0. User 2: 4 impressions, AUC 0.0.
        set.push(1, 0.9, 1);
        set.push(1, 0.1, 0);
        set.push(2, 0.1, 1);
        set.push(2, 0.2, 0);
        set.push(2, 0.3, 0);
        set.push(2, 0.4, 0);
        // User 3: positives only, excluded.
        set.push(3, 0.7, 1);
        let g = gauc(&set).unwrap();
        assert_eq!(g.eligible_users, 2);
        assert_eq!(g.excluded_users, 1);
        assert_eq!(g.value, (2.0 * 1.0 + 4.0 * 0.0) / 6.0);
    }

    #[test]
    fn gauc_on_single_eligible_user_equals_auc() {
        let mut set = ScoredSet::default();
        let scores = [0.2, 0.8, 0.5, 0.4];
        let labels = [0u8, 1, 1, 0];
        for i in 0..4 {
            set.push(7, scores[i], labels[i]);
        }
        assert_eq!(gauc(&set).unwrap().value, auc(&scores, &labels).unwrap());
    }

    #[test]
    fn gauc_matches_direct_weighted_mean_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.gen_range(6..80);
            let mut set = ScoredSet::default();
            for _ in 0..n {
                set.push(
                    rng.gen_range(0..6),
                    rng.gen_range(0..10) as f64 / 9.0,
                    rng.gen_range(0..2) as u8,
                );
            }
            let mut per_user: BTreeMap<u32, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
            for i in 0..set.len() {
                let e = per_user.entry(set.users[i]).or_default();
                e.0.push(set.scores[i]);
                e.1.push(set.labels[i]);
            }
            let mut num = 0.0;
            let mut den = 0.0;
            for (s, l) in per_user.values() {
                if l.contains(&0) && l.contains(&1) {
                    num += s.len() as f64 * auc_pairs(s, l);
                    den += s.len() as f64;
                }
            }
            match gauc(&set) {
                Ok(g) => assert_eq!(g.value, num / den),
                Err(_) => assert_eq!(den, 0.0),
            }
        }
    }

    #[test]
    fn logloss_matches_hand_values_and_clips() {
        let v = logloss(&[0.8, 0.3], &[1, 0]).unwrap();
        let expect = (-(0.8f64).ln() - (0.7f64).ln()) / 2.0;
        assert!((v - expect).abs() < 1e-15);
        // A confidently wrong probability of 0 is clipped, not infinite.
        let clipped = logloss(&[0.0], &[1]).unwrap();
        assert!((clipped - (-(1e-7f64).ln())).abs() < 1e-9);
        // Predicting the base rate is optimal among constant predictions.
        let labels = [1u8, 1, 1, 0];
        let at_base = logloss(&[0.75; 4], &labels).unwrap();
        for p in [0.5, 0.6, 0.7, 0.8, 0.9] {
            assert!(logloss(&[p; 4], &labels).unwrap() >= at_base);
        }
    }

    fn shift_fixture() -> (Dataset, Dataset) {
        let schema = FeatureSchema::new(
            vec![
                FieldSpec { name: "user".into(), cardinality: 8 },
                FieldSpec { name: "item".into(), cardinality: 8 },
            ],
            0,
        )
        .unwrap();
        // Item 1 dominates train counts; items 2 and 3 are rare.
        let mk = |rows: &[(u32, u32, u8)]| {
            Dataset::new(
                schema.clone(),
                rows.iter()
                    .map(|&(u, i, l)| InteractionRecord::new(vec![u, i], l))
                    .collect(),
            )
        };
        let train = mk(&[
            (1, 1, 1),
            (1, 1, 0),
            (2, 1, 0),
            (2, 1, 0),
            (1, 2, 1),
            (2, 3, 0),
        ]);
        let test = mk(&[(1, 1, 0), (1, 1, 0), (2, 1, 1), (3, 1, 1)]);
        (train, test)
    }

    #[test]
    fn ctr_shift_histogram_counts_users_and_large_shifts() {
        let (train, test) = shift_fixture();
        // cutoff keeps ceil(0.34 * 3) = 2 items: 1 (count 4) and 2 (count 1).
        let h = ctr_shift_histogram(&train, &test, 1, 0.34).unwrap();
        assert_eq!(h.n_popular_items, 2);
        // User 1: train ctr on popular = 2/3, test = 0 -> shift -2/3.
        // User 2: train 0/2, test 1/1 -> +1. User 3 absent from train.
        assert_eq!(h.n_users, 2);
        assert_eq!(h.frac_large_shift, 1.0);
        assert_eq!(h.bins.iter().sum::<usize>(), 2);
        let idx_user1 = (((-2.0 / 3.0) + 1.0) / CTR_SHIFT_BIN_WIDTH).floor() as usize;
        assert_eq!(h.bins[idx_user1], 1);
        assert_eq!(h.bins[39], 1);
    }

    #[test]
    fn ctr_shift_requires_overlapping_users() {
        let (train, _) = shift_fixture();
        let schema = train.schema.clone();
        let test = Dataset::new(schema, vec![InteractionRecord::new(vec![7, 1], 1)]);
        assert!(matches!(
            ctr_shift_histogram(&train, &test, 1, 0.5),
            Err(Error::UndefinedMetric(_))
        ));
    }
}
