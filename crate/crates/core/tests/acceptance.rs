//! Release gate: ten numbered acceptance criteria, one test per criterion.
//!
//! Every test prints `criterion N: PASS/FAIL — detail`; run with
//! `cargo test -p disectr-core --test acceptance -- --nocapture` to see the
//! lines for passing criteria too. Criteria 7, 8 and 10 evaluate one shared
//! directional experiment (trained once, several minutes on a single core);
//! the remaining criteria are fast, self-contained property checks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use disectr_core::autodiff::{Tape, Tensor};
use disectr_core::data::{Dataset, FeatureSchema, FieldSpec, InteractionRecord, PairBatch};
use disectr_core::experiment::report::Phase;
use disectr_core::experiment::{parse_config, run_experiment, RunReport};
use disectr_core::metrics::{auc, gauc, logloss, ScoredSet};
use disectr_core::model::{
    batch_gradients, DisectrModel, ModelConfig, ObjectiveMode, PairwiseModel, ProjectionKind,
};
use disectr_core::ood::{build_ood_easy, keep_ratio, GroupRule, ResampleClass};
use disectr_core::params::BoundParams;

fn verdict(criterion: u32, ok: bool, detail: &str) {
    let line = format!(
        "criterion {criterion}: {} — {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    println!("{line}");
    assert!(ok, "{line}");
}

fn field(name: &str, cardinality: usize) -> FieldSpec {
    FieldSpec {
        name: name.into(),
        cardinality,
    }
}

fn rec(features: &[u32], label: u8) -> InteractionRecord {
    InteractionRecord::new(features.to_vec(), label)
}

// --- criterion 1: analytic gradients vs central finite differences -------

/// Objective value as plain differentiation sees it: recorded batch loss
/// plus the analytic L2 term the trainer adds outside the tape.
fn fd_objective(
    model: &DisectrModel,
    ds: &Dataset,
    batch: &PairBatch,
    rule: &GroupRule,
    mode: ObjectiveMode,
) -> f64 {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, model.params());
    let loss = model
        .batch_objective(&mut tape, &bound, ds, batch, Some(rule), mode)
        .unwrap();
    tape.value(loss.node).item() + model.lambda() * model.params().sq_norm()
}

#[test]
fn a01_analytic_gradients_match_central_differences() {
    let started = Instant::now();
    // Tiny configuration: N=4 fields, d=3, H=1, M=2, h=2, c=2 active
    // queries, two supervision groups, every loss term switched on.
    let schema = FeatureSchema::new(
        vec![field("user", 5), field("f1", 4), field("f2", 3), field("f3", 4)],
        0,
    )
    .unwrap();
    let ds = Dataset::new(
        schema.clone(),
        vec![
            rec(&[1, 1, 0, 1], 1),
            rec(&[1, 1, 1, 2], 0),
            rec(&[2, 0, 2, 3], 1),
            rec(&[2, 3, 1, 0], 0),
            rec(&[3, 0, 0, 0], 1),
            rec(&[3, 3, 2, 1], 0),
            rec(&[4, 1, 1, 3], 1),
            rec(&[0, 3, 0, 2], 0),
        ],
    );
    // Median split on f1 puts codes {0,1} low and {3} high, so pair (0,1)
    // shares a group (shared row = M-1) and pair (2,3) crosses groups (no
    // shared row). Both selections are discrete and stable under the
    // finite-difference perturbation.
    let rule = GroupRule::median_split(&ds, 1).unwrap();
    assert_eq!(rule.group_of(&ds.records[0]), rule.group_of(&ds.records[1]));
    assert_ne!(rule.group_of(&ds.records[2]), rule.group_of(&ds.records[3]));
    let cfg = ModelConfig {
        embed_dim: 3,
        n_heads: 1,
        n_interests: 2,
        agg_heads: 2,
        active_queries: Some(2),
        tau: 0.7,
        projection: ProjectionKind::Softmax,
        use_prototypes: true,
        use_weak_supervision: true,
        n_weak_groups: Some(2),
        alpha: 0.15,
        beta: 0.2,
        lambda: 1e-3,
    };
    let mut model = DisectrModel::new(&schema, cfg, 42).unwrap();
    let batch = PairBatch {
        pos: vec![0, 2],
        neg: vec![1, 3],
        fallback_count: 0,
    };

    let (analytic, _) = batch_gradients(&model, &ds, &batch, Some(&rule)).unwrap();

    // The training objective is not the gradient field of a single scalar:
    // adversarial weak rows pass through gradient reversal. Differentiate
    // the surrogate whose plain gradient equals the training sweep on each
    // parameter subset: all-positive weak terms for the classifier itself,
    // as-written signs for everything else.
    let h = 1e-5;
    let ids: Vec<_> = model.params().ids().collect();
    let mut max_rel = 0.0f64;
    let mut n_scalars = 0usize;
    for id in ids {
        let mode = if model.params().name(id) == "weak.w_weak" {
            ObjectiveMode::FdAllPositive
        } else {
            ObjectiveMode::FdAsWritten
        };
        for k in 0..model.params().get(id).len() {
            let orig = model.params().get(id).data()[k];
            model.params_mut().get_mut(id).data_mut()[k] = orig + h;
            let up = fd_objective(&model, &ds, &batch, &rule, mode);
            model.params_mut().get_mut(id).data_mut()[k] = orig - h;
            let down = fd_objective(&model, &ds, &batch, &rule, mode);
            model.params_mut().get_mut(id).data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = analytic.get(id).data()[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            max_rel = max_rel.max(rel);
            n_scalars += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        1,
        max_rel <= 1e-5 && secs < 60.0,
        &format!(
            "max relative gradient error {max_rel:.2e} over {n_scalars} parameters \
             (tolerance 1e-5, step 1e-5, {secs:.1}s)"
        ),
    );
}

// --- criterion 2: sparse attention with c = N vs dense oracle ------------

fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// n x d' product of an n x d matrix with the transpose of a d' x d weight.
fn project(e: &[Vec<f64>], w: &[Vec<f64>]) -> Vec<Vec<f64>> {
    e.iter()
        .map(|row| {
            w.iter()
                .map(|wr| row.iter().zip(wr).map(|(x, y)| x * y).sum())
                .collect()
        })
        .collect()
}

/// Dense multi-head attention for one sub-encoder, computed from the raw
/// parameter tensors with plain loops: gather embeddings, project to
/// queries/keys/values, score every query against every key, softmax,
/// mix values, concatenate heads.
fn dense_attention_oracle(
    model: &DisectrModel,
    schema: &FeatureSchema,
    record: &InteractionRecord,
    sub: usize,
) -> Vec<Vec<f64>> {
    let params = model.params();
    let tensor = |name: &str| params.get(params.id_of(name).unwrap());
    let d = model.config().embed_dim;
    let heads = model.config().n_heads;
    let n = schema.n_fields();
    let e: Vec<Vec<f64>> = schema
        .fields
        .iter()
        .zip(&record.features)
        .map(|(f, &code)| tensor(&format!("embedding.{}", f.name)).row(code as usize).to_vec())
        .collect();
    let q = project(&e, &tensor_rows(tensor(&format!("encoder.{sub}.w_q"))));
    let k = project(&e, &tensor_rows(tensor(&format!("encoder.{sub}.w_k"))));
    let v = project(&e, &tensor_rows(tensor(&format!("encoder.{sub}.w_v"))));
    let mut out = vec![vec![0.0; d * heads]; n];
    for h in 0..heads {
        let cols = h * d..(h + 1) * d;
        for i in 0..n {
            let mut scores: Vec<f64> = (0..n)
                .map(|j| {
                    q[i][cols.clone()]
                        .iter()
                        .zip(&k[j][cols.clone()])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / (d as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            for s in &mut scores {
                *s = (*s - mx).exp() / denom;
            }
            for (j, &w) in scores.iter().enumerate() {
                for col in cols.clone() {
                    out[i][col] += w * v[j][col];
                }
            }
        }
    }
    out
}

#[test]
fn a02_sparse_attention_with_full_active_set_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let n_fields = rng.gen_range(3..7usize);
        let d = rng.gen_range(2..5usize);
        let heads = rng.gen_range(1..3usize);
        let m = rng.gen_range(1..4usize);
        let fields: Vec<FieldSpec> = (0..n_fields)
            .map(|i| field(&format!("f{i}"), rng.gen_range(3..8usize)))
            .collect();
        let schema = FeatureSchema::new(fields, 0).unwrap();
        let cfg = ModelConfig {
            embed_dim: d,
            n_heads: heads,
            n_interests: m,
            agg_heads: 2,
            active_queries: Some(n_fields), // c = N: every query active
            n_weak_groups: None,
            ..ModelConfig::default()
        };
        let model = DisectrModel::new(&schema, cfg, 1_000 + trial).unwrap();
        let features: Vec<u32> = schema
            .fields
            .iter()
            .map(|f| rng.gen_range(0..f.cardinality) as u32)
            .collect();
        let record = rec(&features, 1);
        let probe = model.probe_encoder(&record);
        for sub in 0..m {
            assert_eq!(
                probe.active[sub],
                (0..n_fields).collect::<Vec<_>>(),
                "trial {trial}: active set must cover every query when c = N"
            );
            let oracle = dense_attention_oracle(&model, &schema, &record, sub);
            let attended = &probe.attended[sub];
            assert_eq!(attended.shape(), (n_fields, d * heads));
            for r in 0..n_fields {
                for c in 0..d * heads {
                    let o = oracle[r][c];
                    let rel = (attended.get(r, c) - o).abs() / o.abs().max(1.0);
                    worst = worst.max(rel);
                    assert!(
                        rel <= 1e-10,
                        "trial {trial} sub {sub} row {r} col {c}: relative error {rel:.2e}"
                    );
                }
            }
            // The pooled interest row is the column mean of the dense result.
            for c in 0..d * heads {
                let mean: f64 = (0..n_fields).map(|r| oracle[r][c]).sum::<f64>() / n_fields as f64;
                let rel = (probe.z.get(sub, c) - mean).abs() / mean.abs().max(1.0);
                worst = worst.max(rel);
                assert!(rel <= 1e-10, "trial {trial} sub {sub} pooled col {c}");
            }
        }
    }
    verdict(
        2,
        true,
        &format!(
            "attended matrices and pooled rows match the dense oracle over 100 random \
             instances (worst relative error {worst:.2e}, tolerance 1e-10)"
        ),
    );
}

// --- criterion 3: disentangler invariants --------------------------------

/// Pairwise-cosine discrepancy computed directly from a tensor's rows.
fn discrepancy_oracle(z: &Tensor) -> f64 {
    let norm = |row: &[f64]| row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let mut total = 0.0;
    for i in 0..z.rows() {
        for j in i + 1..z.rows() {
            let (a, b) = (z.row(i), z.row(j));
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            total += dot / (norm(a) * norm(b));
        }
    }
    total
}

/// Row indices where two same-shape tensors differ in any element.
fn changed_rows(before: &Tensor, after: &Tensor) -> Vec<usize> {
    (0..before.rows())
        .filter(|&r| before.row(r) != after.row(r))
        .collect()
}

#[test]
fn a03_disentangler_invariants_hold_on_random_inputs() {
    let schema = FeatureSchema::new(
        vec![field("user", 6), field("f1", 5), field("f2", 5), field("f3", 4)],
        0,
    )
    .unwrap();
    // Resolve one fixed group rule: codes {0,1,2} of f1 are low, {3,4} high.
    let rule_ds = Dataset::new(
        schema.clone(),
        (0..5).map(|c| rec(&[0, c, 0, 0], (c % 2) as u8)).collect(),
    );
    let rule = GroupRule::median_split(&rule_ds, 1).unwrap();

    let taus = [0.35, 1.0, 2.5];
    let mut worst_row_sum = 0.0f64;
    let mut worst_dis = 0.0f64;
    let (mut n_adaptive, mut n_same_group, mut n_cross_group) = (0usize, 0usize, 0usize);
    for t in 0..1_000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(t);
        let m = 2 + (t as usize % 3);
        let cfg = ModelConfig {
            embed_dim: 3,
            n_heads: 1,
            n_interests: m,
            agg_heads: 2,
            tau: taus[t as usize % taus.len()],
            projection: if t % 2 == 0 {
                ProjectionKind::Softmax
            } else {
                ProjectionKind::RawNormalized
            },
            ..ModelConfig::default()
        };
        let model = DisectrModel::new(&schema, cfg, 5_000 + t).unwrap();
        let random_rec = |rng: &mut ChaCha8Rng, label: u8| {
            let features: Vec<u32> = schema
                .fields
                .iter()
                .map(|f| rng.gen_range(0..f.cardinality) as u32)
                .collect();
            rec(&features, label)
        };
        let pos = random_rec(&mut rng, 1);
        let mut neg = random_rec(&mut rng, 0);
        if neg.features == pos.features {
            // Identical feature vectors make the midpoint replacement a
            // bitwise no-op; nudge one field so the pair is a real pair.
            neg.features[2] = (neg.features[2] + 1) % schema.fields[2].cardinality as u32;
        }
        let by_group = t % 4 >= 2;
        let probe = model.probe_pair(&pos, &neg, by_group.then_some(&rule));

        // Projection rows are mixing weights and must sum to one.
        for p in [&probe.projection_pos, &probe.projection_neg] {
            let p = p.as_ref().expect("prototypes are enabled");
            assert_eq!(p.shape(), (m, m));
            for r in 0..m {
                let err = (p.row(r).iter().sum::<f64>() - 1.0).abs();
                worst_row_sum = worst_row_sum.max(err);
                assert!(err <= 1e-6, "instance {t}: projection row {r} sums off by {err:.2e}");
            }
        }

        // Discrepancy matches the brute-force oracle and respects its bound.
        let oracle = discrepancy_oracle(&probe.pre_pos) + discrepancy_oracle(&probe.pre_neg);
        let err = (probe.discrepancy - oracle).abs();
        worst_dis = worst_dis.max(err);
        assert!(err <= 1e-10, "instance {t}: discrepancy off oracle by {err:.2e}");
        let bound = (m * (m - 1)) as f64;
        assert!(
            probe.discrepancy.abs() <= bound + 1e-9,
            "instance {t}: |discrepancy| {} exceeds bound {bound}",
            probe.discrepancy.abs()
        );

        if by_group {
            let same = rule.group_of(&pos) == rule.group_of(&neg);
            if same {
                // Same supervision group: the last row is the shared one.
                assert_eq!(probe.shared_row, Some(m - 1), "instance {t}");
                n_same_group += 1;
            } else {
                // Cross-group pairs share nothing and stay untouched.
                assert_eq!(probe.shared_row, None, "instance {t}");
                assert_eq!(changed_rows(&probe.pre_pos, &probe.post_pos), Vec::<usize>::new());
                assert_eq!(changed_rows(&probe.pre_neg, &probe.post_neg), Vec::<usize>::new());
                n_cross_group += 1;
                continue;
            }
        } else {
            n_adaptive += 1;
        }

        // Exactly one shared row is replaced on each side, both sides end
        // bitwise identical there, and the replacement is the midpoint.
        let shared = probe.shared_row.expect("a shared row must be selected");
        assert!(shared < m, "instance {t}");
        assert_eq!(changed_rows(&probe.pre_pos, &probe.post_pos), vec![shared], "instance {t}");
        assert_eq!(changed_rows(&probe.pre_neg, &probe.post_neg), vec![shared], "instance {t}");
        assert_eq!(probe.post_pos.row(shared), probe.post_neg.row(shared), "instance {t}");
        for c in 0..probe.pre_pos.cols() {
            let mid = (probe.pre_pos.get(shared, c) + probe.pre_neg.get(shared, c)) * 0.5;
            assert_eq!(probe.post_pos.get(shared, c), mid, "instance {t} col {c}");
        }
    }
    verdict(
        3,
        true,
        &format!(
            "1000 instances: projection rows sum to 1 (worst error {worst_row_sum:.2e}), \
             exactly one shared row per pair ({n_adaptive} adaptive, {n_same_group} same-group, \
             {n_cross_group} cross-group untouched), discrepancy matches the brute-force \
             oracle (worst error {worst_dis:.2e}) inside |L| <= M(M-1)"
        ),
    );
}

// --- criterion 4: label-shift resampling ----------------------------------

#[test]
fn a04_label_shift_resampling_hits_target_rates() {
    // Closed form: lowering a 0.6-CTR split to 0.2 keeps 1/6 of the
    // positives. The keep ratio is exact to final f64 rounding (within a
    // couple of ulp of the rational value 1/6).
    let (class, ratio) = keep_ratio(0.6, 0.2).unwrap();
    let ratio_ok = matches!(class, ResampleClass::Positives)
        && (ratio - 1.0 / 6.0).abs() <= 4.0 * f64::EPSILON;
    let (id_class, id_ratio) = keep_ratio(0.37, 0.37).unwrap();
    let identity_ok = matches!(id_class, ResampleClass::Positives) && id_ratio == 1.0;

    // Source: 140k records, price splits them into a low half with CTR 0.6
    // and a high half with CTR 0.4. Unique timestamps identify records.
    let schema = FeatureSchema::new(
        vec![field("user", 50), field("price", 3), field("filler", 7)],
        0,
    )
    .unwrap();
    let mut records = Vec::with_capacity(140_000);
    for i in 0..140_000u32 {
        let low = i < 70_000;
        let label = if low {
            u8::from(i % 5 < 3) // 42k positives / 28k negatives
        } else {
            u8::from(i % 5 < 2) // 28k positives / 42k negatives
        };
        let mut r = rec(&[i % 50, if low { 1 } else { 2 }, i % 7], label);
        r.timestamp = Some(i as i64);
        records.push(r);
    }
    let src = Dataset::new(schema, records);
    let rule = GroupRule::median_split(&src, 1).unwrap();
    let by_time: BTreeMap<i64, &InteractionRecord> = src
        .records
        .iter()
        .map(|r| (r.timestamp.unwrap(), r))
        .collect();

    let mut detail = String::new();
    let mut all_ok = ratio_ok && identity_ok;
    for (i, e_prime) in [0.1, 0.2, 0.3, 0.4, 0.5, 0.6].into_iter().enumerate() {
        let built = build_ood_easy(&src, &rule, e_prime, 97 + i as u64).unwrap();
        // Recompute group CTRs from the emitted records themselves.
        let mut group_counts = [[0usize; 2]; 2];
        let mut subset = true;
        for r in &built.dataset.records {
            group_counts[rule.group_of(r) as usize][r.label as usize] += 1;
            let original = by_time.get(&r.timestamp.unwrap());
            subset &= original.is_some_and(|o| {
                o.features == r.features && o.label == r.label && o.behavior == r.behavior
            });
        }
        let ctr = |counts: [usize; 2]| counts[1] as f64 / (counts[0] + counts[1]) as f64;
        let low_ctr = ctr(group_counts[0]);
        let high_ctr = ctr(group_counts[1]);
        let ok = (low_ctr - e_prime).abs() <= 0.02
            && (high_ctr - (1.0 - e_prime)).abs() <= 0.02
            && built.dataset.len() >= 50_000
            && subset
            && (built.stats.low_ctr - low_ctr).abs() < 1e-12
            && (built.stats.high_ctr - high_ctr).abs() < 1e-12;
        all_ok &= ok;
        detail.push_str(&format!(
            "e'={e_prime:.1}: low {low_ctr:.3}/high {high_ctr:.3} n={}{} ",
            built.dataset.len(),
            if subset { "" } else { " NOT-SUBSET" },
        ));
    }
    verdict(
        4,
        all_ok,
        &format!(
            "keep_ratio(0.6, 0.2) keeps positives at 1/6 (within 4 ulp: {ratio_ok}), equal \
             rates keep everything ({identity_ok}); resampled sets hit targets within 0.02 \
             with >= 50k rows, all records verbatim from the source — {}",
            detail.trim_end()
        ),
    );
}

// --- criterion 5: metric oracles ------------------------------------------

fn auc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let (mut n_pos, mut n_neg) = (0.0, 0.0);
    for &l in labels {
        if l == 1 {
            n_pos += 1.0;
        } else {
            n_neg += 1.0;
        }
    }
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            num += if scores[i] > scores[j] {
                1.0
            } else if scores[i] == scores[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    num / (n_pos * n_neg)
}

fn gauc_oracle(set: &ScoredSet) -> (f64, usize, usize) {
    let mut per_user: BTreeMap<u32, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for i in 0..set.len() {
        let entry = per_user.entry(set.users[i]).or_default();
        entry.0.push(set.scores[i]);
        entry.1.push(set.labels[i]);
    }
    let (mut weighted, mut total) = (0.0, 0.0);
    let (mut eligible, mut excluded) = (0usize, 0usize);
    for (scores, labels) in per_user.values() {
        if labels.contains(&1) && labels.contains(&0) {
            let w = scores.len() as f64;
            weighted += w * auc_oracle(scores, labels);
            total += w;
            eligible += 1;
        } else {
            excluded += 1;
        }
    }
    (weighted / total, eligible, excluded)
}

fn logloss_oracle(probs: &[f64], labels: &[u8]) -> f64 {
    let mut total = 0.0;
    for (&p, &l) in probs.iter().zip(labels) {
        let p = p.clamp(1e-7, 1.0 - 1e-7);
        total += if l == 1 { -p.ln() } else { -(1.0 - p).ln() };
    }
    total / probs.len() as f64
}

#[test]
fn a05_ranking_metrics_equal_brute_force_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for t in 0..200 {
        let n = rng.gen_range(2..=100usize);
        // Scores on a coarse grid so ties are frequent; the grid spans
        // [0, 1] including both endpoints, which exercises the clipping
        // path of the log loss.
        let mut scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..=16) as f64 / 16.0).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.4))).collect();
        labels[0] = 1;
        if n > 1 {
            labels[1] = 0;
        }
        let mut users: Vec<u32> = (0..n).map(|_| rng.gen_range(0..6)).collect();
        // User 0 owns the forced positive and negative, so at least one
        // user is GAUC-eligible.
        users[0] = 0;
        if n > 1 {
            users[1] = 0;
        }
        if n == 2 {
            scores[0] = 0.75;
            scores[1] = 0.25;
        }

        let a = auc(&scores, &labels).unwrap();
        assert_eq!(a, auc_oracle(&scores, &labels), "instance {t}: auc");

        // Strictly increasing transforms must not move the AUC at all.
        let affine: Vec<f64> = scores.iter().map(|s| 2.0 * s + 1.0).collect();
        let expo: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
        assert_eq!(a, auc(&affine, &labels).unwrap(), "instance {t}: affine transform");
        assert_eq!(a, auc(&expo, &labels).unwrap(), "instance {t}: exp transform");

        let mut set = ScoredSet::default();
        for i in 0..n {
            set.push(users[i], scores[i], labels[i]);
        }
        let g = gauc(&set).unwrap();
        let (val, eligible, excluded) = gauc_oracle(&set);
        assert_eq!(g.value, val, "instance {t}: gauc");
        assert_eq!(g.eligible_users, eligible, "instance {t}: eligible users");
        assert_eq!(g.excluded_users, excluded, "instance {t}: excluded users");

        let ll = logloss(&scores, &labels).unwrap();
        assert_eq!(ll, logloss_oracle(&scores, &labels), "instance {t}: logloss");
    }
    verdict(
        5,
        true,
        "AUC, GAUC and log loss equal brute-force recomputation bitwise on 200 random \
         instances (size <= 100, tied scores, clipped probabilities); AUC is bitwise \
         invariant under monotone score transforms",
    );
}

// --- criterion 6: parameter accounting ------------------------------------

#[test]
fn a06_parameter_accounting_matches_architecture() {
    let schema = FeatureSchema::new(
        vec![field("user", 100), field("a", 30), field("b", 12), field("c", 25)],
        0,
    )
    .unwrap();
    let d = 4;
    let embedding_expected = (100 + 30 + 12 + 25) * d;
    let mut detail = String::new();
    for (m, heads, agg) in [(1usize, 1usize, 2usize), (2, 2, 3), (4, 1, 5)] {
        let cfg = ModelConfig {
            embed_dim: d,
            n_heads: heads,
            n_interests: m,
            agg_heads: agg,
            n_weak_groups: None,
            ..ModelConfig::default()
        };
        let model = DisectrModel::new(&schema, cfg, 3).unwrap();
        let params = model.params();
        let d_prime = heads * d;
        let proto_len = params.get(params.id_of("prototypes").unwrap()).len();
        assert_eq!(proto_len, m * d_prime, "prototype scalars for M={m}");
        let agg_len = params.get(params.id_of("aggregator.w_agg").unwrap()).len();
        assert_eq!(agg_len, agg * d_prime, "aggregation-head scalars for h={agg}");
        let embedding_len = params
            .scalars_by_group()
            .into_iter()
            .find(|(g, _)| g == "embedding")
            .map(|(_, n)| n)
            .unwrap();
        assert_eq!(embedding_len, embedding_expected, "embedding scalars for M={m}");
        detail.push_str(&format!(
            "M={m},H={heads},h={agg}: prototypes {proto_len}, w_agg {agg_len}, embeddings {embedding_len}; "
        ));
    }
    verdict(
        6,
        true,
        &format!(
            "prototypes = M*d', aggregation heads = h*d', embedding count fixed at \
             {embedding_expected} independent of M — {}",
            detail.trim_end()
        ),
    );
}

// --- criteria 7, 8, 10: shared directional experiment ---------------------

struct SharedRun {
    report: RunReport,
    secs: f64,
}

/// One behavior-shift experiment shared by criteria 7, 8 and 10: train the
/// disentangled model and the MLP baseline on ~40k synthetic records from a
/// four-interest world, intervene on interest 1 (flipped click weights, new
/// state prior), then fine-tune on 1% and 10% of the held-out shifted pool.
fn shared_run() -> &'static Result<SharedRun, String> {
    static CELL: OnceLock<Result<SharedRun, String>> = OnceLock::new();
    CELL.get_or_init(|| {
        let out = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("behavior-shift");
        let toml = format!(
            r#"
            name = "acceptance-shift"
            seeds = [0, 1, 2, 3, 4]
            output_dir = "{out}"

            [data]
            kind = "synthetic"
            n_train = 40000
            n_ood = 10000
            [data.world]
            n_interests = 4
            n_feature_fields = 8
            field_cardinality = 6
            n_states = 3
            n_users = 300
            bias = -0.2

            [[models]]
            kind = "disectr"
            n_interests = 4
            tau = 0.5
            alpha = 0.1
            beta = 0.3

            [[models]]
            kind = "mlp"
            hidden = [64, 32]

            [train]
            batch_size = 128
            max_epochs = 30
            steps_per_epoch = 50
            lr = 0.001
            patience = 5

            [finetune]
            fractions = [0.01, 0.1]
            epochs = 5
            batch_size = 64
            lr = 0.003

            [protocol]
            kind = "intervention"
            target_interest = 1
            flip_click_weight = true
            new_prior = [0.9, 0.05, 0.05]
            "#,
            out = out.display(),
        );
        let cfg = parse_config(&toml).map_err(|e| e.to_string())?;
        let started = Instant::now();
        let report = run_experiment(&cfg, true).map_err(|e| e.to_string())?;
        Ok(SharedRun {
            report,
            secs: started.elapsed().as_secs_f64(),
        })
    })
}

fn cell_auc(report: &RunReport, model: &str, seed: u64, phase: Phase, fraction: Option<f64>) -> f64 {
    report
        .rows
        .iter()
        .find(|r| {
            r.model == model
                && r.seed == seed
                && r.phase == phase
                && match (r.fraction, fraction) {
                    (Some(a), Some(b)) => (a - b).abs() < 1e-12,
                    (None, None) => true,
                    _ => false,
                }
        })
        .unwrap_or_else(|| panic!("missing row: {model} seed {seed} {phase:?} {fraction:?}"))
        .auc
}

#[test]
fn a07_adapted_auc_drop_stays_at_or_below_the_mlp_baseline() {
    let run = match shared_run() {
        Ok(run) => run,
        Err(e) => return verdict(7, false, &format!("experiment failed: {e}")),
    };
    let report = &run.report;
    let mut ok_seeds = 0;
    let mut detail = String::new();
    for &seed in &report.seeds {
        let drop = |model: &str| {
            cell_auc(report, model, seed, Phase::Iid, None)
                - cell_auc(report, model, seed, Phase::FineTuned, Some(0.1))
        };
        let (d_dis, d_mlp) = (drop("disectr"), drop("mlp"));
        let ok = d_dis <= d_mlp;
        ok_seeds += usize::from(ok);
        detail.push_str(&format!(
            "seed {seed}: {d_dis:.4} vs {d_mlp:.4}{} ",
            if ok { "" } else { " (worse)" }
        ));
    }
    let within_budget = run.secs <= 1_800.0;
    verdict(
        7,
        ok_seeds >= 4 && within_budget,
        &format!(
            "after fine-tuning on 10% of the shifted pool, the disentangled model's AUC \
             drop from its own IID score is <= the MLP's in {ok_seeds}/5 seeds (need 4) — \
             {}— experiment took {:.0}s (budget 1800s)",
            detail, run.secs
        ),
    );
}

#[test]
fn a08_transfer_distance_concentrates_on_the_intervened_prototype() {
    let run = match shared_run() {
        Ok(run) => run,
        Err(e) => return verdict(8, false, &format!("experiment failed: {e}")),
    };
    let report = &run.report;
    let mut ok_seeds = 0;
    let mut detail = String::new();
    for &seed in &report.seeds {
        let rows = report
            .transfers
            .iter()
            .find(|t| t.model == "disectr" && t.seed == seed && (t.fraction - 0.1).abs() < 1e-12)
            .and_then(|t| t.prototype_rows.as_ref())
            .unwrap_or_else(|| panic!("missing prototype distances for seed {seed}"));
        // Weak supervision pins the intervened interest to the last row, so
        // fine-tuning should move that prototype the most.
        let (last, others) = rows.split_last().unwrap();
        let mean_others = others.iter().sum::<f64>() / others.len() as f64;
        let ratio = last / mean_others;
        let ok = ratio >= 1.5;
        ok_seeds += usize::from(ok);
        detail.push_str(&format!("seed {seed}: x{ratio:.2}{} ", if ok { "" } else { "(low)" }));
    }
    verdict(
        8,
        ok_seeds >= 3,
        &format!(
            "the pinned prototype's fine-tune distance exceeds 1.5x the mean of the others \
             in {ok_seeds}/5 seeds (need 3) — {}",
            detail.trim_end()
        ),
    );
}

#[test]
fn a10_more_adaptation_data_never_hurts_beyond_noise() {
    let run = match shared_run() {
        Ok(run) => run,
        Err(e) => return verdict(10, false, &format!("experiment failed: {e}")),
    };
    let report = &run.report;
    let mut ok_seeds = 0;
    let mut detail = String::new();
    for &seed in &report.seeds {
        let at = |f| cell_auc(report, "disectr", seed, Phase::FineTuned, Some(f));
        let diff = at(0.1) - at(0.01);
        let ok = diff >= -0.01;
        ok_seeds += usize::from(ok);
        detail.push_str(&format!("seed {seed}: {diff:+.4}{} ", if ok { "" } else { "(drop)" }));
    }
    let n = report.seeds.len();
    verdict(
        10,
        ok_seeds == n,
        &format!(
            "fine-tuning on 10% scores within 0.01 of (or above) fine-tuning on 1% in \
             {ok_seeds}/{n} seeds (need all) — {}",
            detail.trim_end()
        ),
    );
}

// --- criterion 9: byte-for-byte determinism -------------------------------

/// Every file under `dir`, keyed by path relative to it, excluding the
/// wall-clock metadata file.
fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                if rel != "run_meta.json" {
                    out.insert(rel, std::fs::read(&path).unwrap());
                }
            }
        }
    }
    out
}

#[test]
fn a09_identical_configs_reproduce_reports_byte_for_byte() {
    let base = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("determinism");
    let config_for = |dir: &Path| {
        let toml = format!(
            r#"
            name = "repeat"
            seeds = [0, 1]
            output_dir = "{out}"

            [data]
            kind = "synthetic"
            n_train = 700
            n_ood = 240
            [data.world]
            n_interests = 2
            n_feature_fields = 4
            field_cardinality = 4
            n_states = 2
            n_users = 12
            bias = -0.1

            [[models]]
            kind = "disectr"
            embed_dim = 3
            n_heads = 1
            n_interests = 2
            agg_heads = 2

            [[models]]
            kind = "fm"
            latent_dim = 3

            [train]
            batch_size = 16
            max_epochs = 2
            steps_per_epoch = 6
            lr = 0.01
            patience = 2

            [finetune]
            fractions = [0.5]
            epochs = 1
            batch_size = 8

            [protocol]
            kind = "ood_easy"
            affected_field = "f0"
            e = 0.6
            e_prime = [0.2, 0.5]
            "#,
            out = dir.display(),
        );
        parse_config(&toml).unwrap()
    };
    let mut dirs = Vec::new();
    for run in ["first", "second"] {
        let dir = base.join(run);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).unwrap();
        }
        run_experiment(&config_for(&dir), true).unwrap();
        dirs.push(dir);
    }
    let (first, second) = (dir_contents(&dirs[0]), dir_contents(&dirs[1]));
    assert_eq!(
        first.keys().collect::<Vec<_>>(),
        second.keys().collect::<Vec<_>>(),
        "the two runs produced different file sets"
    );
    let mut identical = 0;
    for (name, bytes) in &first {
        assert_eq!(Some(bytes), second.get(name).as_deref(), "{name} differs between runs");
        identical += 1;
    }
    assert!(first.contains_key("report.json") && first.contains_key("cells.csv"));
    verdict(
        9,
        true,
        &format!(
            "re-running an identical config reproduced all {identical} output files \
             byte-for-byte (reports, tables, series, checkpoints; timestamps excluded)"
        ),
    );
}
