//! Builders that reshape an interaction dataset into out-of-distribution
//! variants.
//!
//! The label-shift builder splits records into a low and a high group by a
//! chosen field, then subsamples one label class per group so the group CTRs
//! hit requested targets; train and test get different targets so the
//! feature/label association flips strength across splits. The behavior
//! builder separates records by interaction type (for example click vs like)
//! so a model trains on one behavior and is evaluated on another.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Which label class gets subsampled to reach a CTR target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResampleClass {
    Positives,
    Negatives,
}

/// Fraction of one label class to keep so a split with source CTR `s`
/// reaches target CTR `t`, leaving the other class untouched.
///
/// Lowering the CTR keeps `t(1-s) / (s(1-t))` of the positives; raising it
/// keeps `s(1-t) / (t(1-s))` of the negatives; equal rates keep everything.
pub fn keep_ratio(s: f64, t: f64) -> Result<(ResampleClass, f64)> {
    for (name, v) in [("source", s), ("target", t)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Config(format!(
                "keep_ratio: {name} CTR {v} outside (0, 1)"
            )));
        }
    }
    if t < s {
        Ok((ResampleClass::Positives, t * (1.0 - s) / (s * (1.0 - t))))
    } else if t > s {
        Ok((ResampleClass::Negatives, s * (1.0 - t) / (t * (1.0 - s))))
    } else {
        Ok((ResampleClass::Positives, 1.0))
    }
}

/// A field split into a low and a high half by the record-mass median of
/// its raw values, resolved once against a source dataset.
///
/// Raw values order numerically when every distinct value parses as a
/// number, lexicographically otherwise. Datasets without a vocabulary use
/// the code itself as the raw value. Code 0 (unknown) joins the low group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRule {
    pub field: usize,
    /// Group per code, indexed by code: 0 = low, 1 = high.
    groups: Vec<u8>,
    /// Largest raw value still in the low group.
    pub threshold: String,
}

impl GroupRule {
    /// Split `field` at the median of its raw values in `ds`.
    pub fn median_split(ds: &Dataset, field: usize) -> Result<GroupRule> {
        if field >= ds.schema.n_fields() {
            return Err(Error::Config(format!(
                "group rule: field index {field} out of range for {} fields",
                ds.schema.n_fields()
            )));
        }
        if field == ds.schema.user_field {
            return Err(Error::Config(
                "group rule: splitting on the user field is not supported".into(),
            ));
        }
        let cardinality = ds.schema.fields[field].cardinality;
        let mut counts = vec![0usize; cardinality];
        for r in &ds.records {
            counts[r.features[field] as usize] += 1;
        }
        let raw_of = |code: usize| -> Option<String> {
            match &ds.vocab {
                Some(v) => v.fields[field].raw(code as u32).map(str::to_string),
                None => Some(code.to_string()),
            }
        };
        let mut present: Vec<(String, usize, usize)> = Vec::new();
        for (code, &n) in counts.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let Some(raw) = raw_of(code) else { continue };
            present.push((raw, code, n));
        }
        if present.len() < 2 {
            return Err(Error::Data(format!(
                "group rule: field {} has {} distinct values, need at least 2",
                ds.schema.fields[field].name,
                present.len()
            )));
        }
        let numeric = present.iter().all(|(raw, _, _)| raw.parse::<f64>().is_ok());
        if numeric {
            present.sort_by(|a, b| {
                a.0.parse::<f64>()
                    .unwrap()
                    .total_cmp(&b.0.parse::<f64>().unwrap())
            });
        } else {
            present.sort_by(|a, b| a.0.cmp(&b.0));
        }
        let total: usize = present.iter().map(|&(_, _, n)| n).sum();
        let mut cum = 0usize;
        let mut cut = 0usize;
        for (i, &(_, _, n)) in present.iter().enumerate() {
            cum += n;
            if 2 * cum >= total {
                cut = i;
                break;
            }
        }
        if cut + 1 == present.len() {
            // Everything at or below the median: shift the boundary so the
            // high group keeps the top value.
            cut -= 1;
        }
        let mut groups = vec![0u8; cardinality];
        for (i, &(_, code, _)) in present.iter().enumerate() {
            groups[code] = (i > cut) as u8;
        }
        Ok(GroupRule {
            field,
            groups,
            threshold: present[cut].0.clone(),
        })
    }

    /// 0 for the low group, 1 for the high group.
    pub fn group_of_code(&self, code: u32) -> u8 {
        self.groups.get(code as usize).copied().unwrap_or(0)
    }

    pub fn group_of(&self, record: &crate::data::InteractionRecord) -> u8 {
        self.group_of_code(record.features[self.field])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodEasyStats {
    pub low_source_ctr: f64,
    pub high_source_ctr: f64,
    pub low_ctr: f64,
    pub high_ctr: f64,
    pub low_kept: usize,
    pub high_kept: usize,
    pub dropped: usize,
}

#[derive(Debug)]
pub struct BuiltOodEasy {
    pub dataset: Dataset,
    pub stats: OodEasyStats,
}

/// Resample `ds` so the low group's CTR becomes `low_target` and the high
/// group's becomes `1 - low_target`, deleting records from exactly one label
/// class per group. Output records keep their original relative order.
pub fn build_ood_easy(
    ds: &Dataset,
    rule: &GroupRule,
    low_target: f64,
    seed: u64,
) -> Result<BuiltOodEasy> {
    if !(low_target > 0.0 && low_target < 1.0) {
        return Err(Error::Config(format!(
            "ood-easy: low-group CTR target {low_target} outside (0, 1)"
        )));
    }
    // (group, label) buckets of record indices.
    let mut buckets: [[Vec<usize>; 2]; 2] = Default::default();
    for (i, r) in ds.records.iter().enumerate() {
        buckets[rule.group_of(r) as usize][r.label as usize].push(i);
    }
    let mut kept: Vec<usize> = Vec::new();
    let mut kept_per_group = [0usize; 2];
    let mut source_ctr = [0.0f64; 2];
    let mut out_ctr = [0.0f64; 2];
    for group in 0..2 {
        let group_name = if group == 0 { "low" } else { "high" };
        let neg = &buckets[group][0];
        let pos = &buckets[group][1];
        if pos.is_empty() || neg.is_empty() {
            return Err(Error::Data(format!(
                "ood-easy: {group_name} group has {} positives and {} negatives; both classes required",
                pos.len(),
                neg.len()
            )));
        }
        let s = pos.len() as f64 / (pos.len() + neg.len()) as f64;
        source_ctr[group] = s;
        let target = if group == 0 { low_target } else { 1.0 - low_target };
        let (class, r) = keep_ratio(s, target)?;
        let (shrink, keep_all) = match class {
            ResampleClass::Positives => (pos, neg),
            ResampleClass::Negatives => (neg, pos),
        };
        let k = (r * shrink.len() as f64).round() as usize;
        let mut pool = shrink.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, group as u64, 0));
        pool.shuffle(&mut rng);
        pool.truncate(k);
        let kept_pos = match class {
            ResampleClass::Positives => pool.len(),
            ResampleClass::Negatives => keep_all.len(),
        };
        let group_total = pool.len() + keep_all.len();
        out_ctr[group] = if group_total == 0 {
            0.0
        } else {
            kept_pos as f64 / group_total as f64
        };
        kept_per_group[group] = group_total;
        kept.extend_from_slice(keep_all);
        kept.extend_from_slice(&pool);
    }
    kept.sort_unstable();
    let records = kept.iter().map(|&i| ds.records[i].clone()).collect();
    let dataset = Dataset {
        schema: ds.schema.clone(),
        records,
        vocab: ds.vocab.clone(),
        name: format!("{}[shift@{low_target}]", ds.name),
    };
    Ok(BuiltOodEasy {
        stats: OodEasyStats {
            low_source_ctr: source_ctr[0],
            high_source_ctr: source_ctr[1],
            low_ctr: out_ctr[0],
            high_ctr: out_ctr[1],
            low_kept: kept_per_group[0],
            high_kept: kept_per_group[1],
            dropped: ds.records.len() - dataset.records.len(),
        },
        dataset,
    })
}

/// Split a multi-behavior dataset into a train set of one behavior and a
/// test set of another.
pub fn build_ood_hard(
    ds: &Dataset,
    train_behavior: &str,
    test_behavior: &str,
) -> Result<(Dataset, Dataset)> {
    if train_behavior == test_behavior {
        return Err(Error::Config(format!(
            "ood-hard: train and test behavior are both {train_behavior:?}"
        )));
    }
    let pick = |behavior: &str| -> Result<Dataset> {
        let records: Vec<_> = ds
            .records
            .iter()
            .filter(|r| r.behavior.as_deref() == Some(behavior))
            .cloned()
            .collect();
        if records.is_empty() {
            return Err(Error::Data(format!(
                "ood-hard: no records with behavior {behavior:?} in dataset {:?}",
                ds.name
            )));
        }
        Ok(Dataset {
            schema: ds.schema.clone(),
            records,
            vocab: ds.vocab.clone(),
            name: format!("{}[{behavior}]", ds.name),
        })
    };
    Ok((pick(train_behavior)?, pick(test_behavior)?))
}
