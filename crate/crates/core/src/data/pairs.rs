//! Pairwise sampling for ranking losses: each positive record is matched
//! with a negative from the same user when that user has one, otherwise
//! with a global negative (counted as a fallback).

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

/// A batch of aligned record-index pairs into the source dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub pos: Vec<usize>,
    pub neg: Vec<usize>,
    /// How many pairs had to fall back to a global negative because the
    /// positive's user has no negatives.
    pub fallback_count: usize,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos.is_empty()
    }
}

/// Precomputed pools for repeated sampling from one dataset.
pub struct PairSampler {
    positives: Vec<usize>,
    negatives_by_user: HashMap<u32, Vec<usize>>,
    all_negatives: Vec<usize>,
    user_field: usize,
}

impl PairSampler {
    pub fn new(ds: &Dataset) -> Result<Self> {
        let positives = ds.positives();
        let all_negatives = ds.negatives();
        if positives.is_empty() {
            return Err(Error::Data(format!(
                "dataset {:?} has no positive records to pair",
                ds.name
            )));
        }
        if all_negatives.is_empty() {
            return Err(Error::Data(format!(
                "dataset {:?} has no negative records to pair",
                ds.name
            )));
        }
        let mut negatives_by_user: HashMap<u32, Vec<usize>> = HashMap::new();
        for &i in &all_negatives {
            negatives_by_user
                .entry(ds.records[i].user(&ds.schema))
                .or_default()
                .push(i);
        }
        Ok(PairSampler {
            positives,
            negatives_by_user,
            all_negatives,
            user_field: ds.schema.user_field,
        })
    }

    pub fn n_positives(&self) -> usize {
        self.positives.len()
    }

    pub fn sample(&self, ds: &Dataset, batch_size: usize, seed: u64) -> PairBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pos = Vec::with_capacity(batch_size);
        let mut neg = Vec::with_capacity(batch_size);
        let mut fallback_count = 0;
        for _ in 0..batch_size {
            let p = self.positives[rng.gen_range(0..self.positives.len())];
            let user = ds.records[p].features[self.user_field];
            let n = match self.negatives_by_user.get(&user) {
                Some(pool) if !pool.is_empty() => pool[rng.gen_range(0..pool.len())],
                _ => {
                    fallback_count += 1;
                    self.all_negatives[rng.gen_range(0..self.all_negatives.len())]
                }
            };
            pos.push(p);
            neg.push(n);
        }
        PairBatch {
            pos,
            neg,
            fallback_count,
        }
    }
}

/// One-shot convenience wrapper around [`PairSampler`].
pub fn sample_pairs(ds: &Dataset, batch_size: usize, seed: u64) -> Result<PairBatch> {
    Ok(PairSampler::new(ds)?.sample(ds, batch_size, seed))
}
