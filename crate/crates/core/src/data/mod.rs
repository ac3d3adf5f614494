//! Tabular interaction data: schema, records, datasets, CSV IO and
//! positive/negative pair sampling for ranking losses.

mod io;
mod pairs;

pub use io::{load_csv, load_csv_with_vocab, load_vocab, write_csv, FieldVocab, Vocabulary};
pub use pairs::{sample_pairs, PairBatch, PairSampler};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One categorical field and the size of its code space. Codes are dense
/// indices in `[0, cardinality)`; vocab-mapped datasets reserve code 0 for
/// values unseen at vocabulary-build time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub cardinality: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub fields: Vec<FieldSpec>,
    /// Index of the user id field within `fields`.
    pub user_field: usize,
}

impl FeatureSchema {
    pub fn new(fields: Vec<FieldSpec>, user_field: usize) -> Result<Self> {
        let schema = FeatureSchema { fields, user_field };
        schema.validate()?;
        Ok(schema)
    }

    pub fn n_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fields.is_empty() {
            return Err(Error::Schema("schema has no fields".into()));
        }
        if self.user_field >= self.fields.len() {
            return Err(Error::Schema(format!(
                "user_field index {} out of range for {} fields",
                self.user_field,
                self.fields.len()
            )));
        }
        for f in &self.fields {
            if f.cardinality == 0 {
                return Err(Error::Schema(format!("field {} has cardinality 0", f.name)));
            }
        }
        let mut names: Vec<&str> = self.fields.iter().map(|f| f.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.fields.len() {
            return Err(Error::Schema("duplicate field names in schema".into()));
        }
        Ok(())
    }
}

/// A single impression: one code per schema field, a click label, and
/// optional behavior/timestamp tags used by transfer protocols.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub features: Vec<u32>,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<i64>,
}

impl InteractionRecord {
    pub fn new(features: Vec<u32>, label: u8) -> Self {
        InteractionRecord {
            features,
            label,
            behavior: None,
            timestamp: None,
        }
    }

    pub fn user(&self, schema: &FeatureSchema) -> u32 {
        self.features[schema.user_field]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: FeatureSchema,
    pub records: Vec<InteractionRecord>,
    /// Raw-value mapping when the dataset came from text sources.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vocabulary>,
    /// Human-readable provenance label used in logs and reports.
    #[serde(default)]
    pub name: String,
}

impl Dataset {
    pub fn new(schema: FeatureSchema, records: Vec<InteractionRecord>) -> Self {
        Dataset {
            schema,
            records,
            vocab: None,
            name: String::new(),
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Indices of positive (clicked) records.
    pub fn positives(&self) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].label == 1).collect()
    }

    /// Indices of negative records.
    pub fn negatives(&self) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].label == 0).collect()
    }

    pub fn ctr(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        let pos = self.records.iter().filter(|r| r.label == 1).count();
        pos as f64 / self.records.len() as f64
    }

    /// Record indices grouped by user code, in ascending user order.
    pub fn by_user(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            map.entry(r.user(&self.schema)).or_default().push(i);
        }
        map
    }

    /// Check every record against the schema: field count, code ranges and
    /// binary labels. Errors name the first offending record.
    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        for (i, r) in self.records.iter().enumerate() {
            if r.features.len() != self.schema.n_fields() {
                return Err(Error::Data(format!(
                    "record {i}: {} feature codes, schema has {} fields",
                    r.features.len(),
                    self.schema.n_fields()
                )));
            }
            for (f, &code) in r.features.iter().enumerate() {
                if code as usize >= self.schema.fields[f].cardinality {
                    return Err(Error::Data(format!(
                        "record {i}: code {code} out of range for field {} (cardinality {})",
                        self.schema.fields[f].name, self.schema.fields[f].cardinality
                    )));
                }
            }
            if r.label > 1 {
                return Err(Error::Data(format!(
                    "record {i}: label {} is not binary",
                    r.label
                )));
            }
        }
        Ok(())
    }

    /// Keep a seeded random subset holding `fraction` of the records,
    /// preserving original order. `fraction` outside (0, 1] is a config error.
    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!(
                "subsample fraction {fraction} outside (0, 1]"
            )));
        }
        let keep = ((fraction * self.records.len() as f64).round() as usize).min(self.records.len());
        let mut idx: Vec<usize> = (0..self.records.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        let mut chosen: Vec<usize> = idx.into_iter().take(keep).collect();
        chosen.sort_unstable();
        let records = chosen.iter().map(|&i| self.records[i].clone()).collect();
        Ok(Dataset {
            schema: self.schema.clone(),
            records,
            vocab: self.vocab.clone(),
            name: format!("{}[{}%]", self.name, (fraction * 100.0).round()),
        })
    }
}

/// Split into train/valid/test. When every record carries a timestamp the
/// split is chronological; otherwise it is a seeded shuffle. Fractions must
/// be positive and sum to at most 1 (any remainder joins the test split).
pub fn split_dataset(
    ds: &Dataset,
    train_frac: f64,
    valid_frac: f64,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    if !(train_frac > 0.0 && valid_frac > 0.0 && train_frac + valid_frac < 1.0) {
        return Err(Error::Config(format!(
            "split fractions train={train_frac} valid={valid_frac} must be positive and sum below 1"
        )));
    }
    let n = ds.records.len();
    let mut idx: Vec<usize> = (0..n).collect();
    if n > 0 && ds.records.iter().all(|r| r.timestamp.is_some()) {
        idx.sort_by_key(|&i| (ds.records[i].timestamp.unwrap(), i));
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
    }
    let n_train = (train_frac * n as f64).round() as usize;
    let n_valid = (valid_frac * n as f64).round() as usize;
    let take = |range: &[usize], name: &str| -> Dataset {
        let mut sorted: Vec<usize> = range.to_vec();
        sorted.sort_unstable();
        Dataset {
            schema: ds.schema.clone(),
            records: sorted.iter().map(|&i| ds.records[i].clone()).collect(),
            vocab: ds.vocab.clone(),
            name: if ds.name.is_empty() {
                name.to_string()
            } else {
                format!("{}/{}", ds.name, name)
            },
        }
    };
    let train = take(&idx[..n_train.min(n)], "train");
    let valid = take(&idx[n_train.min(n)..(n_train + n_valid).min(n)], "valid");
    let test = take(&idx[(n_train + n_valid).min(n)..], "test");
    Ok((train, valid, test))
}
