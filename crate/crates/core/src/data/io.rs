//! CSV loading and writing.
//!
//! Expected columns: `user`, one or more feature columns, `label`, plus
//! optional `behavior` and `timestamp`. Raw values are strings mapped to
//! dense codes through a [`Vocabulary`]; code 0 is reserved for values not
//! present when the vocabulary was built, so a field with k distinct raw
//! values gets cardinality k + 1.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, FeatureSchema, FieldSpec, InteractionRecord};
use crate::error::{Error, Result};

const LABEL_COL: &str = "label";
const USER_COL: &str = "user";
const BEHAVIOR_COL: &str = "behavior";
const TIMESTAMP_COL: &str = "timestamp";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldVocab {
    pub name: String,
    /// Raw value to code, codes starting at 1. BTreeMap keeps sidecar files
    /// byte-stable.
    pub map: BTreeMap<String, u32>,
}

impl FieldVocab {
    pub fn cardinality(&self) -> usize {
        self.map.len() + 1
    }

    pub fn code(&self, raw: &str) -> u32 {
        self.map.get(raw).copied().unwrap_or(0)
    }

    /// Raw string for a code; code 0 and out-of-range codes have none.
    pub fn raw(&self, code: u32) -> Option<&str> {
        self.map
            .iter()
            .find(|(_, &c)| c == code)
            .map(|(raw, _)| raw.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    /// One entry per schema field, same order.
    pub fields: Vec<FieldVocab>,
}

impl Vocabulary {
    pub fn schema(&self, user_field: usize) -> Result<FeatureSchema> {
        FeatureSchema::new(
            self.fields
                .iter()
                .map(|f| FieldSpec {
                    name: f.name.clone(),
                    cardinality: f.cardinality(),
                })
                .collect(),
            user_field,
        )
    }
}

/// Sidecar path for a dataset file: `<path>.vocab.json`.
fn vocab_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".vocab.json");
    std::path::PathBuf::from(s)
}

pub fn load_vocab(dataset_path: &Path) -> Result<Vocabulary> {
    let p = vocab_path(dataset_path);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(p.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("vocab sidecar {}: {e}", p.display())))
}

struct Header {
    /// (schema field position, csv column index) for user + feature columns.
    feature_cols: Vec<usize>,
    names: Vec<String>,
    label_col: usize,
    behavior_col: Option<usize>,
    timestamp_col: Option<usize>,
    user_field: usize,
}

fn parse_header(path: &Path, headers: &csv::StringRecord) -> Result<Header> {
    let cols: Vec<String> = headers.iter().map(|s| s.trim().to_string()).collect();
    let find = |name: &str| cols.iter().position(|c| c == name);
    let label_col = find(LABEL_COL)
        .ok_or_else(|| Error::Data(format!("{}: missing required column {LABEL_COL}", path.display())))?;
    let user_col = find(USER_COL)
        .ok_or_else(|| Error::Data(format!("{}: missing required column {USER_COL}", path.display())))?;
    let behavior_col = find(BEHAVIOR_COL);
    let timestamp_col = find(TIMESTAMP_COL);

    let mut feature_cols = vec![user_col];
    let mut names = vec![USER_COL.to_string()];
    for (i, c) in cols.iter().enumerate() {
        if i != label_col && i != user_col && Some(i) != behavior_col && Some(i) != timestamp_col {
            feature_cols.push(i);
            names.push(c.clone());
        }
    }
    Ok(Header {
        feature_cols,
        names,
        label_col,
        behavior_col,
        timestamp_col,
        user_field: 0,
    })
}

fn parse_row_tail(
    path: &Path,
    row: usize,
    rec: &csv::StringRecord,
    header: &Header,
) -> Result<(u8, Option<String>, Option<i64>)> {
    let raw_label = rec.get(header.label_col).unwrap_or("").trim();
    let label = match raw_label {
        "0" => 0,
        "1" => 1,
        other => {
            return Err(Error::Data(format!(
                "{} row {row}: label must be 0 or 1, got {other:?}",
                path.display()
            )))
        }
    };
    let behavior = header
        .behavior_col
        .and_then(|c| rec.get(c))
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    let timestamp = match header.timestamp_col.and_then(|c| rec.get(c)) {
        Some(raw) if !raw.trim().is_empty() => Some(raw.trim().parse::<i64>().map_err(|_| {
            Error::Data(format!(
                "{} row {row}: timestamp {raw:?} is not an integer",
                path.display()
            ))
        })?),
        _ => None,
    };
    Ok((label, behavior, timestamp))
}

fn open_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Load a CSV and build a fresh vocabulary: codes are assigned per field in
/// order of first appearance, starting at 1.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = open_reader(path)?;
    let header = parse_header(path, reader.headers().map_err(|e| Error::Data(e.to_string()))?)?;
    let n_fields = header.feature_cols.len();
    let mut maps: Vec<BTreeMap<String, u32>> = vec![BTreeMap::new(); n_fields];
    let mut records = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Data(format!("{} row {row}: {e}", path.display())))?;
        let mut features = Vec::with_capacity(n_fields);
        for (f, &col) in header.feature_cols.iter().enumerate() {
            let raw = rec.get(col).ok_or_else(|| {
                Error::Data(format!("{} row {row}: missing column {}", path.display(), header.names[f]))
            })?;
            let next = maps[f].len() as u32 + 1;
            let code = *maps[f].entry(raw.to_string()).or_insert(next);
            features.push(code);
        }
        let (label, behavior, timestamp) = parse_row_tail(path, row, &rec, &header)?;
        records.push(InteractionRecord {
            features,
            label,
            behavior,
            timestamp,
        });
    }
    let vocab = Vocabulary {
        fields: header
            .names
            .iter()
            .zip(&maps)
            .map(|(name, map)| FieldVocab {
                name: name.clone(),
                map: map.clone(),
            })
            .collect(),
    };
    let schema = vocab.schema(header.user_field)?;
    let ds = Dataset {
        schema,
        records,
        vocab: Some(vocab),
        name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    ds.validate()?;
    Ok(ds)
}

/// Load a CSV using an existing vocabulary; raw values outside it map to
/// code 0. Returns the dataset and how many values were unseen.
pub fn load_csv_with_vocab(path: &Path, vocab: &Vocabulary) -> Result<(Dataset, usize)> {
    let mut reader = open_reader(path)?;
    let header = parse_header(path, reader.headers().map_err(|e| Error::Data(e.to_string()))?)?;
    if header.names.len() != vocab.fields.len()
        || header
            .names
            .iter()
            .zip(&vocab.fields)
            .any(|(n, f)| *n != f.name)
    {
        return Err(Error::Schema(format!(
            "{}: columns {:?} do not match vocabulary fields {:?}",
            path.display(),
            header.names,
            vocab.fields.iter().map(|f| f.name.clone()).collect::<Vec<_>>()
        )));
    }
    let mut unseen = 0usize;
    let mut records = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Data(format!("{} row {row}: {e}", path.display())))?;
        let mut features = Vec::with_capacity(header.feature_cols.len());
        for (f, &col) in header.feature_cols.iter().enumerate() {
            let raw = rec.get(col).ok_or_else(|| {
                Error::Data(format!("{} row {row}: missing column {}", path.display(), header.names[f]))
            })?;
            let code = vocab.fields[f].code(raw);
            if code == 0 {
                unseen += 1;
            }
            features.push(code);
        }
        let (label, behavior, timestamp) = parse_row_tail(path, row, &rec, &header)?;
        records.push(InteractionRecord {
            features,
            label,
            behavior,
            timestamp,
        });
    }
    let schema = vocab.schema(header.user_field)?;
    let ds = Dataset {
        schema,
        records,
        vocab: Some(vocab.clone()),
        name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    ds.validate()?;
    Ok((ds, unseen))
}

/// Write a dataset as CSV. Vocab-backed datasets write raw strings and a
/// `<path>.vocab.json` sidecar (reload with [`load_csv_with_vocab`] for
/// identical codes); datasets without a vocabulary write decimal codes.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let has_behavior = ds.records.iter().any(|r| r.behavior.is_some());
    let has_timestamp = ds.records.iter().any(|r| r.timestamp.is_some());

    let mut header: Vec<String> = ds.schema.fields.iter().map(|f| f.name.clone()).collect();
    header.push(LABEL_COL.into());
    if has_behavior {
        header.push(BEHAVIOR_COL.into());
    }
    if has_timestamp {
        header.push(TIMESTAMP_COL.into());
    }
    writer
        .write_record(&header)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;

    for (i, r) in ds.records.iter().enumerate() {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        for (f, &code) in r.features.iter().enumerate() {
            let cell = match &ds.vocab {
                Some(v) => v.fields[f]
                    .raw(code)
                    .map(str::to_string)
                    .ok_or_else(|| {
                        Error::Data(format!(
                            "record {i}: code {code} in field {} has no raw value",
                            ds.schema.fields[f].name
                        ))
                    })?,
                None => code.to_string(),
            };
            row.push(cell);
        }
        row.push(r.label.to_string());
        if has_behavior {
            row.push(r.behavior.clone().unwrap_or_default());
        }
        if has_timestamp {
            row.push(r.timestamp.map(|t| t.to_string()).unwrap_or_default());
        }
        writer
            .write_record(&row)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(path.display().to_string(), e))?;

    if let Some(v) = &ds.vocab {
        let p = vocab_path(path);
        let text = serde_json::to_string_pretty(v)
            .map_err(|e| Error::Data(format!("vocab serialization: {e}")))?;
        std::fs::write(&p, text).map_err(|e| Error::io(p.display().to_string(), e))?;
    }
    Ok(())
}
