//! Structured run results and their on-disk table/series renderings.
//!
//! Everything written here is a pure function of the [`RunReport`], so
//! regenerating tables from `report.json` reproduces them byte for byte.
//! Wall-clock metadata lives in a separate `run_meta.json` that the
//! determinism guarantee deliberately excludes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::config::AblationFlags;
use crate::ood::OodEasyStats;

/// Evaluation context of a metric row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Held-out split of the training distribution.
    Iid,
    /// Shifted evaluation set before any adaptation.
    ZeroShot,
    /// Shifted evaluation set after fine-tuning on a fraction.
    FineTuned,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Iid => "iid",
            Phase::ZeroShot => "zero_shot",
            Phase::FineTuned => "fine_tuned",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub model: String,
    pub seed: u64,
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e_prime: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
    pub auc: f64,
    pub gauc: f64,
    pub logloss: f64,
    pub n_eval: usize,
    pub excluded_users: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub model: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e_prime: Option<f64>,
    pub fraction: f64,
    pub subset_size: usize,
    pub steps_run: usize,
    pub group_distances: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prototype_rows: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub model: String,
    pub seed: u64,
    /// Mean aggregator attention per interest on the IID evaluation split.
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRow {
    pub model: String,
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_auc: f64,
    pub fallback_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodStatsRow {
    pub seed: u64,
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e_prime: Option<f64>,
    pub stats: OodEasyStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub protocol: String,
    pub scale: String,
    pub seeds: Vec<u64>,
    pub ablation: AblationFlags,
    pub rows: Vec<CellRow>,
    pub transfers: Vec<TransferRow>,
    pub attention: Vec<AttentionRow>,
    pub training: Vec<TrainingRow>,
    pub ood_stats: Vec<OodStatsRow>,
}

/// Wall-clock information, kept out of the deterministic artifacts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunMeta {
    pub started_at: String,
    pub finished_at: String,
    pub duration_seconds: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn report_json(report: &RunReport) -> String {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    text
}

pub fn write_report(report: &RunReport, dir: &Path) -> Result<()> {
    write_text(&dir.join("report.json"), &report_json(report))
}

pub fn load_report(path: &Path) -> Result<RunReport> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{} is not a run report: {e}", path.display())))
}

/// Render the flat per-cell metric table.
pub fn cells_csv(report: &RunReport) -> String {
    let mut out = String::from("model,seed,phase,e_prime,fraction,auc,gauc,logloss,n_eval,excluded_users\n");
    for r in &report.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.model,
            r.seed,
            r.phase.as_str(),
            opt(r.e_prime),
            opt(r.fraction),
            r.auc,
            r.gauc,
            r.logloss,
            r.n_eval,
            r.excluded_users
        )
        .unwrap();
    }
    out
}

/// Mean fine-tuned AUC per (model, e_prime, fraction) across seeds: the
/// transfer-accuracy-versus-shift series.
fn transfer_accuracy_csv(report: &RunReport) -> String {
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for r in &report.rows {
        if r.phase == Phase::FineTuned {
            groups
                .entry((r.model.clone(), opt(r.e_prime), opt(r.fraction)))
                .or_default()
                .push(r.auc);
        }
    }
    let mut out = String::from("model,e_prime,fraction,mean_auc,n_seeds\n");
    for ((model, e_prime, fraction), aucs) in groups {
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        writeln!(out, "{model},{e_prime},{fraction},{mean},{}", aucs.len()).unwrap();
    }
    out
}

/// Mean fine-tuned AUC per (model, fraction): the adaptation-efficiency
/// series.
fn transfer_efficiency_csv(report: &RunReport) -> String {
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in &report.rows {
        if r.phase == Phase::FineTuned {
            if let Some(f) = r.fraction {
                groups
                    .entry((r.model.clone(), f.to_string()))
                    .or_default()
                    .push(r.auc);
            }
        }
    }
    let mut out = String::from("model,fraction,mean_auc,n_cells\n");
    for ((model, fraction), aucs) in groups {
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        writeln!(out, "{model},{fraction},{mean},{}", aucs.len()).unwrap();
    }
    out
}

/// Per-prototype-row fine-tune movement, one file per model so each file has
/// exactly that model's interest count as row columns.
fn prototype_distance_files(report: &RunReport) -> BTreeMap<String, String> {
    let mut per_model: BTreeMap<String, Vec<&TransferRow>> = BTreeMap::new();
    for t in &report.transfers {
        if t.prototype_rows.is_some() {
            per_model.entry(t.model.clone()).or_default().push(t);
        }
    }
    let mut files = BTreeMap::new();
    for (model, rows) in per_model {
        let m = rows[0].prototype_rows.as_ref().unwrap().len();
        let mut out = String::from("seed,e_prime,fraction");
        for i in 0..m {
            write!(out, ",row_{i}").unwrap();
        }
        out.push('\n');
        for t in rows {
            let dists = t.prototype_rows.as_ref().unwrap();
            write!(out, "{},{},{}", t.seed, opt(t.e_prime), t.fraction).unwrap();
            for d in dists {
                write!(out, ",{d}").unwrap();
            }
            out.push('\n');
        }
        files.insert(format!("prototype_distances-{model}.csv"), out);
    }
    files
}

fn attention_csv(report: &RunReport) -> String {
    let mut out = String::from("model,seed,interest,weight\n");
    for a in &report.attention {
        for (i, w) in a.weights.iter().enumerate() {
            writeln!(out, "{},{},{i},{w}", a.model, a.seed).unwrap();
        }
    }
    out
}

/// All plot-ready series files as (relative name, content), a pure function
/// of the report.
pub fn series_files(report: &RunReport) -> Result<BTreeMap<PathBuf, String>> {
    if report.rows.is_empty() {
        return Err(Error::Data("report has no metric rows to plot".into()));
    }
    let mut files: BTreeMap<PathBuf, String> = BTreeMap::new();
    files.insert("transfer_accuracy.csv".into(), transfer_accuracy_csv(report));
    files.insert("transfer_efficiency.csv".into(), transfer_efficiency_csv(report));
    files.insert("attention.csv".into(), attention_csv(report));
    for (name, content) in prototype_distance_files(report) {
        files.insert(name.into(), content);
    }
    Ok(files)
}

/// Write `cells.csv` and the `series/` directory under `dir`.
pub fn write_tables(report: &RunReport, dir: &Path) -> Result<()> {
    write_text(&dir.join("cells.csv"), &cells_csv(report))?;
    for (name, content) in series_files(report)? {
        write_text(&dir.join("series").join(name), &content)?;
    }
    Ok(())
}

pub fn write_meta(meta: &RunMeta, dir: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(meta).expect("meta serializes");
    text.push('\n');
    write_text(&dir.join("run_meta.json"), &text)
}
