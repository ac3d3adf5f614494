//! Experiment execution: one seeded replication trains every configured
//! model on the protocol's training distribution, checkpoints it, then
//! adapts and evaluates it across the protocol's grid cells. Seeds run in
//! parallel; results merge in seed order so reports are deterministic.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::{split_dataset, Dataset};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::experiment::config::{
    DataSection, ExperimentConfig, ModelSpec, ProtocolSection, ResolvedModel,
};
use crate::experiment::report::{
    AttentionRow, CellRow, OodStatsRow, Phase, RunMeta, RunReport, TrainingRow, TransferRow,
};
use crate::metrics::MetricsSummary;
use crate::model::{score_dataset, DisectrModel, PairwiseModel};
use crate::ood::{build_ood_easy, build_ood_hard, GroupRule};
use crate::synth::{sample_dataset, sample_world, Intervention};
use crate::train::{checkpoint, fine_tune, train, AdamConfig, FineTuneConfig, TrainConfig};
use crate::baselines::{FmModel, MlpModel};

// Seed-derivation contexts, one per independent random decision.
const CTX_WORLD: u64 = 1;
const CTX_DATA: u64 = 2;
const CTX_SPLIT: u64 = 3;
const CTX_OOD: u64 = 4;
const CTX_ADAPT: u64 = 5;
const CTX_INIT: u64 = 6;
const CTX_TRAIN: u64 = 7;
const CTX_FINETUNE: u64 = 8;

/// One evaluation cell of the protocol grid: a shifted adaptation pool and a
/// disjoint shifted evaluation set.
struct Cell {
    e_prime: Option<f64>,
    adapt: Dataset,
    eval: Dataset,
}

struct ProtocolData {
    train: Dataset,
    valid: Dataset,
    iid_test: Dataset,
    weak_rule: Option<GroupRule>,
    weak_groups: Option<usize>,
    cells: Vec<Cell>,
    ood_stats: Vec<OodStatsRow>,
}

/// Record-disjoint seeded halves of a dataset, each keeping source order.
fn split_two(ds: &Dataset, first_frac: f64, seed: u64) -> (Dataset, Dataset) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let k = ((first_frac * ds.len() as f64).round() as usize).min(ds.len());
    let take = |part: &[usize], tag: &str| {
        let mut sorted = part.to_vec();
        sorted.sort_unstable();
        Dataset {
            schema: ds.schema.clone(),
            records: sorted.iter().map(|&i| ds.records[i].clone()).collect(),
            vocab: ds.vocab.clone(),
            name: format!("{}/{tag}", ds.name),
        }
    };
    (take(&idx[..k], "adapt"), take(&idx[k..], "eval"))
}

fn field_index(ds: &Dataset, name: &str) -> Result<usize> {
    let idx = ds
        .schema
        .fields
        .iter()
        .position(|f| f.name == name)
        .ok_or_else(|| {
            Error::Schema(format!(
                "field {name:?} not present in dataset {:?}",
                ds.name
            ))
        })?;
    if idx == ds.schema.user_field {
        return Err(Error::Config(format!(
            "field {name:?} is the user id field and cannot drive a group split"
        )));
    }
    Ok(idx)
}

fn build_protocol_data(cfg: &ExperimentConfig, seed: u64) -> Result<ProtocolData> {
    // Materialize the source data and, for synthetic sources, keep the world
    // for interventions.
    let (source, world) = match &cfg.data {
        DataSection::Csv { path } => (crate::data::load_csv(path)?, None),
        DataSection::Synthetic { world, n_train, .. } => {
            let w = sample_world(world, derive_seed(seed, CTX_WORLD, 0))?;
            let ds = sample_dataset(&w, *n_train, None, derive_seed(seed, CTX_DATA, 0))?
                .named("synthetic-iid");
            (ds, Some(w))
        }
    };

    match &cfg.protocol {
        ProtocolSection::Iid {} => {
            let (train, valid, iid_test) = split_dataset(
                &source,
                cfg.split.train,
                cfg.split.valid,
                derive_seed(seed, CTX_SPLIT, 0),
            )?;
            Ok(ProtocolData {
                train,
                valid,
                iid_test,
                weak_rule: None,
                weak_groups: None,
                cells: Vec::new(),
                ood_stats: Vec::new(),
            })
        }
        ProtocolSection::OodEasy { affected_field, e, e_prime } => {
            let (train_iid, valid, iid_test) = split_dataset(
                &source,
                cfg.split.train,
                cfg.split.valid,
                derive_seed(seed, CTX_SPLIT, 0),
            )?;
            let field = field_index(&train_iid, affected_field)?;
            let rule = GroupRule::median_split(&train_iid, field)?;
            let mut ood_stats = Vec::new();
            let built = build_ood_easy(&train_iid, &rule, *e, derive_seed(seed, CTX_OOD, 0))?;
            ood_stats.push(OodStatsRow {
                seed,
                split: "train".into(),
                e_prime: None,
                stats: built.stats.clone(),
            });
            let train = built.dataset;
            let mut cells = Vec::with_capacity(e_prime.len());
            for (i, &ep) in e_prime.iter().enumerate() {
                let built =
                    build_ood_easy(&iid_test, &rule, ep, derive_seed(seed, CTX_OOD, 1 + i as u64))?;
                ood_stats.push(OodStatsRow {
                    seed,
                    split: "test".into(),
                    e_prime: Some(ep),
                    stats: built.stats.clone(),
                });
                let (adapt, eval) =
                    split_two(&built.dataset, 0.5, derive_seed(seed, CTX_ADAPT, i as u64));
                cells.push(Cell { e_prime: Some(ep), adapt, eval });
            }
            Ok(ProtocolData {
                train,
                valid,
                iid_test,
                weak_rule: Some(rule),
                weak_groups: Some(2),
                cells,
                ood_stats,
            })
        }
        ProtocolSection::OodHard { train_behavior, test_behavior } => {
            let (train_b, test_b) = build_ood_hard(&source, train_behavior, test_behavior)?;
            let (train, valid, iid_test) = split_dataset(
                &train_b,
                cfg.split.train,
                cfg.split.valid,
                derive_seed(seed, CTX_SPLIT, 0),
            )?;
            let (adapt, eval) = split_two(&test_b, 0.5, derive_seed(seed, CTX_ADAPT, 0));
            Ok(ProtocolData {
                train,
                valid,
                iid_test,
                weak_rule: None,
                weak_groups: None,
                cells: vec![Cell { e_prime: None, adapt, eval }],
                ood_stats: Vec::new(),
            })
        }
        ProtocolSection::Intervention {
            target_interest,
            flip_click_weight,
            new_prior,
            weak_field,
        } => {
            let world = world.expect("validated: intervention implies synthetic data");
            let n_ood = match &cfg.data {
                DataSection::Synthetic { n_ood, .. } => *n_ood,
                DataSection::Csv { .. } => unreachable!("validated"),
            };
            if *target_interest >= world.n_interests() {
                return Err(Error::Config(format!(
                    "protocol.target_interest {} out of range for {} interests",
                    target_interest,
                    world.n_interests()
                )));
            }
            let mut iv = if *flip_click_weight {
                Intervention::flip_click_weight(&world, *target_interest)
            } else {
                Intervention { target: *target_interest, new_prior: None, new_click_weight: None }
            };
            iv.new_prior = new_prior.clone();

            let (train, valid, iid_test) = split_dataset(
                &source,
                cfg.split.train,
                cfg.split.valid,
                derive_seed(seed, CTX_SPLIT, 0),
            )?;
            // Weak supervision groups on a field the intervened interest
            // emits, so the shifted mechanism is pinned to the last row.
            let field = match weak_field {
                Some(name) => field_index(&train, name)?,
                None => *world
                    .fields_of(*target_interest)
                    .first()
                    .expect("world validation guarantees owned fields"),
            };
            let rule = GroupRule::median_split(&train, field)?;

            let shifted = sample_dataset(&world, n_ood, Some(&iv), derive_seed(seed, CTX_DATA, 1))?
                .named("synthetic-shifted");
            let (adapt, eval) = split_two(&shifted, 0.5, derive_seed(seed, CTX_ADAPT, 0));
            Ok(ProtocolData {
                train,
                valid,
                iid_test,
                weak_rule: Some(rule),
                weak_groups: Some(2),
                cells: vec![Cell { e_prime: None, adapt, eval }],
                ood_stats: Vec::new(),
            })
        }
    }
}

enum BuiltModel {
    Disectr(DisectrModel),
    Fm(FmModel),
    Mlp(MlpModel),
}

impl BuiltModel {
    fn as_dyn(&mut self) -> &mut dyn PairwiseModel {
        match self {
            BuiltModel::Disectr(m) => m,
            BuiltModel::Fm(m) => m,
            BuiltModel::Mlp(m) => m,
        }
    }

    fn as_ref_dyn(&self) -> &dyn PairwiseModel {
        match self {
            BuiltModel::Disectr(m) => m,
            BuiltModel::Fm(m) => m,
            BuiltModel::Mlp(m) => m,
        }
    }

    fn attention(&self, ds: &Dataset, limit: usize) -> Option<Vec<f64>> {
        match self {
            BuiltModel::Disectr(m) => Some(m.attention_profile(ds, limit)),
            _ => None,
        }
    }
}

fn build_model(
    spec: &ModelSpec,
    cfg: &ExperimentConfig,
    data: &ProtocolData,
    seed: u64,
    model_idx: usize,
) -> Result<BuiltModel> {
    let init_seed = derive_seed(seed, CTX_INIT, model_idx as u64);
    let schema = &data.train.schema;
    Ok(match spec.resolve(cfg.scale(), &cfg.ablation, data.weak_groups) {
        ResolvedModel::Disectr(mc) => {
            BuiltModel::Disectr(DisectrModel::new(schema, mc, init_seed)?)
        }
        ResolvedModel::Fm(fc) => BuiltModel::Fm(FmModel::new(schema, fc, init_seed)?),
        ResolvedModel::Mlp(mc) => BuiltModel::Mlp(MlpModel::new(schema, mc, init_seed)?),
    })
}

#[derive(Default)]
struct SeedOutput {
    rows: Vec<CellRow>,
    transfers: Vec<TransferRow>,
    attention: Vec<AttentionRow>,
    training: Vec<TrainingRow>,
    ood_stats: Vec<OodStatsRow>,
}

fn metric_row(
    model: &str,
    seed: u64,
    phase: Phase,
    e_prime: Option<f64>,
    fraction: Option<f64>,
    ds: &Dataset,
    m: &(impl PairwiseModel + ?Sized),
) -> Result<CellRow> {
    let scored = score_dataset(m, ds);
    let summary = MetricsSummary::compute(&scored)?;
    Ok(CellRow {
        model: model.to_string(),
        seed,
        phase,
        e_prime,
        fraction,
        auc: summary.auc,
        gauc: summary.gauc,
        logloss: summary.logloss,
        n_eval: summary.n_records,
        excluded_users: summary.gauc_excluded_users,
    })
}

/// Records scanned for the aggregator attention profile.
const ATTENTION_LIMIT: usize = 512;

fn run_seed(cfg: &ExperimentConfig, seed: u64, ckpt_dir: &Path) -> Result<SeedOutput> {
    let data = build_protocol_data(cfg, seed)?;
    let mut out = SeedOutput { ood_stats: data.ood_stats.clone(), ..Default::default() };

    for (model_idx, spec) in cfg.models.iter().enumerate() {
        let label = spec.label();
        let mut model = build_model(spec, cfg, &data, seed, model_idx)?;
        let tc = TrainConfig {
            batch_size: cfg.batch_size(),
            max_epochs: cfg.train.max_epochs,
            steps_per_epoch: cfg.train.steps_per_epoch,
            optimizer: AdamConfig { lr: cfg.train.lr, ..AdamConfig::default() },
            patience: cfg.train.patience,
            seed: derive_seed(seed, CTX_TRAIN, model_idx as u64),
        };
        let outcome = train(
            model.as_dyn(),
            &data.train,
            &data.valid,
            data.weak_rule.as_ref(),
            &tc,
        )?;
        out.training.push(TrainingRow {
            model: label.to_string(),
            seed,
            epochs_run: outcome.epochs_run,
            best_epoch: outcome.best_epoch,
            best_val_auc: outcome.best_val_auc,
            fallback_pairs: outcome.fallback_pairs,
        });

        // Canonicalize through the checkpoint so every later evaluation and
        // fine-tune starts from the identical stored parameters.
        let ckpt = ckpt_dir.join(format!("{label}-seed{seed}.ckpt"));
        checkpoint::save(&ckpt, &model.as_ref_dyn().config_json(), model.as_ref_dyn().params())?;
        let stored = checkpoint::load(&ckpt)?;
        checkpoint::apply(model.as_dyn().params_mut(), &stored)?;

        out.rows.push(metric_row(
            label,
            seed,
            Phase::Iid,
            None,
            None,
            &data.iid_test,
            model.as_ref_dyn(),
        )?);
        if let Some(weights) = model.attention(&data.iid_test, ATTENTION_LIMIT) {
            out.attention.push(AttentionRow { model: label.to_string(), seed, weights });
        }

        for (cell_idx, cell) in data.cells.iter().enumerate() {
            checkpoint::apply(model.as_dyn().params_mut(), &stored)?;
            out.rows.push(metric_row(
                label,
                seed,
                Phase::ZeroShot,
                cell.e_prime,
                None,
                &cell.eval,
                model.as_ref_dyn(),
            )?);
            for (frac_idx, &fraction) in cfg.finetune.fractions.iter().enumerate() {
                checkpoint::apply(model.as_dyn().params_mut(), &stored)?;
                let ft = FineTuneConfig {
                    fraction,
                    epochs: cfg.finetune.epochs,
                    batch_size: cfg.finetune.batch_size,
                    optimizer: AdamConfig { lr: cfg.finetune.lr, ..AdamConfig::default() },
                    seed: derive_seed(
                        seed,
                        CTX_FINETUNE,
                        ((model_idx * cfg.models.len().max(1) + cell_idx) * 1024 + frac_idx) as u64,
                    ),
                };
                let ft_outcome =
                    fine_tune(model.as_dyn(), &cell.adapt, data.weak_rule.as_ref(), &ft)?;
                out.rows.push(metric_row(
                    label,
                    seed,
                    Phase::FineTuned,
                    cell.e_prime,
                    Some(fraction),
                    &cell.eval,
                    model.as_ref_dyn(),
                )?);
                out.transfers.push(TransferRow {
                    model: label.to_string(),
                    seed,
                    e_prime: cell.e_prime,
                    fraction,
                    subset_size: ft_outcome.subset_size,
                    steps_run: ft_outcome.steps_run,
                    group_distances: ft_outcome.group_distances,
                    prototype_rows: ft_outcome.prototype_rows,
                });
            }
        }
    }
    Ok(out)
}

fn merge(cfg: &ExperimentConfig, outputs: Vec<SeedOutput>) -> RunReport {
    let mut report = RunReport {
        name: cfg.name.clone(),
        protocol: cfg.protocol.kind_str().to_string(),
        scale: cfg.scale().as_str().to_string(),
        seeds: cfg.seeds.clone(),
        ablation: cfg.ablation,
        rows: Vec::new(),
        transfers: Vec::new(),
        attention: Vec::new(),
        training: Vec::new(),
        ood_stats: Vec::new(),
    };
    for out in outputs {
        report.rows.extend(out.rows);
        report.transfers.extend(out.transfers);
        report.attention.extend(out.attention);
        report.training.extend(out.training);
        report.ood_stats.extend(out.ood_stats);
    }
    report
}

/// Execute an experiment and write `report.json`, `cells.csv`, `series/`,
/// checkpoints and run metadata under the configured output directory.
/// Refuses to overwrite an existing report unless `force` is set; on a
/// partial failure the successful seeds' results are preserved next to a
/// `failure.txt` marker.
pub fn run_experiment(cfg: &ExperimentConfig, force: bool) -> Result<RunReport> {
    cfg.validate()?;
    let out_dir = &cfg.output_dir;
    let report_path = out_dir.join("report.json");
    if report_path.exists() && !force {
        return Err(Error::Config(format!(
            "{} already contains a report; re-run with --force to overwrite",
            out_dir.display()
        )));
    }
    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)
        .map_err(|e| Error::io(ckpt_dir.display().to_string(), e))?;
    // A fresh run invalidates any previous failure marker.
    let marker = out_dir.join("failure.txt");
    if marker.exists() {
        std::fs::remove_file(&marker).map_err(|e| Error::io(marker.display().to_string(), e))?;
    }

    let started = chrono::Utc::now();
    let clock = std::time::Instant::now();

    let results: Vec<(u64, Result<SeedOutput>)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| (seed, run_seed(cfg, seed, &ckpt_dir)))
        .collect();

    let mut outputs = Vec::with_capacity(results.len());
    let mut first_error: Option<(u64, Error)> = None;
    for (seed, result) in results {
        match result {
            Ok(out) => outputs.push(out),
            Err(e) => {
                if first_error.is_none() {
                    first_error = Some((seed, e));
                }
            }
        }
    }
    let report = merge(cfg, outputs);

    if let Some((seed, error)) = first_error {
        // Preserve partial results with an explicit marker.
        super::report::write_report(&report, out_dir)?;
        if !report.rows.is_empty() {
            super::report::write_tables(&report, out_dir)?;
        }
        let text = format!("seed {seed} failed: {error}\n");
        std::fs::write(&marker, text).map_err(|e| Error::io(marker.display().to_string(), e))?;
        return Err(error);
    }

    super::report::write_report(&report, out_dir)?;
    super::report::write_tables(&report, out_dir)?;
    let finished = chrono::Utc::now();
    super::report::write_meta(
        &RunMeta {
            started_at: started.to_rfc3339(),
            finished_at: finished.to_rfc3339(),
            duration_seconds: clock.elapsed().as_secs_f64(),
        },
        out_dir,
    )?;
    Ok(report)
}

/// Name of the subdirectory an ablation run writes under.
pub fn ablation_subdir(flags: crate::experiment::config::AblationFlags) -> String {
    let suffix = flags.suffix();
    if suffix.is_empty() {
        "ablate-full".to_string()
    } else {
        format!("ablate-{suffix}")
    }
}

/// Run the experiment with selected model components disabled, writing under
/// an ablation-named subdirectory of the configured output.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    flags: crate::experiment::config::AblationFlags,
    force: bool,
) -> Result<RunReport> {
    let mut cfg = cfg.clone();
    cfg.ablation = flags;
    cfg.output_dir = cfg.output_dir.join(ablation_subdir(flags));
    run_experiment(&cfg, force)
}

/// Re-emit `cells.csv` and `series/` from an existing `report.json`.
pub fn regenerate_tables(report_path: &Path) -> Result<PathBuf> {
    let report = super::report::load_report(report_path)?;
    let dir = report_path
        .parent()
        .map(Path::to_path_buf)
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| PathBuf::from("."));
    super::report::write_tables(&report, &dir)?;
    Ok(dir)
}
