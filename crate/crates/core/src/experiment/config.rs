//! Declarative experiment configuration, parsed from TOML.
//!
//! A config names a data source, one or more models, a shift protocol and
//! the training/fine-tuning grids. Parsing keeps unknown keys illegal so
//! typos surface as addressed errors, and `desk`/`paper` scale presets fill
//! in embedding width and batch size when a config leaves them unset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{FmConfig, MlpConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ProjectionKind};
use crate::synth::WorldConfig;

/// Preset bundle for hyperparameters the config leaves unset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Paper,
}

impl Scale {
    pub fn embed_dim(self) -> usize {
        match self {
            Scale::Desk => 8,
            Scale::Paper => 32,
        }
    }

    pub fn batch_size(self) -> usize {
        match self {
            Scale::Desk => 256,
            Scale::Paper => 2048,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Desk => "desk",
            Scale::Paper => "paper",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSection {
    /// Load interactions from a CSV file (with optional vocabulary sidecar).
    Csv { path: PathBuf },
    /// Sample interactions from a seeded causal world.
    Synthetic {
        #[serde(default)]
        world: WorldConfig,
        n_train: usize,
        /// Records sampled under the shifted mechanism; required by the
        /// intervention protocol.
        #[serde(default)]
        n_ood: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub train: f64,
    pub valid: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection { train: 0.8, valid: 0.1 }
    }
}

fn default_n_heads() -> usize {
    2
}
fn default_n_interests() -> usize {
    4
}
fn default_agg_heads() -> usize {
    4
}
fn default_tau() -> f64 {
    1.0
}
fn default_projection() -> ProjectionKind {
    ProjectionKind::Softmax
}
fn default_alpha() -> f64 {
    0.1
}
fn default_beta() -> f64 {
    0.1
}
fn default_lambda() -> f64 {
    1e-5
}
fn default_hidden() -> Vec<usize> {
    vec![64, 32]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisectrSpec {
    #[serde(default)]
    pub label: Option<String>,
    /// Defaults to the scale preset when unset.
    #[serde(default)]
    pub embed_dim: Option<usize>,
    #[serde(default = "default_n_heads")]
    pub n_heads: usize,
    #[serde(default = "default_n_interests")]
    pub n_interests: usize,
    #[serde(default = "default_agg_heads")]
    pub agg_heads: usize,
    #[serde(default)]
    pub active_queries: Option<usize>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_projection")]
    pub projection: ProjectionKind,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FmSpec {
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub latent_dim: Option<usize>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub embed_dim: Option<usize>,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Disectr(DisectrSpec),
    Fm(FmSpec),
    Mlp(MlpSpec),
}

impl ModelSpec {
    pub fn label(&self) -> &str {
        let (custom, kind) = match self {
            ModelSpec::Disectr(s) => (&s.label, "disectr"),
            ModelSpec::Fm(s) => (&s.label, "fm"),
            ModelSpec::Mlp(s) => (&s.label, "mlp"),
        };
        custom.as_deref().unwrap_or(kind)
    }

    /// Concrete model hyperparameters with scale presets applied.
    /// `weak_groups` allocates the weak classifier for protocols that carry
    /// a supervision group rule (only meaningful for the disentangled model).
    pub fn resolve(
        &self,
        scale: Scale,
        ablation: &AblationFlags,
        weak_groups: Option<usize>,
    ) -> ResolvedModel {
        match self {
            ModelSpec::Disectr(s) => {
                let weak_on = ablation.weak_supervision;
                ResolvedModel::Disectr(ModelConfig {
                    embed_dim: s.embed_dim.unwrap_or_else(|| scale.embed_dim()),
                    n_heads: s.n_heads,
                    n_interests: s.n_interests,
                    agg_heads: s.agg_heads,
                    active_queries: s.active_queries,
                    tau: s.tau,
                    projection: s.projection,
                    use_prototypes: ablation.prototypes,
                    use_weak_supervision: weak_on,
                    n_weak_groups: if weak_on { weak_groups } else { None },
                    alpha: if ablation.discrepancy { s.alpha } else { 0.0 },
                    beta: if weak_on { s.beta } else { 0.0 },
                    lambda: s.lambda,
                })
            }
            ModelSpec::Fm(s) => ResolvedModel::Fm(FmConfig {
                latent_dim: s.latent_dim.unwrap_or_else(|| scale.embed_dim()),
                lambda: s.lambda,
            }),
            ModelSpec::Mlp(s) => ResolvedModel::Mlp(MlpConfig {
                embed_dim: s.embed_dim.unwrap_or_else(|| scale.embed_dim()),
                hidden: s.hidden.clone(),
                lambda: s.lambda,
            }),
        }
    }
}

pub enum ResolvedModel {
    Disectr(ModelConfig),
    Fm(FmConfig),
    Mlp(MlpConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_steps_per_epoch")]
    pub steps_per_epoch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_patience")]
    pub patience: usize,
}

fn default_max_epochs() -> usize {
    30
}
fn default_steps_per_epoch() -> usize {
    50
}
fn default_lr() -> f64 {
    1e-3
}
fn default_patience() -> usize {
    5
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: None,
            max_epochs: default_max_epochs(),
            steps_per_epoch: default_steps_per_epoch(),
            lr: default_lr(),
            patience: default_patience(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default = "default_ft_epochs")]
    pub epochs: usize,
    #[serde(default = "default_ft_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
}

fn default_fractions() -> Vec<f64> {
    vec![0.1]
}
fn default_ft_epochs() -> usize {
    3
}
fn default_ft_batch() -> usize {
    64
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            fractions: default_fractions(),
            epochs: default_ft_epochs(),
            batch_size: default_ft_batch(),
            lr: default_lr(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProtocolSection {
    /// Train and evaluate on the same distribution.
    Iid {},
    /// Label-shift resampling on a median-split field: train at low-group
    /// CTR `e`, evaluate at each `e_prime`.
    OodEasy {
        affected_field: String,
        #[serde(default = "default_e")]
        e: f64,
        e_prime: Vec<f64>,
    },
    /// Train on one behavior's labels, evaluate on another's.
    OodHard {
        train_behavior: String,
        test_behavior: String,
    },
    /// Synthetic mechanism change on one latent interest.
    Intervention {
        target_interest: usize,
        #[serde(default = "default_true")]
        flip_click_weight: bool,
        #[serde(default)]
        new_prior: Option<Vec<f64>>,
        /// Field whose median split drives weak supervision; defaults to the
        /// first field owned by the target interest.
        #[serde(default)]
        weak_field: Option<String>,
    },
}

fn default_e() -> f64 {
    0.6
}
fn default_true() -> bool {
    true
}

impl ProtocolSection {
    pub fn kind_str(&self) -> &'static str {
        match self {
            ProtocolSection::Iid {} => "iid",
            ProtocolSection::OodEasy { .. } => "ood_easy",
            ProtocolSection::OodHard { .. } => "ood_hard",
            ProtocolSection::Intervention { .. } => "intervention",
        }
    }
}

/// Which model components stay enabled for a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    #[serde(default = "default_true")]
    pub prototypes: bool,
    #[serde(default = "default_true")]
    pub weak_supervision: bool,
    #[serde(default = "default_true")]
    pub discrepancy: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags { prototypes: true, weak_supervision: true, discrepancy: true }
    }
}

impl AblationFlags {
    /// Directory-name suffix describing disabled components, empty when
    /// nothing is disabled.
    pub fn suffix(&self) -> String {
        let mut off = Vec::new();
        if !self.prototypes {
            off.push("prototypes");
        }
        if !self.weak_supervision {
            off.push("weak_supervision");
        }
        if !self.discrepancy {
            off.push("discrepancy");
        }
        off.join("-")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub scale: Option<Scale>,
    pub data: DataSection,
    #[serde(default)]
    pub split: SplitSection,
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub train: TrainSection,
    pub protocol: ProtocolSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub ablation: AblationFlags,
}

impl ExperimentConfig {
    pub fn scale(&self) -> Scale {
        self.scale.unwrap_or(Scale::Desk)
    }

    pub fn batch_size(&self) -> usize {
        self.train.batch_size.unwrap_or_else(|| self.scale().batch_size())
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("experiment name must not be empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds list must not be empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &s in &self.seeds {
            if !seen.insert(s) {
                return Err(Error::Config(format!("duplicate seed {s}")));
            }
        }
        if self.models.is_empty() {
            return Err(Error::Config("at least one model is required".into()));
        }
        let mut labels = std::collections::BTreeSet::new();
        for m in &self.models {
            if !labels.insert(m.label().to_string()) {
                return Err(Error::Config(format!(
                    "duplicate model label {:?}; set a distinct `label`",
                    m.label()
                )));
            }
        }
        if !(self.split.train > 0.0
            && self.split.valid > 0.0
            && self.split.train + self.split.valid < 1.0)
        {
            return Err(Error::Config(format!(
                "split fractions train={} valid={} must be positive and sum below 1",
                self.split.train, self.split.valid
            )));
        }
        for (field, v) in [
            ("train.max_epochs", self.train.max_epochs),
            ("train.steps_per_epoch", self.train.steps_per_epoch),
            ("train.patience", self.train.patience),
            ("finetune.epochs", self.finetune.epochs),
            ("finetune.batch_size", self.finetune.batch_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{field} must be positive")));
            }
        }
        if self.train.batch_size == Some(0) {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.train.lr > 0.0) || !(self.finetune.lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.finetune.fractions.is_empty() {
            return Err(Error::Config("finetune.fractions must not be empty".into()));
        }
        for &f in &self.finetune.fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!(
                    "finetune fraction {f} outside (0, 1]"
                )));
            }
        }

        match &self.data {
            DataSection::Csv { path } => {
                if path.as_os_str().is_empty() {
                    return Err(Error::Config("data.path must not be empty".into()));
                }
            }
            DataSection::Synthetic { n_train, n_ood, .. } => {
                if *n_train < 2 {
                    return Err(Error::Config(format!(
                        "data.n_train {n_train} too small to split"
                    )));
                }
                if matches!(self.protocol, ProtocolSection::Intervention { .. }) && *n_ood < 2 {
                    return Err(Error::Config(
                        "the intervention protocol requires data.n_ood >= 2".into(),
                    ));
                }
            }
        }

        match &self.protocol {
            ProtocolSection::Iid {} => {}
            ProtocolSection::OodEasy { affected_field, e, e_prime } => {
                if affected_field.is_empty() {
                    return Err(Error::Config("protocol.affected_field must not be empty".into()));
                }
                if !(*e > 0.0 && *e < 1.0) {
                    return Err(Error::Config(format!(
                        "protocol.e {e} outside (0, 1)"
                    )));
                }
                if e_prime.is_empty() {
                    return Err(Error::Config("protocol.e_prime must not be empty".into()));
                }
                for &ep in e_prime {
                    if !(ep > 0.0 && ep < 1.0) {
                        return Err(Error::Config(format!(
                            "protocol.e_prime value {ep} outside (0, 1)"
                        )));
                    }
                }
            }
            ProtocolSection::OodHard { train_behavior, test_behavior } => {
                if train_behavior == test_behavior {
                    return Err(Error::Config(format!(
                        "protocol behaviors must differ, both are {train_behavior:?}"
                    )));
                }
                if matches!(self.data, DataSection::Synthetic { .. }) {
                    return Err(Error::Config(
                        "the ood_hard protocol needs csv data with a behavior column".into(),
                    ));
                }
            }
            ProtocolSection::Intervention { flip_click_weight, new_prior, .. } => {
                if !matches!(self.data, DataSection::Synthetic { .. }) {
                    return Err(Error::Config(
                        "the intervention protocol requires synthetic data".into(),
                    ));
                }
                if !*flip_click_weight && new_prior.is_none() {
                    return Err(Error::Config(
                        "intervention changes nothing: enable flip_click_weight or set new_prior"
                            .into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Parse a TOML experiment config; syntax and schema violations carry the
/// file path and the parser's line/column address.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Command-line and environment overrides applied after parsing.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    /// Replaces the seed list with a single seed.
    pub seed: Option<u64>,
    pub scale: Option<Scale>,
    /// Output directory override (the `DISECTR_OUT` environment variable).
    pub output_dir: Option<PathBuf>,
}

pub fn apply_overrides(mut cfg: ExperimentConfig, ov: &Overrides) -> ExperimentConfig {
    if let Some(seed) = ov.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(scale) = ov.scale {
        cfg.scale = Some(scale);
    }
    if let Some(dir) = &ov.output_dir {
        cfg.output_dir = dir.clone();
    }
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        name = "demo"
        seeds = [0, 1]
        output_dir = "out"

        [data]
        kind = "synthetic"
        n_train = 2000
        n_ood = 500

        [[models]]
        kind = "disectr"
        n_interests = 3

        [protocol]
        kind = "iid"
    "#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.name, "demo");
        assert_eq!(cfg.scale(), Scale::Desk);
        assert_eq!(cfg.batch_size(), 256);
        assert_eq!(cfg.split, SplitSection { train: 0.8, valid: 0.1 });
        assert_eq!(cfg.finetune.fractions, vec![0.1]);
        assert_eq!(cfg.protocol.kind_str(), "iid");
        assert!(cfg.ablation.prototypes);
        match &cfg.models[0] {
            ModelSpec::Disectr(s) => {
                assert_eq!(s.n_interests, 3);
                assert_eq!(s.n_heads, 2);
                assert_eq!(s.embed_dim, None);
            }
            other => panic!("wrong model: {other:?}"),
        }
    }

    #[test]
    fn paper_scale_changes_presets() {
        let text = MINIMAL.replace("output_dir = \"out\"", "output_dir = \"out\"\nscale = \"paper\"");
        let cfg = parse_config(&text).unwrap();
        assert_eq!(cfg.batch_size(), 2048);
        match cfg.models[0].resolve(cfg.scale(), &cfg.ablation, None) {
            ResolvedModel::Disectr(m) => assert_eq!(m.embed_dim, 32),
            _ => unreachable!(),
        }
    }

    #[test]
    fn unknown_keys_are_addressed_errors() {
        let text = MINIMAL.replace("n_train = 2000", "n_train = 2000\nn_trian = 5");
        let err = parse_config(&text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("n_trian"), "{msg}");
        assert!(msg.contains("line"), "parser address missing: {msg}");
    }

    #[test]
    fn semantic_validation_catches_bad_grids() {
        for (from, to) in [
            ("seeds = [0, 1]", "seeds = []"),
            ("seeds = [0, 1]", "seeds = [3, 3]"),
            ("kind = \"iid\"", "kind = \"ood_easy\"\naffected_field = \"f0\"\ne = 1.5\ne_prime = [0.2]"),
            ("kind = \"iid\"", "kind = \"ood_easy\"\naffected_field = \"f0\"\ne_prime = []"),
            ("kind = \"iid\"", "kind = \"ood_hard\"\ntrain_behavior = \"click\"\ntest_behavior = \"click\""),
        ] {
            let text = MINIMAL.replace(from, to);
            assert!(parse_config(&text).is_err(), "{to}");
        }
    }

    #[test]
    fn intervention_requires_synthetic_data_and_a_real_change() {
        let good = MINIMAL.replace(
            "kind = \"iid\"",
            "kind = \"intervention\"\ntarget_interest = 1",
        );
        let cfg = parse_config(&good).unwrap();
        assert_eq!(cfg.protocol.kind_str(), "intervention");

        let noop = MINIMAL.replace(
            "kind = \"iid\"",
            "kind = \"intervention\"\ntarget_interest = 1\nflip_click_weight = false",
        );
        assert!(parse_config(&noop).is_err());

        let on_csv = good
            .replace("kind = \"synthetic\"", "kind = \"csv\"\npath = \"d.csv\"")
            .replace("n_train = 2000", "")
            .replace("n_ood = 500", "");
        assert!(parse_config(&on_csv).is_err());
    }

    #[test]
    fn duplicate_model_labels_are_rejected_until_named() {
        let text = MINIMAL.replace(
            "[protocol]",
            "[[models]]\nkind = \"disectr\"\n\n[protocol]",
        );
        assert!(parse_config(&text).is_err());
        let text = MINIMAL.replace(
            "[protocol]",
            "[[models]]\nkind = \"disectr\"\nlabel = \"disectr-m8\"\nn_interests = 8\n\n[protocol]",
        );
        let cfg = parse_config(&text).unwrap();
        assert_eq!(cfg.models[1].label(), "disectr-m8");
    }

    #[test]
    fn overrides_replace_seeds_scale_and_output() {
        let cfg = parse_config(MINIMAL).unwrap();
        let ov = Overrides {
            seed: Some(7),
            scale: Some(Scale::Paper),
            output_dir: Some(PathBuf::from("/tmp/elsewhere")),
        };
        let cfg = apply_overrides(cfg, &ov);
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.scale(), Scale::Paper);
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/elsewhere"));
    }

    #[test]
    fn ablation_flags_disable_model_components() {
        let flags = AblationFlags { prototypes: false, weak_supervision: false, discrepancy: false };
        let spec = ModelSpec::Disectr(DisectrSpec {
            label: None,
            embed_dim: Some(4),
            n_heads: 1,
            n_interests: 2,
            agg_heads: 2,
            active_queries: None,
            tau: 1.0,
            projection: ProjectionKind::Softmax,
            alpha: 0.3,
            beta: 0.2,
            lambda: 0.0,
        });
        match spec.resolve(Scale::Desk, &flags, Some(2)) {
            ResolvedModel::Disectr(m) => {
                assert!(!m.use_prototypes);
                assert!(!m.use_weak_supervision);
                assert_eq!(m.n_weak_groups, None);
                assert_eq!(m.alpha, 0.0);
                assert_eq!(m.beta, 0.0);
            }
            _ => unreachable!(),
        }
        assert_eq!(flags.suffix(), "prototypes-weak_supervision-discrepancy");
        assert_eq!(AblationFlags::default().suffix(), "");
    }
}
