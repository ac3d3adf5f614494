//! Command-line front end for the disentangled-interest CTR experiment
//! suite: runs TOML-described experiments and ablations, samples synthetic
//! interaction datasets, and regenerates report tables.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data/io error,
//! 4 numerical failure.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use disectr_core::data::write_csv;
use disectr_core::derive_seed;
use disectr_core::experiment::config::{AblationFlags, Scale};
use disectr_core::experiment::{
    ablation_subdir, apply_overrides, load_config, regenerate_tables, run_ablation,
    run_experiment, ExperimentConfig, Overrides, RunReport,
};
use disectr_core::synth::{sample_dataset, sample_world, WorldConfig};
use disectr_core::Result;

#[derive(Parser)]
#[command(
    name = "disectr",
    version,
    about = "Disentangled-interest CTR experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Experiment(ExperimentArgs),
    /// Run the experiment with chosen model components disabled.
    Ablate(AblateArgs),
    /// Sample a synthetic interaction dataset and write it as CSV.
    Synth(SynthArgs),
    /// Regenerate cells.csv and series/ tables from an existing report.
    Report(ReportArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the experiment TOML config.
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Run only this seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's scale preset.
    #[arg(long, value_enum)]
    scale: Option<ScaleArg>,
    /// Override the output directory (also settable via DISECTR_OUT).
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,
    /// Overwrite an existing report in the output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Model component(s) to disable, comma separated.
    #[arg(long, value_enum, required = true, value_delimiter = ',')]
    disable: Vec<Toggle>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Toggle {
    Prototypes,
    WeakSupervision,
    Discrepancy,
}

#[derive(Copy, Clone, ValueEnum)]
enum ScaleArg {
    /// Small dimensions for laptop-speed runs (d=8, batch 256).
    Desk,
    /// Publication-scale dimensions (d=32, batch 2048).
    Paper,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Desk => Scale::Desk,
            ScaleArg::Paper => Scale::Paper,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output CSV path.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Number of interaction records to sample.
    #[arg(long, default_value_t = 10_000)]
    records: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Latent interests in the generating world.
    #[arg(long, default_value_t = 4)]
    interests: usize,
    /// Observed feature fields (excluding the user id).
    #[arg(long, default_value_t = 8)]
    fields: usize,
    /// Distinct values per feature field.
    #[arg(long, default_value_t = 6)]
    cardinality: usize,
    /// Latent states per interest.
    #[arg(long, default_value_t = 3)]
    states: usize,
    #[arg(long, default_value_t = 300)]
    users: usize,
    /// Additive logit offset controlling the base click rate.
    #[arg(long, default_value_t = -0.2, allow_hyphen_values = true)]
    bias: f64,
}

#[derive(Args)]
struct ReportArgs {
    /// Path to an existing report.json.
    #[arg(long, value_name = "FILE")]
    report: PathBuf,
}

fn load_with_overrides(common: &CommonArgs) -> Result<ExperimentConfig> {
    let cfg = load_config(&common.config)?;
    let mut output_dir = common.output.clone();
    if output_dir.is_none() {
        if let Ok(dir) = std::env::var("DISECTR_OUT") {
            if !dir.is_empty() {
                output_dir = Some(PathBuf::from(dir));
            }
        }
    }
    let overrides = Overrides {
        seed: common.seed,
        scale: common.scale.map(Scale::from),
        output_dir,
    };
    Ok(apply_overrides(cfg, &overrides))
}

fn summarize(report: &RunReport, dir: &std::path::Path) {
    println!(
        "{}: protocol {} at {} scale, {} seed(s), {} metric rows",
        report.name,
        report.protocol,
        report.scale,
        report.seeds.len(),
        report.rows.len()
    );
    println!("report written to {}", dir.join("report.json").display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Experiment(args) => {
            let cfg = load_with_overrides(&args.common)?;
            let report = run_experiment(&cfg, args.common.force)?;
            summarize(&report, &cfg.output_dir);
        }
        Command::Ablate(args) => {
            let cfg = load_with_overrides(&args.common)?;
            let flags = AblationFlags {
                prototypes: !args.disable.contains(&Toggle::Prototypes),
                weak_supervision: !args.disable.contains(&Toggle::WeakSupervision),
                discrepancy: !args.disable.contains(&Toggle::Discrepancy),
            };
            let report = run_ablation(&cfg, flags, args.common.force)?;
            summarize(&report, &cfg.output_dir.join(ablation_subdir(flags)));
        }
        Command::Synth(args) => {
            let world_cfg = WorldConfig {
                n_interests: args.interests,
                n_feature_fields: args.fields,
                field_cardinality: args.cardinality,
                n_states: args.states,
                n_users: args.users,
                bias: args.bias,
            };
            let world = sample_world(&world_cfg, derive_seed(args.seed, 1, 0))?;
            let ds = sample_dataset(&world, args.records, None, derive_seed(args.seed, 2, 0))?;
            write_csv(&ds, &args.out)?;
            println!(
                "wrote {} records ({} fields, ctr {:.4}) to {}",
                ds.len(),
                ds.schema.fields.len(),
                ds.ctr(),
                args.out.display()
            );
        }
        Command::Report(args) => {
            let dir = regenerate_tables(&args.report)?;
            println!("tables regenerated under {}", dir.display());
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
