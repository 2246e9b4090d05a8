//! Command-line front end: dataset generation, training, evaluation,
//! ablation sweeps, and feature export.
//!
//! Grammar: `mlda <subcommand> --config <path> --out <dir> [--set key=value]...`
//! The environment variable `MLDA_SEED`, when set, overrides the config seed.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use mlda_core::data::{make_dataset, Dataset, GenConfig, Split};
use mlda_core::eval::{dump_features, evaluate_with_detections, load_detector, FeatureKind};
use mlda_core::train::{ablate, default_grid, run_training, TrainConfig};

pub const SEED_ENV_VAR: &str = "MLDA_SEED";

#[derive(Parser, Debug)]
#[command(
    name = "mlda",
    version,
    about = "Cross-domain shape detection: train a miniature detector adversarially against multi-level domain classifiers on a synthetic clean-to-fog benchmark"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a paired source/target dataset with fog domain shift
    GenData(GenDataArgs),
    /// Train a model on a generated dataset
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split (mAP@0.5)
    Eval(EvalArgs),
    /// Train and evaluate the default lambda/placement grid
    Ablate(AblateArgs),
    /// Export patch or instance features as CSV for offline plots
    DumpFeatures(DumpFeaturesArgs),
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// JSON config file; all fields default when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config field (repeatable), e.g. --set lambda=0
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let text = match &self.config {
            Some(path) => fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))?,
            None => "{}".to_string(),
        };
        let overrides: Vec<(String, String)> = self
            .set
            .iter()
            .map(|kv| {
                kv.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| anyhow::anyhow!("--set expects key=value, got {kv:?}"))
            })
            .collect::<anyhow::Result<_>>()?;
        let mut config = TrainConfig::from_json_with_overrides(&text, &overrides)?;
        if let Ok(seed) = std::env::var(SEED_ENV_VAR) {
            config.seed = seed
                .parse()
                .with_context(|| format!("{SEED_ENV_VAR} must be an unsigned integer, got {seed:?}"))?;
        }
        Ok(config)
    }
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output dataset directory
    #[arg(long)]
    pub out: PathBuf,
    /// Master seed override (takes precedence over the config seed)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Scene counts per split
    #[arg(long, default_value_t = 400)]
    pub source_train: usize,
    #[arg(long, default_value_t = 400)]
    pub target_train: usize,
    #[arg(long, default_value_t = 100)]
    pub source_val: usize,
    #[arg(long, default_value_t = 100)]
    pub target_val: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset directory (from gen-data)
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoint.mlda and metrics.csv
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Split: source_train, target_train, source_val, target_val
    #[arg(long, default_value = "target_val")]
    pub split: String,
    /// Output directory for ap.json and detections.jsonl
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory; one subdirectory per grid row plus ablation.csv
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DumpFeaturesArgs {
    /// Checkpoint to read parameters from
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Split to export
    #[arg(long, default_value = "target_val")]
    pub split: String,
    /// What to export: patch_level_<k> or instance
    #[arg(long)]
    pub what: String,
    /// Output CSV file
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Ablate(args) => run_ablate(args),
        Command::DumpFeatures(args) => dump(args),
    }
}

fn gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    let config = args.config.resolve()?;
    let gen = GenConfig {
        master_seed: args.seed.unwrap_or(config.seed),
        fog_intensity: config.fog_intensity,
        source_train: args.source_train,
        target_train: args.target_train,
        source_val: args.source_val,
        target_val: args.target_val,
    };
    let manifest = make_dataset(&gen, &args.out)?;
    let total: usize = manifest.splits.values().map(|v| v.len()).sum();
    println!(
        "wrote {total} scenes (seed {}, fog {}) to {}",
        gen.master_seed,
        gen.fog_intensity,
        args.out.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let config = args.config.resolve()?;
    let dataset = Dataset::open(&args.data)?;
    let summary = run_training(&config, &dataset, &args.out)?;
    let last = summary.epoch_means.last().copied().unwrap_or_default();
    println!(
        "trained {} iterations in {:.1}s; final-epoch mean L {:.4} (L_det {:.4}); checkpoint {}",
        summary.iterations,
        summary.wall_clock_s,
        last.total,
        last.det,
        summary.checkpoint.display()
    );
    Ok(())
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let dataset = Dataset::open(&args.data)?;
    let split = Split::parse(&args.split)?;
    let (result, detections) =
        mlda_core::eval::evaluate_checkpoint(&args.checkpoint, &dataset, split)?;
    fs::create_dir_all(&args.out)?;
    fs::write(
        args.out.join("ap.json"),
        serde_json::to_string_pretty(&result)?,
    )?;
    write_detections_jsonl(&args.out.join("detections.jsonl"), &detections)?;
    for (class_id, ap) in &result.per_class_ap {
        println!("class {class_id}: AP {ap:.4}");
    }
    println!("mAP@0.5 on {}: {:.4}", split.name(), result.mean_ap);
    Ok(())
}

fn write_detections_jsonl(
    path: &Path,
    detections: &[(u64, Vec<mlda_core::detector::Detection>)],
) -> anyhow::Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for (scene_id, dets) in detections {
        for d in dets {
            writeln!(
                out,
                "{}",
                serde_json::json!({
                    "scene_id": scene_id,
                    "box": [d.rect.x1, d.rect.y1, d.rect.x2, d.rect.y2],
                    "class_id": d.class_id,
                    "score": d.score,
                })
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

fn run_ablate(args: AblateArgs) -> anyhow::Result<()> {
    let config = args.config.resolve()?;
    let dataset = Dataset::open(&args.data)?;
    let grid = default_grid(&config);
    let rows = ablate(&grid, &dataset, &args.out)?;
    println!("label\tn\tlambda\tsource_val_map\ttarget_val_map\twall_clock_s");
    for r in &rows {
        println!(
            "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.1}",
            r.label, r.n_classifiers, r.lambda, r.source_val_map, r.target_val_map, r.wall_clock_s
        );
    }
    println!("table written to {}", args.out.join("ablation.csv").display());
    Ok(())
}

fn dump(args: DumpFeaturesArgs) -> anyhow::Result<()> {
    let dataset = Dataset::open(&args.data)?;
    let split = Split::parse(&args.split)?;
    let kind = FeatureKind::parse(&args.what)?;
    let (store, detector) = load_detector(&args.checkpoint)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut file = std::io::BufWriter::new(fs::File::create(&args.out)?);
    let rows = dump_features(&store, &detector, &dataset, split, kind, &mut file)?;
    file.flush()?;
    println!("wrote {rows} rows to {}", args.out.display());
    Ok(())
}

/// Flags accepted per subcommand, as (subcommand, [long flags]) pairs. Kept
/// in one place so a test can cross-check the parser table against --help.
pub fn expected_flags() -> Vec<(&'static str, Vec<&'static str>)> {
    vec![
        (
            "gen-data",
            vec!["config", "set", "out", "seed", "source-train", "target-train", "source-val", "target-val"],
        ),
        ("train", vec!["config", "set", "data", "out"]),
        ("eval", vec!["checkpoint", "data", "split", "out"]),
        ("ablate", vec!["config", "set", "data", "out"]),
        ("dump-features", vec!["checkpoint", "data", "split", "what", "out"]),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn parser_table_matches_expected_flags() {
        let cmd = Cli::command();
        for (name, flags) in expected_flags() {
            let sub = cmd
                .get_subcommands()
                .find(|s| s.get_name() == name)
                .unwrap_or_else(|| panic!("missing subcommand {name}"));
            let actual: Vec<String> = sub
                .get_arguments()
                .filter(|a| !a.is_global_set())
                .filter_map(|a| a.get_long().map(|l| l.to_string()))
                .filter(|l| l != "help" && l != "version")
                .collect();
            for f in &flags {
                assert!(actual.iter().any(|a| a == f), "{name} missing --{f}; has {actual:?}");
            }
            assert_eq!(actual.len(), flags.len(), "{name} has extra flags: {actual:?}");
        }
    }

    #[test]
    fn help_lists_every_flag() {
        let mut cmd = Cli::command();
        for (name, flags) in expected_flags() {
            let sub = cmd
                .get_subcommands_mut()
                .find(|s| s.get_name() == name)
                .unwrap();
            let help = sub.render_long_help().to_string();
            for f in flags {
                assert!(help.contains(&format!("--{f}")), "{name} help missing --{f}");
            }
        }
    }
}
