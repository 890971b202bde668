//! Command-line front end: `gen-data`, `pretrain`, `probe`, `inspect-mask`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{self, SyntheticSpec};
use crate::engine::Graph;
use crate::error::{Error, Result};
use crate::masking::{plan_csv_rows, PLAN_CSV_HEADER};
use crate::network::{Binding, Model};
use crate::pipeline::{self, derive_seed};
use crate::probe::{self, ProbeReport};
use crate::train::{self, eval_view, init_model, pipeline_config};

pub const PROBE_REPORT: &str = "probe.json";

#[derive(Debug, Parser)]
#[command(name = "hacm", version, about = "Cross-masking pre-training for skeleton sequences")]
pub struct Cli {
    /// Flat `key = value` config file; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic labeled dataset.
    GenData(GenData),
    /// Pre-train and write checkpoints, the training log and a config snapshot.
    Pretrain(RunPaths),
    /// Linear probe on a frozen checkpoint (or random encoders).
    Probe(ProbeArgs),
    /// Dump per-token criterion scores and unmask flags for one sample.
    InspectMask(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenData {
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Training sequences per class.
    #[arg(long, default_value_t = 64)]
    pub per_class: usize,
    #[arg(long, default_value_t = 16)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 96)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset file; labels go to a sidecar next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunPaths {
    /// Dataset file (overrides `data`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (overrides `out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub paths: RunPaths,
    /// Checkpoint to probe; omitted means `<out>/model.bin`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Also probe `probe_random_seeds` untrained encoders.
    #[arg(long)]
    pub random_baseline: bool,
    /// Probe an untrained encoder instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    pub untrained: bool,
    /// Permute labels within each split before probing.
    #[arg(long)]
    pub shuffle_labels: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub paths: RunPaths,
    /// Index of the sequence in the dataset file.
    #[arg(long)]
    pub sample: usize,
    /// Checkpoint supplying the weights; an untrained model otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

fn resolve_config(cli: &Cli, paths: Option<&RunPaths>) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(p) = paths {
        if let Some(d) = &p.data {
            cfg.data = d.clone();
        }
        if let Some(o) = &p.out {
            cfg.out = o.clone();
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(path: &Path) -> Result<Vec<data::LabeledSequence>> {
    if !path.exists() {
        return Err(Error::Config(format!("dataset {} does not exist", path.display())));
    }
    data::load(path)
}

fn load_or_init(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Model> {
    match checkpoint {
        Some(p) => probe::load_model(cfg, p),
        None => init_model(cfg),
    }
}

/// CSV of criterion scores and unmask flags for sample `sample` of
/// `dataset`, under the configured criteria and a seed derived from the
/// sample index.
pub fn inspect_mask(cfg: &RunConfig, model: &Model, dataset: &[data::LabeledSequence], sample: usize) -> Result<String> {
    let item = dataset
        .get(sample)
        .ok_or_else(|| Error::Invalid(format!("sample {sample} out of range for {} sequences", dataset.len())))?;
    let view = eval_view(cfg, &item.sequence)?;
    let pcfg = pipeline_config(cfg);
    let mut g = Graph::new();
    let mut bind = Binding::new(&model.store, true);
    let refined = pipeline::refine_sample(&mut g, &mut bind, model, &pcfg.torso, &view)?;
    let outcome = pipeline::plan_for(model, &pcfg, &refined, derive_seed(cfg.seed, &[7, sample as u64]))?;
    let mut csv = format!("{PLAN_CSV_HEADER}\n");
    plan_csv_rows(sample, &outcome, &mut csv);
    Ok(csv)
}

fn report_json(r: &ProbeReport) -> serde_json::Value {
    serde_json::json!({
        "classes": r.classes,
        "n_train": r.n_train,
        "n_test": r.n_test,
        "train_accuracy": r.train_accuracy,
        "test_accuracy": r.test_accuracy,
        "encoder_unchanged": r.checksum_before == r.checksum_after,
    })
}

/// Executes a parsed command line and returns a human-readable summary.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::GenData(a) => {
            let spec = SyntheticSpec {
                n_classes: a.classes,
                samples_per_class: a.per_class,
                test_per_class: a.test_per_class,
                frames: a.frames,
                seed: a.seed,
                ..SyntheticSpec::default()
            };
            let seqs = data::generate(&spec)?;
            if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            data::save(&a.out, &seqs)?;
            Ok(format!("wrote {} sequences to {}", seqs.len(), a.out.display()))
        }
        Command::Pretrain(p) => {
            let cfg = resolve_config(cli, Some(p))?;
            let dataset = load_dataset(&cfg.data)?;
            let summary = train::pretrain(&cfg, &dataset)?;
            let last = summary.logs.last().map(|l| l.report.total).unwrap_or(f64::NAN);
            Ok(format!(
                "{} steps, final total loss {last:.6}, {} checkpoint(s) under {}",
                summary.logs.len(),
                summary.checkpoints.len(),
                cfg.out.display()
            ))
        }
        Command::Probe(a) => {
            let cfg = resolve_config(cli, Some(&a.paths))?;
            let mut dataset = load_dataset(&cfg.data)?;
            if a.shuffle_labels {
                dataset = probe::shuffle_labels(&dataset, derive_seed(cfg.seed, &[8]));
            }
            let model = if a.untrained {
                init_model(&cfg)?
            } else {
                let path = a.checkpoint.clone().unwrap_or_else(|| cfg.out.join(train::FINAL_CHECKPOINT));
                probe::load_model(&cfg, &path)?
            };
            let report = probe::probe(&cfg, &model, &dataset)?;
            let mut json = serde_json::json!({ "probe": report_json(&report), "chance": report.chance() });
            let mut text = format!(
                "train accuracy {:.4}, test accuracy {:.4} (chance {:.4})",
                report.train_accuracy,
                report.test_accuracy,
                report.chance()
            );
            if a.random_baseline {
                let base = probe::random_baseline(&cfg, &dataset)?;
                let mean = base.iter().map(|r| r.test_accuracy).sum::<f64>() / base.len().max(1) as f64;
                json["random_encoders"] = base.iter().map(report_json).collect();
                json["random_mean_test_accuracy"] = mean.into();
                text.push_str(&format!(", random-encoder mean {mean:.4}"));
            }
            fs::create_dir_all(&cfg.out)?;
            fs::write(cfg.out.join(PROBE_REPORT), serde_json::to_vec_pretty(&json)?)?;
            Ok(text)
        }
        Command::InspectMask(a) => {
            let cfg = resolve_config(cli, Some(&a.paths))?;
            let dataset = load_dataset(&cfg.data)?;
            let model = load_or_init(&cfg, a.checkpoint.as_deref())?;
            let csv = inspect_mask(&cfg, &model, &dataset, a.sample)?;
            fs::create_dir_all(&cfg.out)?;
            let path = cfg.out.join(format!("mask_sample{}.csv", a.sample));
            fs::write(&path, csv)?;
            Ok(format!("wrote {}", path.display()))
        }
    }
}
