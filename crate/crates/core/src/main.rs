use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use pogmv::apog::TransferPlan;
use pogmv::data::{generate_synthetic_dataset, load_detections, read_clip, ClipRecord, Dataset, GeneratorSpec};
use pogmv::harness::{
    emit_report, run_guide_strategy_study, run_module_ablation, run_partition_sweep, similarity_diagnostic,
    train_partition, AblationSpec, Report, EVAL_SPLIT,
};
use pogmv::params::Checkpoint;
use pogmv::partition::partition_stats;
use pogmv::training::{evaluate, infer, load_checkpoint, train, TrainConfig};
use pogmv::{Error, Result};

/// Partial-order guided multi-view action recognition at desk scale.
#[derive(Parser)]
#[command(name = "pogmv", version)]
struct Cli {
    /// TOML file with optional `[data]`, `[train]` and `[ablation]` tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the generator seed (gen-data) or the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic altitude benchmark.
    GenData,
    /// Partition the train split into views by head-to-body ratio.
    Partition {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        views: Option<usize>,
    },
    /// Train one model.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = EVAL_SPLIT)]
        split: String,
    },
    /// Classify one clip file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        /// Head-to-body ratio of the clip.
        #[arg(long, conflicts_with = "detections")]
        ratio: Option<f64>,
        /// Detections file holding a record for `--sample-id`.
        #[arg(long, requires = "sample_id")]
        detections: Option<PathBuf>,
        #[arg(long)]
        sample_id: Option<String>,
    },
    /// Accuracy per view count.
    SweepViews {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
        views: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Accuracy per transfer plan against the no-transfer baseline.
    StudyGuides {
        #[arg(long)]
        manifest: PathBuf,
        /// Semicolon-separated plans such as `0>1;1>0`.
        #[arg(long, value_delimiter = ';', default_value = "0>1;1>0")]
        plans: Vec<TransferPlan>,
        #[arg(long, default_value_t = 2)]
        views: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Module ablation (baseline, VDG, APOG, both unless configured).
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Same-action versus cross-action feature similarity.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = EVAL_SPLIT)]
        split: String,
    },
    /// Re-emit report files from saved `reports.json` documents.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Transfer plan such as `0>1,1>2`, or `none`.
    #[arg(long)]
    plan: Option<TransferPlan>,
    #[arg(long)]
    no_apog: bool,
    #[arg(long)]
    no_vdg: bool,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    data: GeneratorSpec,
    /// Overrides on top of [`TrainConfig::desk`].
    train: toml::Table,
    ablation: Option<AblationSpec>,
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

/// Nested tables merge key by key; everything else replaces.
fn overlay(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => overlay(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// The desk preset with the file's overrides, fitted to the dataset.
fn train_config(file: &FileConfig, seed: Option<u64>, dataset: &Dataset) -> Result<TrainConfig> {
    let invalid = |e: &dyn std::fmt::Display| Error::InvalidConfig(format!("[train]: {e}"));
    let mut table = toml::Table::try_from(TrainConfig::desk()).map_err(|e| invalid(&e))?;
    overlay(&mut table, &file.train);
    let mut cfg: TrainConfig = table.try_into().map_err(|e| invalid(&e))?;
    cfg.model.num_classes = dataset.num_classes();
    cfg.model.clip_shape = dataset.manifest.clip_shape;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn print_json<T: Serialize>(value: &T) {
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(value).expect("serializable output"));
}

fn write_reports(reports: &[Report], out: &Path) -> Result<()> {
    let files = emit_report(reports, out)?;
    std::fs::write(out.join("reports.json"), serde_json::to_string_pretty(reports).expect("serializable reports") + "\n")?;
    let mut stdout = std::io::stdout().lock();
    for f in files {
        let _ = writeln!(stdout, "{}", f.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let file = load_config(cli.config.as_deref())?;
    let out = cli.out.as_path();
    match cli.command {
        Command::GenData => {
            let manifest = generate_synthetic_dataset(&file.data, cli.seed.unwrap_or(7), out)?;
            println!("{}", out.join(pogmv::data::MANIFEST_FILE).display());
            eprintln!("{} classes, splits {:?}", manifest.num_classes, manifest.splits.iter().map(|(k, v)| (k.as_str(), v.len())).collect::<Vec<_>>());
        }
        Command::Partition { manifest, views } => {
            let dataset = Dataset::load(&manifest)?;
            let n = match views { Some(n) => n, None => train_config(&file, cli.seed, &dataset)?.model.views };
            let assignment = train_partition(&dataset, n)?;
            let path = out.join("partition.jsonl");
            assignment.write(&path)?;
            let labels = assignment.entries.iter().map(|e| (e.sample_id.clone(), dataset.clips[&e.sample_id].label)).collect();
            print_json(&partition_stats(&assignment, &labels, dataset.num_classes()));
            eprintln!("wrote {}", path.display());
        }
        Command::Train(args) => {
            let dataset = Dataset::load(&args.manifest)?;
            let mut cfg = train_config(&file, cli.seed, &dataset)?;
            if let Some(n) = args.views {
                cfg.model.views = n;
            }
            if let Some(e) = args.epochs {
                cfg.epochs = e;
            }
            if args.plan.is_some() {
                cfg.plan = args.plan;
            }
            cfg.apog &= !args.no_apog;
            cfg.vdg &= !args.no_vdg;
            let assignment = train_partition(&dataset, cfg.model.views)?;
            let outcome = train(&cfg, &dataset, &assignment)?;
            outcome.write(out)?;
            assignment.write(&out.join("partition.jsonl"))?;
            let report = pogmv::training::evaluate_store(&outcome.store, &cfg.model, &dataset, EVAL_SPLIT, &assignment)?;
            std::fs::write(out.join("eval.json"), serde_json::to_string_pretty(&report).expect("serializable report") + "\n")?;
            print_json(&report);
        }
        Command::Eval { checkpoint, manifest, split } => {
            let (ck, meta) = load_checkpoint(&checkpoint)?;
            let dataset = Dataset::load(&manifest)?;
            print_json(&evaluate(&ck, &dataset, &split, &meta.partition())?);
        }
        Command::Infer { checkpoint, clip, ratio, detections, sample_id } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let frames = read_clip(&clip)?;
            let id = sample_id.unwrap_or_else(|| clip.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
            let detection = match detections {
                Some(path) => Some(
                    load_detections(&path)?
                        .into_iter()
                        .find(|d| d.sample_id == id)
                        .ok_or_else(|| Error::MissingDetection(id.clone()))?,
                ),
                None => None,
            };
            let record = ClipRecord { sample_id: id, frames, label: 0, true_altitude_tier: None };
            let p = infer(&ck, &record, detection.as_ref(), ratio)?;
            print_json(&serde_json::json!({ "class": p.class, "logits": p.logits }));
        }
        Command::SweepViews { manifest, views, seeds } => {
            let dataset = Dataset::load(&manifest)?;
            let base = train_config(&file, cli.seed, &dataset)?;
            let report = run_partition_sweep(&dataset, &views, &base, &seeds)?;
            write_reports(&[report.to_report("sweep-views")], out)?;
        }
        Command::StudyGuides { manifest, plans, views, seeds } => {
            let dataset = Dataset::load(&manifest)?;
            let mut base = train_config(&file, cli.seed, &dataset)?;
            base.model.views = views;
            let report = run_guide_strategy_study(&dataset, &plans, &base, &seeds)?;
            write_reports(&[report.to_report("study-guides")], out)?;
        }
        Command::Ablate { manifest, seeds } => {
            let dataset = Dataset::load(&manifest)?;
            let base = train_config(&file, cli.seed, &dataset)?;
            let spec = file.ablation.clone().unwrap_or_else(|| AblationSpec::standard(&seeds));
            let report = run_module_ablation(&dataset, &spec, &base)?;
            write_reports(&[report.to_report("ablate")], out)?;
        }
        Command::Diagnose { checkpoint, manifest, split } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let dataset = Dataset::load(&manifest)?;
            print_json(&similarity_diagnostic(&ck, &dataset, &split)?);
        }
        Command::Report { inputs } => {
            let mut reports = Vec::new();
            for path in inputs {
                if !path.exists() {
                    return Err(Error::MissingFile(path));
                }
                let text = std::fs::read_to_string(&path)?;
                let batch: Vec<Report> = serde_json::from_str(&text)
                    .map_err(|e| Error::MalformedFile { path: path.clone(), reason: e.to_string() })?;
                reports.extend(batch);
            }
            write_reports(&reports, out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {e}", e.name());
            ExitCode::FAILURE
        }
    }
}
