//! stancefuse: train, evaluate and probe the multimodal stance pipeline.
//!
//! Exit codes: 0 success, 2 configuration, 3 data, 4 transport,
//! 5 numeric/training, 1 anything else (clap usage errors also exit 2).

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use serde_json::Value;

use stancefuse_core::dataset::{self, fixture, load_manifest};
use stancefuse_core::encoders::vocab::Vocab;
use stancefuse_core::error::Error;
use stancefuse_core::experiment::{
    ablation_study, evaluate_pipeline, infer_one, train_pipeline, TrainedModel,
};
use stancefuse_core::metrics::roc_points;
use stancefuse_core::ParamStore;

use config::{resolve_config, CliConfig};

type Result<T> = std::result::Result<T, Error>;

#[derive(Parser)]
#[command(
    name = "stancefuse",
    version,
    about = "Multimodal stance detection: context extraction, fusion encoders, training and ablations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Targeted overrides on top of config file + environment.
#[derive(Args, Default)]
struct OverrideOpts {
    /// JSON config file (flat keys; see README)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<String>,
    #[arg(long)]
    image_root: Option<String>,
    /// Context cache file
    #[arg(long)]
    cache: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// full | wo_jtmo | wo_summarization | wo_captioning | wo_fusion
    #[arg(long)]
    variant: Option<String>,
    /// stub | external
    #[arg(long)]
    backend: Option<String>,
    /// Split evaluated by eval/ablate: train | dev | test
    #[arg(long)]
    split: Option<String>,
    /// Also write per-class ROC curve points as CSV
    #[arg(long, action = ArgAction::SetTrue)]
    emit_roc: bool,
}

impl OverrideOpts {
    fn pairs(&self) -> Vec<(String, Value)> {
        let mut out: Vec<(String, Value)> = Vec::new();
        let mut push = |key: &str, v: Option<Value>| {
            if let Some(v) = v {
                out.push((key.to_string(), v));
            }
        };
        push("manifest", self.manifest.clone().map(Value::from));
        push("image_root", self.image_root.clone().map(Value::from));
        push("cache", self.cache.clone().map(Value::from));
        push("seed", self.seed.map(Value::from));
        push("epochs", self.epochs.map(Value::from));
        push("lr", self.lr.map(Value::from));
        push("batch_size", self.batch_size.map(Value::from));
        push("variant", self.variant.clone().map(Value::from));
        push("backend", self.backend.clone().map(Value::from));
        push("eval_split", self.split.clone().map(Value::from));
        if self.emit_roc {
            push("emit_roc", Some(Value::from(true)));
        }
        out
    }

    fn resolve(&self, extra: &[(String, Value)]) -> Result<CliConfig> {
        let mut pairs = self.pairs();
        pairs.extend_from_slice(extra);
        resolve_config(self.config.as_deref(), &pairs, std::env::vars())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset fixture (manifest + images)
    Fixture {
        #[arg(long)]
        out: PathBuf,
        /// reference (full-size split statistics) | overfit (60 separable
        /// training examples)
        #[arg(long, default_value = "reference")]
        kind: String,
        /// Write only the manifest, no image files
        #[arg(long, action = ArgAction::SetTrue)]
        no_images: bool,
        #[command(flatten)]
        opts: OverrideOpts,
    },
    /// Train one pipeline variant; writes checkpoint, vocab and epoch log
    Train {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: OverrideOpts,
    },
    /// Evaluate a checkpoint on one split; writes a metrics report
    Eval {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Vocabulary file (default: vocab.json beside the checkpoint)
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[command(flatten)]
        opts: OverrideOpts,
    },
    /// Train and evaluate all five ablation variants on identical data
    Ablate {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: OverrideOpts,
    },
    /// Classify one (topic, transcript, image) triple
    Infer {
        /// Output directory for provenance files (prediction still prints
        /// to stdout)
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        topic: String,
        #[arg(long)]
        transcript: String,
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        opts: OverrideOpts,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Param(_) => 2,
        Error::Data(_) => 3,
        Error::Transport(_) => 4,
        Error::Numeric(_) => 5,
        _ => 1,
    }
}

fn write_resolved(cfg: &CliConfig, out: &Path, command: &str) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let path = out.join(format!("resolved_config.{command}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(cfg).expect("config serializes"))?;
    Ok(())
}

fn load_records(cfg: &CliConfig) -> Result<(Vec<dataset::ExampleRecord>, PathBuf)> {
    let manifest = cfg.manifest_path()?;
    let load = load_manifest(&manifest)?;
    for w in &load.warnings {
        eprintln!("warning: {w}");
    }
    Ok((load.records, cfg.image_root_path()?))
}

fn save_model(model: &TrainedModel, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    model.store.save(&out.join("checkpoint.bin"))?;
    model.vocab.save(&out.join("vocab.json"))?;
    let mut log = String::new();
    for record in &model.log {
        log.push_str(&serde_json::to_string(record).expect("epoch record serializes"));
        log.push('\n');
    }
    std::fs::write(out.join("train_log.jsonl"), log)?;
    std::fs::write(
        out.join("wiring.json"),
        serde_json::to_string_pretty(&model.wiring).expect("wiring serializes"),
    )?;
    Ok(())
}

fn load_model(
    cfg: &CliConfig,
    checkpoint_flag: Option<&Path>,
    vocab_flag: Option<&Path>,
) -> Result<(ParamStore, Vocab, PathBuf)> {
    let checkpoint = checkpoint_flag
        .map(PathBuf::from)
        .or_else(|| cfg.checkpoint.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::Config("no checkpoint given (--checkpoint or config)".into()))?;
    let vocab_path = vocab_flag.map(PathBuf::from).unwrap_or_else(|| {
        checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("vocab.json")
    });
    let store = ParamStore::load(&checkpoint)?;
    let vocab = Vocab::load(&vocab_path)?;
    Ok((store, vocab, checkpoint))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Fixture {
            out,
            kind,
            no_images,
            opts,
        } => {
            let cfg = opts.resolve(&[])?;
            let kind = match kind.as_str() {
                "reference" | "table2" => fixture::FixtureKind::Reference,
                "overfit" => fixture::FixtureKind::Overfit,
                other => {
                    return Err(Error::Config(format!(
                        "unknown fixture kind '{other}' (want reference|overfit)"
                    )))
                }
            };
            let spec = fixture::FixtureSpec {
                kind,
                seed: cfg.seed,
                with_images: !no_images,
            };
            let report = fixture::generate(&out, &spec)?;
            let stats = dataset::compute_split_stats(&report.records);
            write_resolved(&cfg, &out, "fixture")?;
            std::fs::write(
                out.join("fixture_stats.json"),
                serde_json::to_string_pretty(&stats).expect("stats serialize"),
            )?;
            println!(
                "wrote {} records ({} images) to {}",
                report.records.len(),
                report.images_written,
                report.manifest_path.display()
            );
            for split in dataset::ALL_SPLITS {
                println!(
                    "  {split}: videos {} support {} neutral {} oppose {} total {}",
                    stats.videos(split),
                    stats.count(split, dataset::StanceLabel::Support),
                    stats.count(split, dataset::StanceLabel::Neutral),
                    stats.count(split, dataset::StanceLabel::Oppose),
                    stats.total(split),
                );
            }
            Ok(())
        }

        Command::Train { out, opts } => {
            let cfg = opts.resolve(&[])?;
            let xc = cfg.to_experiment()?;
            let (records, image_root) = load_records(&cfg)?;
            write_resolved(&cfg, &out, "train")?;
            let model = train_pipeline(&records, &image_root, &xc, cfg.cache_path())?;
            save_model(&model, &out)?;
            for r in &model.log {
                println!(
                    "epoch {:>3}  train_loss {:.4}  train_acc {:.4}  dev_loss {}  dev_acc {}",
                    r.epoch,
                    r.train_loss,
                    r.train_acc,
                    r.dev_loss.map_or("-".into(), |v| format!("{v:.4}")),
                    r.dev_acc.map_or("-".into(), |v| format!("{v:.4}")),
                );
            }
            println!("checkpoint: {}", out.join("checkpoint.bin").display());
            Ok(())
        }

        Command::Eval {
            out,
            checkpoint,
            vocab,
            opts,
        } => {
            let cfg = opts.resolve(&[])?;
            let xc = cfg.to_experiment()?;
            let (records, image_root) = load_records(&cfg)?;
            let (store, vocab, _) = load_model(&cfg, checkpoint.as_deref(), vocab.as_deref())?;
            write_resolved(&cfg, &out, "eval")?;
            let split = cfg.eval_split()?;
            let outcome =
                evaluate_pipeline(&store, &vocab, &records, split, &image_root, &xc, cfg.cache_path())?;
            let json = serde_json::to_string_pretty(&outcome.report).expect("report serializes");
            std::fs::write(out.join("metrics.json"), &json)?;
            if cfg.emit_roc {
                for (idx, name) in ["SUPPORT", "OPPOSE", "NEUTRAL"].iter().enumerate() {
                    let mut csv = String::from("fpr,tpr\n");
                    for (fpr, tpr) in roc_points(&outcome.probs, &outcome.truth, idx) {
                        csv.push_str(&format!("{fpr},{tpr}\n"));
                    }
                    std::fs::write(out.join(format!("roc_{name}.csv")), csv)?;
                }
            }
            println!("{json}");
            Ok(())
        }

        Command::Ablate { out, opts } => {
            let cfg = opts.resolve(&[])?;
            let xc = cfg.to_experiment()?;
            let (records, image_root) = load_records(&cfg)?;
            write_resolved(&cfg, &out, "ablate")?;
            let split = cfg.eval_split()?;
            let (study, models) =
                ablation_study(&records, &image_root, &xc, split, cfg.cache_path())?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(
                out.join("ablation.json"),
                serde_json::to_string_pretty(&study).expect("study serializes"),
            )?;
            let tsv = study.to_tsv();
            std::fs::write(out.join("ablation.tsv"), &tsv)?;
            for (row, model) in study.rows.iter().zip(&models) {
                if let Some(model) = model {
                    let vdir = out.join("variants").join(row.variant.as_str());
                    save_model(model, &vdir)?;
                }
            }
            print!("{tsv}");
            Ok(())
        }

        Command::Infer {
            out,
            checkpoint,
            vocab,
            topic,
            transcript,
            image,
            opts,
        } => {
            let cfg = opts.resolve(&[])?;
            let xc = cfg.to_experiment()?;
            let (store, vocab, _) = load_model(&cfg, checkpoint.as_deref(), vocab.as_deref())?;
            let outcome = infer_one(
                &store,
                &vocab,
                &topic,
                &transcript,
                &image,
                &xc,
                cfg.cache_path(),
            )?;
            let json = serde_json::to_string_pretty(&outcome).expect("outcome serializes");
            if let Some(out) = out {
                write_resolved(&cfg, &out, "infer")?;
                std::fs::write(out.join("prediction.json"), &json)?;
            }
            println!("{json}");
            Ok(())
        }
    }
}
