//! Command-line front end.
//!
//! Exit status: 0 on success, 1 on validation errors (config, data, splits,
//! missing files), 2 on numeric faults and failed gradient checks.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{Manifest, RunConfig};
use crate::episodes::{episode_at, EpisodeRecord, Phase};
use crate::error::{Error, Result};
use crate::eval::{class_similarity_shift, evaluate, export_embeddings};
use crate::graph::{dataset_stats, write_tu_dataset};
use crate::model::Variant;
use crate::parallel::WORKERS_ENV;
use crate::trainer::{fit, Checkpoint, FitOutputs};
use crate::verify::{gradcheck_variant, GRADCHECK_STEP, GRADCHECK_TOL};

#[derive(Debug, Parser)]
#[command(name = "protoglyph", version, about = "Few-shot graph classification with prototypical networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config with flat dotted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, env = WORKERS_ENV)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub variant: Option<Variant>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on base classes with early stopping on validation accuracy.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on novel-class episodes.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out_dir>/best.json`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Write the configured dataset in TU format.
    MakeDataset {
        #[command(flatten)]
        common: Common,
    },
    /// Dump sampled episodes as JSON lines.
    MakeEpisodes {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "train")]
        phase: Phase,
        #[arg(long, default_value_t = 0)]
        epoch: u64,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Finite-difference check of the full model on a micro-episode.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Per-class similarity shift between two checkpoints.
    AnalyzeSimilarity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint_a: PathBuf,
        #[arg(long)]
        checkpoint_b: PathBuf,
        /// Original class labels; defaults to the novel split.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<i64>,
        #[arg(long, default_value_t = 100)]
        samples_per_class: usize,
    },
    /// Write support, query and prototype embeddings of test episodes.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p, &common.set)?,
        None => RunConfig::from_value(serde_json::Value::Object(Default::default()), &common.set)?,
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Some(v) = common.variant {
        cfg.variant = v;
    }
    cfg.train_config()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_checkpoint(path: Option<&PathBuf>, cfg: &RunConfig) -> Result<Checkpoint> {
    let p = path.cloned().unwrap_or_else(|| cfg.out_dir.join("best.json"));
    Checkpoint::load(&p)
}

fn check_width(ck: &Checkpoint, d_in: usize) -> Result<()> {
    if ck.model.d_in != d_in {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {} input features, dataset has {d_in}",
            ck.model.d_in
        )));
    }
    Ok(())
}

pub fn execute(cmd: &Command) -> Result<String> {
    match cmd {
        Command::Train { common } => {
            let cfg = resolve(common)?;
            let tc = cfg.train_config()?;
            let ds = cfg.load_dataset()?;
            let (split, skipped) = cfg.split(&ds)?;
            for c in skipped {
                eprintln!("note: class {c} is not present in {} and was skipped", ds.name);
            }
            Manifest::new("train", &cfg)?.write(&cfg.out_dir)?;
            let outputs = FitOutputs { dir: cfg.out_dir.clone() };
            let out = fit(&ds, &split, &tc, Some(&outputs), &mut |m| {
                eprintln!(
                    "epoch {:>3}  loss {:.4}  train acc {:.4}  val acc {:.4}  ({:.1}s)",
                    m.epoch, m.train_loss, m.train_acc, m.val_acc, m.seconds
                )
            })?;
            Ok(format!(
                "trained {} epochs, best val acc {:.4}, checkpoint {}",
                out.history.len(),
                out.best_val_accuracy,
                outputs.best_checkpoint().display()
            ))
        }
        Command::Evaluate {
            common,
            checkpoint,
            episodes,
        } => {
            let cfg = resolve(common)?;
            let ck = load_checkpoint(checkpoint.as_ref(), &cfg)?;
            let ds = cfg.load_dataset()?;
            check_width(&ck, ds.d_in)?;
            let (split, _) = cfg.split(&ds)?;
            let n = episodes.unwrap_or(cfg.eval_episodes);
            let report = evaluate(&ck.params()?, &ck.model, &ds, &split, &cfg.spec()?, n, cfg.workers)?;
            Manifest::new("evaluate", &cfg)?.write(&cfg.out_dir)?;
            let path = cfg.out_dir.join("eval_report.json");
            write(&path, &serde_json::to_string_pretty(&report)?)?;
            Ok(format!(
                "{} episodes: accuracy {:.2} ± {:.2} (std), ci95 ± {:.2}; report {}",
                report.n_episodes,
                100.0 * report.mean_accuracy,
                100.0 * report.std,
                100.0 * report.ci95_halfwidth,
                path.display()
            ))
        }
        Command::MakeDataset { common } => {
            let cfg = resolve(common)?;
            let ds = cfg.load_dataset()?;
            let stats = dataset_stats(&ds)?;
            let dir = cfg.out_dir.join(&ds.name);
            write_tu_dataset(&ds, &dir, &ds.name)?;
            Manifest::new("make-dataset", &cfg)?.write(&cfg.out_dir)?;
            Ok(format!(
                "wrote {} ({} graphs, {} classes, avg {:.2} nodes / {:.2} edges) to {}",
                ds.name,
                stats.n_samples,
                stats.n_classes,
                stats.avg_nodes,
                stats.avg_edges,
                dir.display()
            ))
        }
        Command::MakeEpisodes {
            common,
            phase,
            epoch,
            count,
        } => {
            let cfg = resolve(common)?;
            let tc = cfg.train_config()?;
            let ds = cfg.load_dataset()?;
            let (split, _) = cfg.split(&ds)?;
            let n = count.unwrap_or(tc.counts.get(*phase));
            let mut text = String::new();
            for i in 0..n as u64 {
                let ep = episode_at(&split, *phase, &tc.spec, *epoch, i)?;
                let rec = EpisodeRecord::new(&ds, *phase, *epoch, i, &ep);
                let _ = writeln!(text, "{}", serde_json::to_string(&rec)?);
            }
            let path = cfg.out_dir.join(format!("episodes_{phase}_{epoch}.jsonl"));
            write(&path, &text)?;
            Manifest::new("make-episodes", &cfg)?.write(&cfg.out_dir)?;
            Ok(format!("wrote {n} {phase} episodes to {}", path.display()))
        }
        Command::Gradcheck { common } => {
            let cfg = resolve(common)?;
            let report = gradcheck_variant(cfg.variant, cfg.pooling, cfg.seed, GRADCHECK_STEP, GRADCHECK_TOL)?;
            let text = format!("{}: {report}", cfg.variant);
            if report.passed {
                Ok(text)
            } else {
                Err(Error::Verifier(text))
            }
        }
        Command::AnalyzeSimilarity {
            common,
            checkpoint_a,
            checkpoint_b,
            classes,
            samples_per_class,
        } => {
            let cfg = resolve(common)?;
            let a = Checkpoint::load(checkpoint_a)?;
            let b = Checkpoint::load(checkpoint_b)?;
            let ds = cfg.load_dataset()?;
            check_width(&a, ds.d_in)?;
            check_width(&b, ds.d_in)?;
            let classes = if classes.is_empty() {
                cfg.split_novel.clone()
            } else {
                classes.clone()
            };
            let shift = class_similarity_shift(
                &a.params()?,
                &a.model,
                &b.params()?,
                &b.model,
                &ds,
                &classes,
                *samples_per_class,
                cfg.seed,
            )?;
            write(&cfg.out_dir.join("similarity_shift.csv"), &shift.to_csv())?;
            write(
                &cfg.out_dir.join("similarity_shift.json"),
                &serde_json::to_string_pretty(&shift)?,
            )?;
            Manifest::new("analyze-similarity", &cfg)?.write(&cfg.out_dir)?;
            let mut msg = format!(
                "diff (A − B) per class: {:?}; all positive: {}",
                shift.diff,
                shift.all_positive()
            );
            if !shift.resampled.is_empty() {
                let _ = write!(msg, "; sampled with replacement: {:?}", shift.resampled);
            }
            Ok(msg)
        }
        Command::ExportEmbeddings {
            common,
            checkpoint,
            episodes,
        } => {
            let cfg = resolve(common)?;
            let ck = load_checkpoint(checkpoint.as_ref(), &cfg)?;
            let ds = cfg.load_dataset()?;
            check_width(&ck, ds.d_in)?;
            let (split, _) = cfg.split(&ds)?;
            let spec = cfg.spec()?;
            let eps = (0..*episodes as u64)
                .map(|i| Ok((i, episode_at(&split, Phase::Test, &spec, 0, i)?)))
                .collect::<Result<Vec<_>>>()?;
            let path = cfg.out_dir.join("embeddings.csv");
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            export_embeddings(&ck.params()?, &ck.model, &ds, &eps, &path)?;
            Manifest::new("export-embeddings", &cfg)?.write(&cfg.out_dir)?;
            Ok(format!("wrote embeddings of {episodes} episodes to {}", path.display()))
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NumericFault(_) | Error::Verifier(_) => 2,
        _ => 1,
    }
}

/// Parses `args` and runs the command.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli.command) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
