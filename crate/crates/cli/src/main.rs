//! `motext`: synthetic data, training, embedding, evaluation and querying.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use motext::data::{unify, Dataset, Split, SynthConfig};
use motext::eval::{evaluate, format_table, report_records, EvalOptions, Protocol};
use motext::gradsuite::gradient_suite;
use motext::loss::SwipeConfig;
use motext::model::{checkpoint_hash, RetrievalModel};
use motext::store::{build_db, query, DbMetadata, EmbeddingDB};
use motext::text::{EmbeddingTeacher, Teacher};
use motext::train::{train, GradCheckConfig, LossMode, TrainConfig, TrainSink};
use motext::{DType, Error, Result};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "motext", version, about = "Text-to-motion retrieval toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (manifest plus motion files).
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of pairs.
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Number of motion archetypes.
        #[arg(long, default_value_t = 4)]
        k: usize,
        /// Pairs assigned to the test split (taken from the end).
        #[arg(long, default_value_t = 0)]
        test: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate manifests and every motion file they reference.
    Prepare {
        /// Comma-separated manifest paths.
        #[arg(long, value_delimiter = ',', required = true)]
        datasets: Vec<PathBuf>,
    },
    /// Train a model; writes checkpoint.motc and history.jsonl to --out.
    Train {
        /// TOML training config; the desk preset when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// cccl | infonce_f | cccl_self | cccl_supervised | infonce
        #[arg(long)]
        loss: Option<LossMode>,
        /// Lambda schedule as start:end epochs.
        #[arg(long)]
        swipe: Option<SwipeConfig>,
        /// Comma-separated manifest paths; two or more train jointly.
        #[arg(long, value_delimiter = ',')]
        datasets: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed one split's motions into an embedding database.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        /// Creation timestamp stored in the metadata; defaults to now.
        /// Fix it to make rebuilds byte-identical.
        #[arg(long)]
        created: Option<String>,
    },
    /// Evaluate retrieval on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, value_delimiter = ',', default_value = "all,all_threshold,dissimilar,small_batches")]
        protocols: Vec<Protocol>,
        #[arg(long, default_value_t = 0.95)]
        threshold: f64,
        #[arg(long, default_value_t = 100)]
        subset: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Teacher embedding file for text similarities; TF-IDF otherwise.
        #[arg(long)]
        teacher_embeddings: Option<PathBuf>,
        /// Also write one JSON record per direction here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-k motions for a text query.
    Query {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Checkpoint to encode the text with; defaults to the one recorded
        /// in the database. Its hash must match the database.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference gradient checks on small f64 instances.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    pin_kernel_threads();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The tensor backend sizes its pool from the host's physical cores, which
/// ignores container CPU quotas. Use the quota-aware count unless set.
fn pin_kernel_threads() {
    if std::env::var_os("RAYON_NUM_THREADS").is_none() {
        let n = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        std::env::set_var("RAYON_NUM_THREADS", n.to_string());
        std::env::set_var("CANDLE_NUM_THREADS", n.to_string());
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        e if e.is_numeric() => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { seed, n, k, test, out } => {
            let ds = SynthConfig::new(seed, n, k).with_test_pairs(test).generate()?;
            let manifest = ds.save(&out)?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::Prepare { datasets } => {
            let ds = load_datasets(&datasets)?;
            for split in [Split::Train, Split::Val, Split::Test] {
                println!("{:<5} {}", format!("{split:?}").to_lowercase(), ds.split(split).len());
            }
            println!("ok: {} pairs in {}", ds.len(), ds.name());
            Ok(())
        }
        Command::Train { config, seed, epochs, batch_size, lr, loss, swipe, datasets, out } => {
            let mut cfg = match &config {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
                    TrainConfig::from_toml(&text)?
                }
                None => TrainConfig::desk(),
            };
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = epochs {
                cfg.epochs = v;
            }
            if let Some(v) = batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = lr {
                cfg.learning_rate = v;
            }
            if let Some(v) = loss {
                cfg.loss_mode = v;
            }
            if let Some(v) = swipe {
                cfg.swipe = v;
            }
            if !datasets.is_empty() {
                cfg.datasets = datasets;
            }
            if cfg.datasets.is_empty() {
                return Err(Error::Config("no datasets given (--datasets or the config file)".into()));
            }
            cfg.validate()?;
            let ds = load_datasets(&cfg.datasets)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Config(format!("cannot create {}: {e}", out.display())))?;
            std::fs::write(out.join("config.toml"), cfg.to_toml()?)
                .map_err(|e| Error::Config(format!("cannot write config: {e}")))?;
            let result = train(&cfg, &ds, &TrainSink { out_dir: Some(out.clone()) })?;
            if let Some(last) = result.epoch_losses.last() {
                println!("final loss {last:.5}");
            }
            println!("{}", out.join("checkpoint.motc").display());
            Ok(())
        }
        Command::Embed { checkpoint, dataset, split, out, created } => {
            let model = RetrievalModel::load(&checkpoint, DType::F32)?;
            let ds = Dataset::load_manifest(&dataset)?;
            let meta = DbMetadata {
                checkpoint_sha256: checkpoint_hash(&checkpoint)?,
                checkpoint_path: absolute(&checkpoint),
                dataset: ds.name(),
                split: format!("{split:?}").to_lowercase(),
                created: created.unwrap_or_else(now),
            };
            let db = build_db(&model, &ds, split, meta)?;
            db.save(&out)?;
            println!("{} entries -> {}", db.len(), out.display());
            Ok(())
        }
        Command::Eval { checkpoint, dataset, split, protocols, threshold, subset, batch, seed, teacher_embeddings, out } => {
            let model = RetrievalModel::load(&checkpoint, DType::F32)?;
            let ds = Dataset::load_manifest(&dataset)?;
            let teacher = teacher_embeddings
                .map(|p| EmbeddingTeacher::load(&p).map(Teacher::Embeddings))
                .transpose()?;
            let opts = EvalOptions { protocols, threshold, subset, batch, seed, ..EvalOptions::default() };
            let outcome = evaluate(&model, &ds, split, teacher.as_ref(), &opts)?;
            print!("{}", format_table(&outcome.reports));
            if let Some((map, ndcg)) = outcome.m2m {
                println!("m2m mAP {map:.4} nDCG {ndcg:.4}");
            }
            if let Some(path) = out {
                std::fs::write(&path, report_records(&outcome.reports, outcome.m2m))
                    .map_err(|e| Error::Invalid(format!("cannot write {}: {e}", path.display())))?;
            }
            Ok(())
        }
        Command::Query { db, text, k, checkpoint } => {
            let db = EmbeddingDB::load(&db)?;
            let ckpt = checkpoint.unwrap_or_else(|| PathBuf::from(&db.metadata.checkpoint_path));
            let hash = checkpoint_hash(&ckpt)?;
            if hash != db.metadata.checkpoint_sha256 {
                return Err(Error::Invalid(format!(
                    "checkpoint {} does not match the one the database was built with",
                    ckpt.display()
                )));
            }
            let model = RetrievalModel::load(&ckpt, DType::F32)?;
            for (rank, (id, score)) in query(&db, &text, &model, k)?.into_iter().enumerate() {
                println!("{}\t{id}\t{score:.6}", rank + 1);
            }
            Ok(())
        }
        Command::Gradcheck { tol } => {
            let cfg = GradCheckConfig { tol, ..GradCheckConfig::default() };
            let reports = gradient_suite(&cfg)?;
            let mut failed = Vec::new();
            for (name, r) in &reports {
                let status = if r.passed { "ok" } else { "FAIL" };
                println!("{name:<18} {status:<4} max rel error {:.3e} ({}, {} coords)", r.max_rel_error, r.worst, r.checked);
                if !r.passed {
                    failed.push(name.as_str());
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::Numeric(format!("gradient check failed for {}", failed.join(", "))))
            }
        }
    }
}

fn load_datasets(paths: &[PathBuf]) -> Result<Dataset> {
    let mut joint: Option<Dataset> = None;
    for path in paths {
        let mut ds = Dataset::load_manifest(path)?;
        ds.materialize()?;
        ds.validate()?;
        joint = Some(match joint {
            None => ds,
            Some(acc) => unify(&acc, &ds)?,
        });
    }
    joint.ok_or_else(|| Error::Config("no datasets given".into()))
}

fn absolute(p: &Path) -> String {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf()).display().to_string()
}

fn now() -> String {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    format!("unix:{secs}")
}
