//! Command-line surface: data generation, training, evaluation,
//! streaming, rate sweeps, and memory benchmarks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use star_core::data::{self, ManifestEntry};
use star_core::engine::{self, Policy, PolicyKind};
use star_core::error::{Result, StarError};
use star_core::model::{checkpoint, Method, TransducerModel};
use star_core::train::{self, config_file::ConfigMap, evaluate, EvalMode, TrainConfig};

#[derive(Parser)]
#[command(name = "star", about = "Streaming sequence transduction with anchor compression")]
struct Cli {
    /// Configuration file (UTF-8, one `key = value` per line, # comments).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory for artifacts and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (train/val/test splits + manifest).
    GenData,
    /// Run the staged training recipe on a generated corpus.
    Train {
        /// Directory produced by gen-data; defaults to generating the
        /// corpus in memory from the config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint in an offline mode.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Feature file or gen-data directory (test split).
        #[arg(long)]
        data: PathBuf,
        /// offline-full | offline-topk | fixed-seg | all-cache
        #[arg(long)]
        mode: String,
        /// Compression-rate override for offline-topk.
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Run the streaming engine over a test split.
    Stream {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// star | cif | stride | offline-topk
        #[arg(long)]
        policy: String,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        /// Frames per segment for the stride policy.
        #[arg(long)]
        width: Option<usize>,
        #[arg(long, default_value_t = 1)]
        wait_k: usize,
        #[arg(long)]
        rate: Option<f64>,
    },
    /// Evaluate one checkpoint across several compression rates.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated rates, e.g. 6,12,24,48.
        #[arg(long)]
        rates: String,
    },
    /// Print the analytic cache report for a configuration.
    Bench {
        #[arg(long)]
        tx: usize,
        #[arg(long)]
        rate: f64,
        #[arg(long)]
        dim: usize,
        #[arg(long, default_value_t = 1)]
        batch: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli_config: &Option<PathBuf>) -> Result<ConfigMap> {
    match cli_config {
        Some(path) => ConfigMap::load(path),
        None => Ok(ConfigMap::default()),
    }
}

fn require_out(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref()
        .ok_or_else(|| StarError::InvalidArgument("--out DIR is required for this command".into()))
}

fn load_split(data: &Path) -> Result<Vec<data::FeatureSequence>> {
    let path = if data.is_dir() { data.join("test.star") } else { data.to_path_buf() };
    data::read_features(&path)
}

fn write_records(out: Option<&Path>, records: &[star_core::metrics::MetricRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&r.to_json_line());
        text.push('\n');
    }
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("metrics.jsonl");
            std::fs::write(&path, &text)?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli.config)?;
    let fingerprint = config.fingerprint(cli.seed);
    match cli.command {
        Command::GenData => {
            let out = require_out(&cli.out)?;
            std::fs::create_dir_all(out)?;
            let data_cfg = config.data_config(cli.seed)?;
            let (n_train, n_val, n_test) = config.split_sizes()?;
            let mut entries = Vec::new();
            // one deterministic pool, split without overlap
            let all = data::generate(&data_cfg, n_train + n_val + n_test)?;
            let splits =
                [("train", 0, n_train), ("val", n_train, n_val), ("test", n_train + n_val, n_test)];
            for (name, offset, count) in splits {
                let path = out.join(format!("{name}.star"));
                let mut slice = all[offset..offset + count].to_vec();
                for s in slice.iter_mut() {
                    s.silence = None;
                }
                data::write_features(&path, &slice)?;
                entries.push(ManifestEntry {
                    path: format!("{name}.star"),
                    split: name.to_string(),
                    count,
                    fingerprint: fingerprint.clone(),
                });
            }
            data::write_manifest(&out.join("manifest.jsonl"), &entries)?;
            std::fs::write(out.join("fingerprint.txt"), &fingerprint)?;
            println!("wrote corpus to {} (fingerprint {fingerprint})", out.display());
            Ok(())
        }
        Command::Train { data } => {
            let out = require_out(&cli.out)?;
            let train_cfg: TrainConfig = config.train_config(cli.seed)?;
            let (train_set, val_set) = match data {
                Some(dir) => (
                    data::read_features(&dir.join("train.star"))?,
                    data::read_features(&dir.join("val.star"))?,
                ),
                None => {
                    let data_cfg = config.data_config(cli.seed)?;
                    let (n_train, n_val, _) = config.split_sizes()?;
                    let all = data::generate(&data_cfg, n_train + n_val)?;
                    let (t, v) = all.split_at(n_train);
                    (t.to_vec(), v.to_vec())
                }
            };
            let outcome = train::train_loop(&train_cfg, &train_set, &val_set, out)?;
            std::fs::write(out.join("fingerprint.txt"), &fingerprint)?;
            println!(
                "trained method={} rate={:.2} over {} steps; checkpoints: {}",
                train_cfg.method.as_str(),
                outcome.rate,
                outcome.log.len(),
                outcome
                    .checkpoints
                    .iter()
                    .map(|p| p.display().to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            );
            Ok(())
        }
        Command::Eval { ckpt, data, mode, rate } => {
            let model = checkpoint::load(&ckpt)?;
            let seqs = load_split(&data)?;
            let mode = match mode.as_str() {
                "offline-full" => EvalMode::OfflineFull,
                "offline-topk" => EvalMode::OfflineTopK {
                    rate: rate.ok_or_else(|| {
                        StarError::InvalidArgument("--rate is required for offline-topk".into())
                    })?,
                },
                "fixed-seg" => EvalMode::FixedSeg,
                "all-cache" => EvalMode::AllCache,
                other => {
                    return Err(StarError::InvalidArgument(format!("unknown eval mode `{other}`")))
                }
            };
            let report = evaluate(&model, mode, &seqs, 48, &fingerprint)?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
            write_records(cli.out.as_deref(), &report.records())
        }
        Command::Stream { ckpt, data, policy, beta, width, wait_k, rate } => {
            let model = checkpoint::load(&ckpt)?;
            let seqs = load_split(&data)?;
            let kind = match policy.as_str() {
                "star" => PolicyKind::StarThreshold { beta },
                "cif" => PolicyKind::CifThreshold { beta },
                "stride" => PolicyKind::FixedStride {
                    width: width.ok_or_else(|| {
                        StarError::InvalidArgument("--width is required for the stride policy".into())
                    })?,
                },
                "offline-topk" => PolicyKind::OfflineTopK {
                    rate: rate.ok_or_else(|| {
                        StarError::InvalidArgument("--rate is required for offline-topk".into())
                    })?,
                },
                other => {
                    return Err(StarError::InvalidArgument(format!("unknown policy `{other}`")))
                }
            };
            let policy = Policy::new(kind, wait_k);
            let report = evaluate(&model, EvalMode::Stream { policy }, &seqs, 48, &fingerprint)?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
            if let Some(out) = cli.out.as_deref() {
                std::fs::create_dir_all(out)?;
                // keep the first trace for inspection
                if let Some(seq) = seqs.first() {
                    let run = engine::run_stream(&model, policy, &seq.frames_f64(), 48)?;
                    run.trace.write_json_lines(&out.join("trace_0.jsonl"))?;
                }
            }
            write_records(cli.out.as_deref(), &report.records())
        }
        Command::Sweep { ckpt, data, rates } => {
            let model = checkpoint::load(&ckpt)?;
            let seqs = load_split(&data)?;
            let mut records = Vec::new();
            for part in rates.split(',') {
                let rate: f64 = part.trim().parse().map_err(|_| {
                    StarError::InvalidArgument(format!("bad rate `{part}` in --rates"))
                })?;
                let report =
                    evaluate(&model, EvalMode::OfflineTopK { rate }, &seqs, 48, &fingerprint)?;
                println!("{}", serde_json::to_string(&report).expect("report serializes"));
                records.extend(report.records());
            }
            write_records(cli.out.as_deref(), &records)
        }
        Command::Bench { tx, rate, dim, batch } => {
            if tx == 0 || dim == 0 || batch == 0 || rate < 1.0 {
                return Err(StarError::InvalidArgument(
                    "bench needs positive --tx/--dim/--batch and --rate >= 1".into(),
                ));
            }
            let report = engine::memory_account(tx, rate, dim, batch);
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(())
        }
    }
}

