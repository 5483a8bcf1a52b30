use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use t5lab::config::{ConfigError, RunConfig};
use t5lab::data::{collect_stats, Split};
use t5lab::model::{greedy_decode, ModelConfig, ModelScorer};
use t5lab::tensor::{DType, Element};
use t5lab::train::{
    encode_input, evaluate_nll, finetune, heldout_batches, load_checkpoint, pretrain,
    read_manifest, FinetuneOptions, PretrainOptions, TrainError,
};

/// Default root for run directories when `--out-dir` is not given.
const OUT_DIR_ENV: &str = "T5LAB_OUT_DIR";

#[derive(Parser)]
#[command(name = "t5lab", version, about = "Pre-train and fine-tune small T5-style models")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Span-corruption pre-training.
    Pretrain(RunArgs),
    /// Supervised fine-tuning on input/target pairs.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to start from (pre-training or fine-tuning).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Held-out NLL of a checkpoint.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Greedy decoding from a checkpoint.
    Decode {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Text to encode.
        #[arg(long)]
        input: String,
        /// Generation limit; defaults to `finetune.max_decode_len`.
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Corruption statistics over the first examples of the corpus.
    DataStats {
        #[command(flatten)]
        run: RunArgs,
        /// Number of examples to stream.
        #[arg(short = 'n', long, default_value_t = 1000)]
        examples: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file; missing sections and keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `section.key=value` override, applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Shortcut for `--set train.seed=N`.
    #[arg(long)]
    seed: Option<u64>,
    /// Model preset (nano, small, base), applied before `--set`.
    #[arg(long)]
    preset: Option<String>,
    /// Root for run directories [env: T5LAB_OUT_DIR, default: runs].
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

/// Marks errors that are the caller's fault (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

impl RunArgs {
    /// Defaults (or `base`), then the file, the preset, the overrides and
    /// the seed, validated.
    fn resolve(&self, base: Option<RunConfig>) -> Result<RunConfig> {
        let mut run = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => base.unwrap_or_default(),
        };
        if let Some(name) = &self.preset {
            run.model = ModelConfig::preset(name).map_err(|e| UsageError(e.to_string()))?;
        }
        for s in &self.sets {
            run.apply_override(s)?;
        }
        if let Some(seed) = self.seed {
            run.train.seed = seed;
        }
        run.validate()?;
        Ok(run)
    }

    fn run_dir(&self, seed: u64) -> Result<PathBuf> {
        let root = match &self.out_dir {
            Some(p) => p.clone(),
            None => std::env::var_os(OUT_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs")),
        };
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        let mut dir = root.join(format!("{stamp}-seed{seed}"));
        let mut n = 1;
        while dir.exists() {
            n += 1;
            dir = root.join(format!("{stamp}-seed{seed}-{n}"));
        }
        std::fs::create_dir_all(&dir).map_err(|e| anyhow::anyhow!("creating {}: {e}", dir.display()))?;
        Ok(dir)
    }
}

fn print_tail(metrics: &[t5lab::train::MetricsRow]) {
    for split in ["train", "heldout"] {
        if let Some(r) = metrics.iter().rev().find(|r| r.split == split) {
            println!("final {split} loss: {:.4} (step {})", r.loss, r.step);
        }
    }
}

fn run_pretrain<T: Element>(run: &RunConfig, dir: &Path) -> Result<()> {
    let report = pretrain::<T>(
        run,
        PretrainOptions {
            out_dir: Some(dir),
            ..Default::default()
        },
    )?;
    print_tail(&report.metrics);
    if let Some(c) = report.last_checkpoint {
        println!("checkpoint: {}", c.display());
    }
    Ok(())
}

fn run_finetune<T: Element>(run: &RunConfig, dir: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let report = finetune::<T>(
        run,
        FinetuneOptions {
            checkpoint,
            out_dir: Some(dir),
            ..Default::default()
        },
    )?;
    print_tail(&report.train.metrics);
    for split in ["train", "heldout"] {
        if let Some(r) = report.rouge.iter().rev().find(|r| r.split == split) {
            println!("final {split} rougeL: {:.4} (step {})", r.rouge_l, r.step);
        }
    }
    if let Some(c) = report.train.last_checkpoint {
        println!("checkpoint: {}", c.display());
    }
    Ok(())
}

fn run_eval<T: Element>(run: &RunConfig, checkpoint: &Path) -> Result<()> {
    let ckpt = load_checkpoint::<T>(checkpoint)?;
    let batches = heldout_batches(run, run.train.eval_batches.max(1))?;
    let nll = evaluate_nll(&ckpt.params, &ckpt.manifest.model, &batches, batches.len())?;
    println!("heldout nll: {nll:.6} ({} batches, step {})", batches.len(), ckpt.manifest.step);
    Ok(())
}

fn run_decode<T: Element>(run: &RunConfig, checkpoint: &Path, input: &str, max_len: usize) -> Result<()> {
    let ckpt = load_checkpoint::<T>(checkpoint)?;
    let vocab = run.vocab()?;
    let ids = encode_input(&vocab, input, &run.finetune);
    let mut scorer = ModelScorer::new(&ckpt.params, &ckpt.manifest.model, &ids, vocab.pad_id(), vocab.start_id())?;
    let out = greedy_decode(&mut scorer, max_len, vocab.eos_id())?;
    println!("{}", vocab.detokenize(&out));
    Ok(())
}

macro_rules! with_dtype {
    ($dtype:expr, $f:ident($($arg:expr),*)) => {
        match $dtype {
            DType::F64 => $f::<f64>($($arg),*),
            DType::F32 => $f::<f32>($($arg),*),
        }
    };
}

/// The checkpoint's own configuration, used as the base for eval and decode.
fn checkpoint_config(path: &Path) -> Result<(RunConfig, DType)> {
    let m = read_manifest(path).map_err(TrainError::from)?;
    Ok((m.config, m.dtype))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain(args) => {
            let run = args.resolve(None)?;
            let dir = args.run_dir(run.train.seed)?;
            println!("run directory: {}", dir.display());
            with_dtype!(run.train.precision, run_pretrain(&run, &dir))
        }
        Command::Finetune { run: args, checkpoint } => {
            let run = args.resolve(None)?;
            let dir = args.run_dir(run.train.seed)?;
            println!("run directory: {}", dir.display());
            with_dtype!(run.train.precision, run_finetune(&run, &dir, checkpoint.as_deref()))
        }
        Command::Eval { run: args, checkpoint } => {
            let (base, dtype) = checkpoint_config(&checkpoint)?;
            let run = args.resolve(Some(base))?;
            with_dtype!(dtype, run_eval(&run, &checkpoint))
        }
        Command::Decode {
            run: args,
            checkpoint,
            input,
            max_len,
        } => {
            let (base, dtype) = checkpoint_config(&checkpoint)?;
            let run = args.resolve(Some(base))?;
            let max_len = max_len.unwrap_or(run.finetune.max_decode_len);
            with_dtype!(dtype, run_decode(&run, &checkpoint, &input, max_len))
        }
        Command::DataStats { run: args, examples } => {
            if examples == 0 {
                bail!(UsageError("--examples must be at least 1".into()));
            }
            let run = args.resolve(None)?;
            let mut spec = run.train_stream()?;
            spec.split = Split::All;
            spec.cycle = true;
            let stats = collect_stats(spec, examples)?;
            println!("input/target length: {}/{}", run.data.input_length, run.corruption(&run.vocab()?)?.target_length);
            print!("{stats}");
            Ok(())
        }
    }
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<UsageError>()
            || c.is::<ConfigError>()
            || matches!(c.downcast_ref::<TrainError>(), Some(TrainError::Config(_)))
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if is_usage(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
