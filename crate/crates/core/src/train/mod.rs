//! Step loop, gradient accumulation, evaluation, checkpointing and metrics
//! for pre-training and fine-tuning.

mod checkpoint;
mod finetune;
mod grid;
mod metrics;
mod pretrain;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::data::{example_seed, Batch, DataError, VocabDescriptor};
use crate::model::{forward_loss, ModelConfig, ModelError, ModelParams};
use crate::optim::{clip_param_grads, grad_norm, OptimError, Optimizer};
use crate::schedule::ScheduleError;
use crate::tensor::Element;

pub use checkpoint::{
    checkpoint_dir, load_checkpoint, read_manifest, save_checkpoint, Checkpoint, CheckpointError,
    CheckpointManifest, CheckpointMeta, MetricSummary, OptimizerManifest, Phase, RngState,
    TensorEntry, FORMAT_VERSION, MANIFEST_FILE, OPTIMIZER_FILE, PARAMS_FILE,
};
pub use finetune::{
    encode_input, finetune, mean_rouge, parse_tsv, read_tsv, reversal_pairs, rouge_l,
    supervised_batch, FinetuneOptions, FinetuneReport, RougeRow, ROUGE_FILE,
};
pub use grid::{
    desk_grid_config, desk_schedule, format_grid, run_grid, GridCell, GridReport, GRID_OPTIMIZERS,
    GRID_SCHEDULES,
};
pub use metrics::{MetricsLog, MetricsRow, DIVERGED, METRICS_HEADER};
pub use pretrain::{heldout_batches, pretrain, PretrainOptions};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Contract(String),
    #[error("no data: {0}")]
    EmptyData(String),
    #[error("checkpoint vocabulary {checkpoint:?} does not match configured {configured:?}")]
    VocabMismatch {
        checkpoint: VocabDescriptor,
        configured: VocabDescriptor,
    },
    #[error("checkpoint model config differs from the configured one")]
    ModelMismatch,
    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: u64,
        reason: String,
        checkpoint: Option<PathBuf>,
    },
    #[error("{path}:{line}: {msg}")]
    Tsv {
        path: String,
        line: usize,
        msg: String,
    },
}

impl TrainError {
    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        TrainError::Io {
            path: path.display().to_string(),
            source: e,
        }
    }
}

/// Parameters, optimizer and position in the data stream.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub params: ModelParams<T>,
    pub optimizer: Optimizer<T>,
    /// Optimizer updates applied so far.
    pub step: u64,
    pub examples_consumed: u64,
}

impl<T: Element> TrainState<T> {
    /// Freshly initialised parameters and empty optimizer state.
    pub fn fresh(run: &RunConfig) -> Result<Self, TrainError> {
        let params = ModelParams::init(&run.model, run.train.seed)?;
        let optimizer = Optimizer::new(run.optim.kind, run.optim.adam(), run.optim.adafactor(), &params)?;
        Ok(TrainState {
            params,
            optimizer,
            step: 0,
            examples_consumed: 0,
        })
    }

    /// Continues from a checkpoint, which must match `run`'s model and vocabulary.
    pub fn from_checkpoint(ckpt: Checkpoint<T>, run: &RunConfig) -> Result<Self, TrainError> {
        check_compatible(&ckpt.manifest, run)?;
        Ok(TrainState {
            params: ckpt.params,
            optimizer: ckpt.optimizer,
            step: ckpt.manifest.step,
            examples_consumed: ckpt.manifest.rng.examples_consumed,
        })
    }
}

pub(crate) fn check_compatible(m: &CheckpointManifest, run: &RunConfig) -> Result<(), TrainError> {
    let configured = run.vocab()?.descriptor();
    if m.vocab != configured {
        return Err(TrainError::VocabMismatch {
            checkpoint: m.vocab.clone(),
            configured,
        });
    }
    if m.model != run.model {
        return Err(TrainError::ModelMismatch);
    }
    Ok(())
}

const DROPOUT_SALT: u64 = 0xD50F_0A7E;

/// Zeroes the gradients, then accumulates the gradient of the token-weighted
/// mean loss over `micro_batches`: each micro-batch loss is scaled by its
/// share of the non-ignored target tokens, so the result equals the gradient
/// of one large batch. Returns the mean loss and the token count.
pub fn accumulate_gradients<T: Element>(
    params: &mut ModelParams<T>,
    cfg: &ModelConfig,
    micro_batches: &[Batch],
    dropout_seed: Option<u64>,
) -> Result<(f64, usize), TrainError> {
    if micro_batches.is_empty() {
        return Err(TrainError::Contract("accumulate_gradients needs at least one micro-batch".into()));
    }
    let total: usize = micro_batches.iter().map(Batch::target_tokens).sum();
    if total == 0 {
        return Err(TrainError::Contract("every label in the step is ignored".into()));
    }
    params.zero_grads();
    let mut loss = 0.0;
    for (i, mb) in micro_batches.iter().enumerate() {
        let n = mb.target_tokens();
        if n == 0 {
            continue;
        }
        let rng = dropout_seed.map(|s| ChaCha8Rng::seed_from_u64(example_seed(s ^ DROPOUT_SALT, i as u64)));
        let share = n as f64 / total as f64;
        let graph = forward_loss(params, cfg, mb, rng)?;
        let value = graph.backward_into(params, T::cast(share))?;
        loss += share * value.as_f64();
    }
    Ok((loss, total))
}

/// Token-weighted mean NLL over the first `max_batches` batches. Dropout
/// is off and parameters are only read.
pub fn evaluate_nll<T: Element>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batches: &[Batch],
    max_batches: usize,
) -> Result<f64, TrainError> {
    let mut weighted = 0.0;
    let mut tokens = 0usize;
    for b in batches.iter().take(max_batches) {
        let n = b.target_tokens();
        if n == 0 {
            continue;
        }
        let loss = forward_loss(params, cfg, b, None)?.value().as_f64();
        weighted += loss * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(TrainError::EmptyData("no evaluation tokens".into()));
    }
    Ok(weighted / tokens as f64)
}

/// Called after the gradients of a step are accumulated, before clipping.
pub type GradHook<'a, T> = Box<dyn FnMut(u64, &mut ModelParams<T>) + 'a>;

/// Micro-batch supplier for the step loop.
pub(crate) trait MicroBatches {
    fn next_micro(&mut self) -> Result<Option<Batch>, TrainError>;
}

/// Held-out evaluation hook; returns the NLL to log, if any.
pub(crate) type Evaluator<'a, T> = dyn FnMut(u64, &ModelParams<T>) -> Result<Option<f64>, TrainError> + 'a;

pub(crate) struct LoopSetup<'a, T> {
    pub run: &'a RunConfig,
    pub phase: Phase,
    pub out_dir: Option<&'a Path>,
    pub grad_hook: Option<GradHook<'a, T>>,
}

/// Result of a finished run.
#[derive(Debug)]
pub struct TrainReport<T> {
    pub state: TrainState<T>,
    pub metrics: Vec<MetricsRow>,
    pub last_checkpoint: Option<PathBuf>,
}

enum StepError {
    Diverged { loss: f64, norm: Option<f64>, reason: String },
    Other(TrainError),
}

impl<E: Into<TrainError>> From<E> for StepError {
    fn from(e: E) -> Self {
        StepError::Other(e.into())
    }
}

struct StepStats {
    loss: f64,
    grad_norm: f64,
    tokens: usize,
}

fn first_non_finite<T: Element>(params: &ModelParams<T>) -> Option<String> {
    params
        .iter()
        .find(|(_, t)| t.grad().is_some_and(|g| g.iter().any(|x| !x.is_finite())))
        .map(|(n, _)| n.to_string())
}

fn one_step<T: Element>(
    run: &RunConfig,
    state: &mut TrainState<T>,
    micro: &[Batch],
    lr: f64,
    hook: &mut Option<GradHook<'_, T>>,
) -> Result<StepStats, StepError> {
    let next = state.step + 1;
    let seed = (run.model.dropout > 0.0).then(|| example_seed(run.train.seed, next));
    let (loss, tokens) = accumulate_gradients(&mut state.params, &run.model, micro, seed)?;
    if let Some(h) = hook {
        h(next, &mut state.params);
    }
    if !loss.is_finite() {
        return Err(StepError::Diverged {
            loss,
            norm: None,
            reason: format!("non-finite loss {loss}"),
        });
    }
    if let Some(name) = first_non_finite(&state.params) {
        return Err(StepError::Diverged {
            loss,
            norm: Some(grad_norm(&state.params)),
            reason: format!("non-finite gradient in parameter {name}"),
        });
    }
    let norm = match run.optim.max_grad_norm {
        Some(max) => clip_param_grads(&mut state.params, max)?,
        None => grad_norm(&state.params),
    };
    state.optimizer.step(&mut state.params, lr)?;
    state.step = next;
    Ok(StepStats {
        loss,
        grad_norm: norm,
        tokens,
    })
}

fn write_checkpoint<T: Element>(
    setup: &LoopSetup<'_, T>,
    state: &TrainState<T>,
    summary: &MetricSummary,
    crash: bool,
) -> Result<Option<PathBuf>, TrainError> {
    let Some(out) = setup.out_dir else {
        return Ok(None);
    };
    let dir = checkpoint_dir(out, state.step, crash);
    let meta = CheckpointMeta {
        phase: setup.phase,
        step: state.step,
        vocab: setup.run.vocab()?.descriptor(),
        rng: RngState {
            seed: setup.run.train.seed,
            examples_consumed: state.examples_consumed,
        },
        metrics: summary.clone(),
        config: setup.run.clone(),
    };
    save_checkpoint(&dir, &meta, &state.params, &state.optimizer)?;
    Ok(Some(dir))
}

pub(crate) fn prepare_out_dir(out: Option<&Path>, run: &RunConfig) -> Result<MetricsLog, TrainError> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
            let snap = dir.join("config.snapshot");
            std::fs::write(&snap, run.to_json()).map_err(|e| TrainError::io(&snap, e))?;
            MetricsLog::to_file(&dir.join("metrics.csv"))
        }
        None => Ok(MetricsLog::in_memory()),
    }
}

/// The optimizer step loop shared by pre-training and fine-tuning.
pub(crate) fn run_loop<T: Element>(
    mut setup: LoopSetup<'_, T>,
    mut state: TrainState<T>,
    data: &mut dyn MicroBatches,
    evaluate: &mut Evaluator<'_, T>,
) -> Result<TrainReport<T>, TrainError> {
    let run = setup.run;
    let mut log = prepare_out_dir(setup.out_dir, run)?;
    let started = Instant::now();
    let mut summary = MetricSummary::default();
    let mut last_lr = 0.0;
    let mut last_checkpoint = None;
    let eval_due = |step: u64| run.train.eval_interval > 0 && step % run.train.eval_interval == 0;
    let ckpt_due = |step: u64| run.train.checkpoint_interval > 0 && step % run.train.checkpoint_interval == 0;

    if state.step == 0 {
        if let Some(nll) = evaluate(0, &state.params)? {
            summary.last_heldout_loss = Some(nll);
            log.push(MetricsRow {
                step: 0,
                split: "heldout",
                loss: nll,
                lr: 0.0,
                grad_norm: None,
                tokens_per_sec: None,
                elapsed_s: started.elapsed().as_secs_f64(),
            })?;
        }
    }
    let mut evaluated_at = state.step;
    let mut saved_at = None;

    while state.step < run.train.total_steps {
        let step_start = Instant::now();
        let mut micro = Vec::with_capacity(run.train.grad_accum_steps);
        for _ in 0..run.train.grad_accum_steps {
            match data.next_micro()? {
                Some(b) => {
                    state.examples_consumed += b.size as u64;
                    micro.push(b);
                }
                None => return Err(TrainError::EmptyData("training data yielded no batches".into())),
            }
        }
        let next = state.step + 1;
        let lr = run.schedule.lr(next)?;
        match one_step(run, &mut state, &micro, lr, &mut setup.grad_hook) {
            Ok(stats) => {
                last_lr = lr;
                summary.last_train_loss = Some(stats.loss);
                let dt = step_start.elapsed().as_secs_f64();
                let processed: usize = micro.iter().map(|b| b.size * (b.input_len + b.target_len)).sum();
                log.push(MetricsRow {
                    step: state.step,
                    split: "train",
                    loss: stats.loss,
                    lr,
                    grad_norm: Some(stats.grad_norm),
                    tokens_per_sec: Some(if dt > 0.0 { processed as f64 / dt } else { 0.0 }),
                    elapsed_s: started.elapsed().as_secs_f64(),
                })?;
                let _ = stats.tokens;
            }
            Err(StepError::Other(e)) => return Err(e),
            Err(StepError::Diverged { loss, norm, reason }) => {
                summary.diverged = true;
                log.push(MetricsRow {
                    step: next,
                    split: DIVERGED,
                    loss,
                    lr,
                    grad_norm: norm,
                    tokens_per_sec: None,
                    elapsed_s: started.elapsed().as_secs_f64(),
                })?;
                let checkpoint = write_checkpoint(&setup, &state, &summary, true)?;
                return Err(TrainError::Diverged {
                    step: next,
                    reason,
                    checkpoint,
                });
            }
        }
        if eval_due(state.step) {
            if let Some(nll) = evaluate(state.step, &state.params)? {
                summary.last_heldout_loss = Some(nll);
                log.push(MetricsRow {
                    step: state.step,
                    split: "heldout",
                    loss: nll,
                    lr,
                    grad_norm: None,
                    tokens_per_sec: None,
                    elapsed_s: started.elapsed().as_secs_f64(),
                })?;
            }
            evaluated_at = state.step;
        }
        if ckpt_due(state.step) {
            last_checkpoint = write_checkpoint(&setup, &state, &summary, false)?.or(last_checkpoint);
            saved_at = Some(state.step);
        }
    }
    if evaluated_at != state.step {
        if let Some(nll) = evaluate(state.step, &state.params)? {
            summary.last_heldout_loss = Some(nll);
            log.push(MetricsRow {
                step: state.step,
                split: "heldout",
                loss: nll,
                lr: last_lr,
                grad_norm: None,
                tokens_per_sec: None,
                elapsed_s: started.elapsed().as_secs_f64(),
            })?;
        }
    }
    if saved_at != Some(state.step) {
        last_checkpoint = write_checkpoint(&setup, &state, &summary, false)?.or(last_checkpoint);
    }
    Ok(TrainReport {
        state,
        metrics: log.into_rows(),
        last_checkpoint,
    })
}
