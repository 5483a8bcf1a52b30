use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    evaluate_nll, run_loop, GradHook, LoopSetup, MicroBatches, Phase, TrainError, TrainReport,
    TrainState,
};
use crate::config::RunConfig;
use crate::data::{
    corrupt_spans, example_seed, make_batch, Batch, BatchSource, Remainder, Split, TokenStream,
};
use crate::tensor::Element;

const HELDOUT_SALT: u64 = 0x4E1D_0EA1;

/// Up to `max` held-out batches of `train.micro_batch_size` examples.
///
/// Chunks come from the held-out documents; if they are too short for a
/// single full chunk, the remainder is padded into one. The last batch may
/// be smaller than the others.
pub fn heldout_batches(run: &RunConfig, max: usize) -> Result<Vec<Batch>, TrainError> {
    let vocab = run.vocab()?;
    let corruption = run.corruption(&vocab)?;
    let split = Split::Heldout {
        every: run.data.heldout_every,
    };
    let source = run.corpus();
    let wanted = max * run.train.micro_batch_size;
    let mut chunks = Vec::new();
    for remainder in [Remainder::Drop, Remainder::Pad(vocab.pad_id())] {
        let stream = TokenStream::new(&source, &vocab, split, corruption.tokens_length, remainder)?;
        for c in stream.take(wanted) {
            chunks.push(c?);
        }
        if !chunks.is_empty() {
            break;
        }
    }
    let geo = crate::data::BatchGeometry {
        input_len: corruption.input_length,
        target_len: corruption.target_length,
        pad_id: vocab.pad_id(),
        start_id: vocab.start_id(),
    };
    let mut examples = Vec::with_capacity(chunks.len());
    for (k, c) in chunks.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(example_seed(run.train.seed ^ HELDOUT_SALT, k as u64));
        examples.push(corrupt_spans(c, &corruption, &mut rng)?);
    }
    examples
        .chunks(run.train.micro_batch_size.max(1))
        .map(|group| make_batch(group, &geo).map_err(TrainError::from))
        .collect()
}

/// Pre-training options beyond the run configuration.
pub struct PretrainOptions<'a, T> {
    /// Run directory for `config.snapshot`, `metrics.csv` and checkpoints;
    /// `None` keeps everything in memory.
    pub out_dir: Option<&'a Path>,
    /// Continue from this state instead of a fresh initialisation.
    pub resume: Option<TrainState<T>>,
    pub grad_hook: Option<GradHook<'a, T>>,
    /// Cycle through these batches instead of reading the corpus.
    pub fixed_batches: Option<Vec<Batch>>,
}

impl<T> Default for PretrainOptions<'_, T> {
    fn default() -> Self {
        PretrainOptions {
            out_dir: None,
            resume: None,
            grad_hook: None,
            fixed_batches: None,
        }
    }
}

struct Stream(BatchSource);

impl MicroBatches for Stream {
    fn next_micro(&mut self) -> Result<Option<Batch>, TrainError> {
        Ok(self.0.next_batch()?)
    }
}

struct Cycle {
    batches: Vec<Batch>,
    next: usize,
}

impl MicroBatches for Cycle {
    fn next_micro(&mut self) -> Result<Option<Batch>, TrainError> {
        if self.batches.is_empty() {
            return Ok(None);
        }
        let b = self.batches[self.next % self.batches.len()].clone();
        self.next += 1;
        Ok(Some(b))
    }
}

/// Span-corruption pre-training for `train.total_steps` optimizer steps.
pub fn pretrain<T: Element>(
    run: &RunConfig,
    opts: PretrainOptions<'_, T>,
) -> Result<TrainReport<T>, TrainError> {
    run.validate()?;
    let state = match opts.resume {
        Some(s) => s,
        None => TrainState::fresh(run)?,
    };
    let mut data: Box<dyn MicroBatches> = match opts.fixed_batches {
        Some(batches) => {
            let per_step = run.train.grad_accum_steps as u64;
            Box::new(Cycle {
                next: (state.step * per_step) as usize,
                batches,
            })
        }
        None => {
            let prefetch = (run.data.prefetch > 0).then_some(run.data.prefetch);
            Box::new(Stream(BatchSource::open(
                run.train_stream()?,
                state.examples_consumed,
                prefetch,
            )?))
        }
    };
    let heldout = if run.train.eval_batches > 0 {
        heldout_batches(run, run.train.eval_batches)?
    } else {
        Vec::new()
    };
    let mut evaluate = |_: u64, params: &crate::model::ModelParams<T>| -> Result<Option<f64>, TrainError> {
        if heldout.is_empty() {
            return Ok(None);
        }
        evaluate_nll(params, &run.model, &heldout, heldout.len()).map(Some)
    };
    let setup = LoopSetup {
        run,
        phase: Phase::Pretrain,
        out_dir: opts.out_dir,
        grad_hook: opts.grad_hook,
    };
    run_loop(setup, state, data.as_mut(), &mut evaluate)
}
