use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    check_compatible, evaluate_nll, load_checkpoint, read_manifest, run_loop, GradHook, LoopSetup,
    MicroBatches, Phase, TrainError, TrainReport, TrainState,
};
use crate::config::{FinetuneConfig, RunConfig};
use crate::data::{example_seed, fit_length, make_batch, Batch, BatchGeometry, Example, Vocab};
use crate::model::{greedy_decode, ModelParams, ModelScorer};
use crate::optim::Optimizer;
use crate::tensor::Element;

/// RougeL evaluations, written next to `metrics.csv`.
pub const ROUGE_FILE: &str = "finetune_eval.csv";

const ORDER_SALT: u64 = 0x0F1E_7C0D;

/// LCS-based F1 between a candidate and a reference sequence.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut prev = vec![0usize; reference.len() + 1];
    let mut cur = vec![0usize; reference.len() + 1];
    for c in candidate {
        for (j, r) in reference.iter().enumerate() {
            cur[j + 1] = if c == r {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let lcs = prev[reference.len()];
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Parses `input<TAB>target` lines. Blank lines are skipped.
pub fn parse_tsv(text: &str, origin: &str) -> Result<Vec<(String, String)>, TrainError> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split('\t');
        match (cols.next(), cols.next(), cols.next()) {
            (Some(a), Some(b), None) => pairs.push((a.to_string(), b.to_string())),
            _ => {
                return Err(TrainError::Tsv {
                    path: origin.to_string(),
                    line: i + 1,
                    msg: "expected exactly two tab-separated columns".into(),
                })
            }
        }
    }
    if pairs.is_empty() {
        return Err(TrainError::EmptyData(format!("{origin} holds no pairs")));
    }
    Ok(pairs)
}

pub fn read_tsv(path: &Path) -> Result<Vec<(String, String)>, TrainError> {
    let text = std::fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
    parse_tsv(&text, &path.display().to_string())
}

/// String reversal over `a..=h`; the first pair is always `abc -> cba`.
pub fn reversal_pairs(n: usize, seed: u64) -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs: Vec<(String, String)> = Vec::with_capacity(n);
    let push = |s: String, pairs: &mut Vec<(String, String)>| {
        if !pairs.iter().any(|(a, _)| *a == s) {
            let r: String = s.chars().rev().collect();
            pairs.push((s, r));
        }
    };
    if n > 0 {
        push("abc".into(), &mut pairs);
    }
    while pairs.len() < n {
        let len = rng.gen_range(2..=6);
        let s: String = (0..len).map(|_| (b'a' + rng.gen_range(0..8u8)) as char).collect();
        push(s, &mut pairs);
    }
    pairs
}

fn encode(vocab: &Vocab, text: &str, len: usize) -> Vec<u32> {
    let mut ids = vocab.tokenize(text);
    ids.push(vocab.eos_id());
    fit_length(&ids, len, vocab.pad_id())
}

/// Encoder input ids for one prompt: tokens, EOS, then padding.
pub fn encode_input(vocab: &Vocab, text: &str, cfg: &FinetuneConfig) -> Vec<u32> {
    encode(vocab, text, cfg.input_length)
}

/// Batch of (input, target) pairs, each followed by EOS and fitted to the
/// configured lengths.
pub fn supervised_batch(
    pairs: &[(String, String)],
    vocab: &Vocab,
    cfg: &FinetuneConfig,
) -> Result<Batch, TrainError> {
    let examples: Vec<Example> = pairs
        .iter()
        .map(|(a, b)| Example {
            input: encode(vocab, a, cfg.input_length),
            target: encode(vocab, b, cfg.target_length),
        })
        .collect();
    let geo = BatchGeometry {
        input_len: cfg.input_length,
        target_len: cfg.target_length,
        pad_id: vocab.pad_id(),
        start_id: vocab.start_id(),
    };
    Ok(make_batch(&examples, &geo)?)
}

/// Seeded per-epoch shuffles over the training pairs; example `k` is a pure
/// function of `k`, so resuming needs only the number of examples consumed.
struct Shuffled<'a> {
    pairs: &'a [(String, String)],
    vocab: &'a Vocab,
    cfg: &'a FinetuneConfig,
    batch_size: usize,
    seed: u64,
    next: u64,
    epoch: Option<(u64, Vec<usize>)>,
}

impl Shuffled<'_> {
    fn pick(&mut self, k: u64) -> usize {
        let n = self.pairs.len() as u64;
        let epoch = k / n;
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.pairs.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(example_seed(self.seed ^ ORDER_SALT, epoch)));
            self.epoch = Some((epoch, order));
        }
        self.epoch.as_ref().expect("set above").1[(k % n) as usize]
    }
}

impl MicroBatches for Shuffled<'_> {
    fn next_micro(&mut self) -> Result<Option<Batch>, TrainError> {
        let mut chosen = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let i = self.pick(self.next);
            self.next += 1;
            chosen.push(self.pairs[i].clone());
        }
        supervised_batch(&chosen, self.vocab, self.cfg).map(Some)
    }
}

/// One RougeL evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct RougeRow {
    pub step: u64,
    pub split: &'static str,
    pub rouge_l: f64,
    pub pairs: usize,
}

/// Mean RougeL of greedy decodes against the reference token ids.
pub fn mean_rouge<T: Element>(
    params: &ModelParams<T>,
    run: &RunConfig,
    vocab: &Vocab,
    pairs: &[(String, String)],
) -> Result<f64, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyData("no pairs to score".into()));
    }
    let mut total = 0.0;
    for (input, target) in pairs {
        let ids = encode_input(vocab, input, &run.finetune);
        let mut scorer = ModelScorer::new(params, &run.model, &ids, vocab.pad_id(), vocab.start_id())?;
        let out = greedy_decode(&mut scorer, run.finetune.max_decode_len, vocab.eos_id())?;
        total += rouge_l(&out, &vocab.tokenize(target));
    }
    Ok(total / pairs.len() as f64)
}

/// Fine-tuning options beyond the run configuration.
pub struct FinetuneOptions<'a, T> {
    /// Pre-training or fine-tuning checkpoint to start from; `None`
    /// initialises from `train.seed`.
    pub checkpoint: Option<&'a Path>,
    pub out_dir: Option<&'a Path>,
    /// Pairs to train on instead of `finetune.train_tsv` or the built-in task.
    pub pairs: Option<Vec<(String, String)>>,
    pub grad_hook: Option<GradHook<'a, T>>,
}

impl<T> Default for FinetuneOptions<'_, T> {
    fn default() -> Self {
        FinetuneOptions {
            checkpoint: None,
            out_dir: None,
            pairs: None,
            grad_hook: None,
        }
    }
}

#[derive(Debug)]
pub struct FinetuneReport<T> {
    pub train: TrainReport<T>,
    pub rouge: Vec<RougeRow>,
}

fn initial_state<T: Element>(run: &RunConfig, checkpoint: Option<&Path>) -> Result<TrainState<T>, TrainError> {
    let Some(dir) = checkpoint else {
        return TrainState::fresh(run);
    };
    let manifest = read_manifest(dir)?;
    check_compatible(&manifest, run)?;
    let ckpt = load_checkpoint::<T>(dir)?;
    match ckpt.manifest.phase {
        Phase::Finetune => TrainState::from_checkpoint(ckpt, run),
        Phase::Pretrain => {
            let optimizer = Optimizer::new(run.optim.kind, run.optim.adam(), run.optim.adafactor(), &ckpt.params)?;
            Ok(TrainState {
                params: ckpt.params,
                optimizer,
                step: 0,
                examples_consumed: 0,
            })
        }
    }
}

/// Supervised sequence-to-sequence fine-tuning with periodic RougeL scoring.
pub fn finetune<T: Element>(
    run: &RunConfig,
    opts: FinetuneOptions<'_, T>,
) -> Result<FinetuneReport<T>, TrainError> {
    run.validate()?;
    let vocab = run.vocab()?;
    let pairs = match (opts.pairs, &run.finetune.train_tsv) {
        (Some(p), _) => p,
        (None, Some(path)) => read_tsv(path)?,
        (None, None) => reversal_pairs(run.finetune.toy_pairs, run.train.seed),
    };
    if pairs.is_empty() {
        return Err(TrainError::EmptyData("no fine-tuning pairs".into()));
    }
    let every = run.finetune.heldout_every;
    let (mut train, mut heldout) = (Vec::new(), Vec::new());
    for (i, p) in pairs.into_iter().enumerate() {
        if every > 0 && i % every == every - 1 {
            heldout.push(p);
        } else {
            train.push(p);
        }
    }
    if train.is_empty() {
        return Err(TrainError::EmptyData("every pair is held out".into()));
    }
    let state = initial_state::<T>(run, opts.checkpoint)?;
    let heldout_batches: Vec<Batch> = heldout
        .chunks(run.train.micro_batch_size)
        .map(|c| supervised_batch(c, &vocab, &run.finetune))
        .collect::<Result<_, _>>()?;

    let mut rouge_file = match opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
            let path = dir.join(ROUGE_FILE);
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| TrainError::io(&path, e))?;
            if f.metadata().map(|m| m.len() == 0).unwrap_or(true) {
                writeln!(f, "step,split,rouge_l,pairs").map_err(|e| TrainError::io(&path, e))?;
            }
            Some((path, f))
        }
        None => None,
    };
    let mut rouge = Vec::new();
    let mut data = Shuffled {
        pairs: &train,
        vocab: &vocab,
        cfg: &run.finetune,
        batch_size: run.train.micro_batch_size,
        seed: run.train.seed,
        next: state.examples_consumed,
        epoch: None,
    };
    let mut evaluate = |step: u64, params: &ModelParams<T>| -> Result<Option<f64>, TrainError> {
        for (split, set) in [("train", &train), ("heldout", &heldout)] {
            if set.is_empty() {
                continue;
            }
            let row = RougeRow {
                step,
                split,
                rouge_l: mean_rouge(params, run, &vocab, set)?,
                pairs: set.len(),
            };
            if let Some((path, f)) = &mut rouge_file {
                writeln!(f, "{},{},{},{}", row.step, row.split, row.rouge_l, row.pairs)
                    .map_err(|e| TrainError::io(path, e))?;
            }
            rouge.push(row);
        }
        if heldout_batches.is_empty() {
            return Ok(None);
        }
        evaluate_nll(params, &run.model, &heldout_batches, heldout_batches.len()).map(Some)
    };
    let setup = LoopSetup {
        run,
        phase: Phase::Finetune,
        out_dir: opts.out_dir,
        grad_hook: opts.grad_hook,
    };
    let report = run_loop(setup, state, &mut data, &mut evaluate)?;
    Ok(FinetuneReport { train: report, rouge })
}
