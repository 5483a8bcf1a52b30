//! Span corruption: contiguous noise runs are cut out of a token chunk and
//! replaced by sentinels; the decoder target lists each sentinel followed by
//! the tokens it stands for.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{DataError, Example, Vocab};

/// Geometry of one corrupted example.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpanLengths {
    /// Raw chunk length consumed per example.
    pub tokens_length: usize,
    pub input_length: usize,
    pub target_length: usize,
    pub noise_tokens: usize,
    pub noise_spans: usize,
}

fn round_half_even(x: f64) -> usize {
    x.round_ties_even().max(0.0) as usize
}

/// Lengths that corrupting `raw` tokens produces.
///
/// `noise = round(raw * density)` clamped to `[1, raw - 1]`,
/// `spans = max(1, round(noise / mean_span))` (never more than the
/// non-noise tokens), `input = raw - noise + spans + 1` and
/// `target = noise + spans + 1`, the `+ 1` being EOS.
pub fn lengths_for_raw(raw: usize, noise_density: f64, mean_span: f64) -> Option<SpanLengths> {
    if raw < 2 {
        return None;
    }
    let noise = round_half_even(raw as f64 * noise_density).clamp(1, raw - 1);
    let spans = round_half_even(noise as f64 / mean_span)
        .max(1)
        .min(raw - noise);
    Some(SpanLengths {
        tokens_length: raw,
        input_length: raw - noise + spans + 1,
        target_length: noise + spans + 1,
        noise_tokens: noise,
        noise_spans: spans,
    })
}

fn check_params(input_length: usize, noise_density: f64, mean_span: f64) -> Result<(), DataError> {
    if !(noise_density > 0.0 && noise_density < 1.0) {
        return Err(DataError::InvalidConfig(format!(
            "noise_density {noise_density} outside (0, 1)"
        )));
    }
    if !(mean_span >= 1.0) {
        return Err(DataError::InvalidConfig(format!(
            "mean_span_length {mean_span} below 1"
        )));
    }
    if input_length < 2 {
        return Err(DataError::InvalidConfig(format!(
            "input_length {input_length} must exceed 1"
        )));
    }
    Ok(())
}

/// Smallest raw chunk length whose corruption is exactly `input_length`
/// tokens long (EOS included), and the target length that comes with it.
pub fn compute_span_lengths(
    input_length: usize,
    noise_density: f64,
    mean_span: f64,
) -> Result<SpanLengths, DataError> {
    check_params(input_length, noise_density, mean_span)?;
    // input length grows by at most one per raw token and shrinks by less
    // than density per raw token, so a solution (if any) is below this bound
    let limit = (input_length as f64 / (1.0 - noise_density)).ceil() as usize * 2 + 8;
    (2..=limit)
        .filter_map(|raw| lengths_for_raw(raw, noise_density, mean_span))
        .find(|l| l.input_length == input_length)
        .ok_or(DataError::Infeasible {
            input_length,
            noise_density,
            mean_span,
        })
}

/// Parameters of the corruption applied to each chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionConfig {
    pub noise_density: f64,
    pub mean_span_length: f64,
    pub input_length: usize,
    pub target_length: usize,
    pub tokens_length: usize,
    pub eos_id: u32,
    pub pad_id: u32,
    /// First sentinel id; sentinel `i` is `sentinel_base - i`.
    pub sentinel_base: u32,
    pub num_sentinels: usize,
}

impl CorruptionConfig {
    /// Derives the raw and target lengths for `input_length` and checks that
    /// the vocabulary reserves enough sentinels.
    pub fn new(
        noise_density: f64,
        mean_span_length: f64,
        input_length: usize,
        vocab: &Vocab,
    ) -> Result<Self, DataError> {
        let l = compute_span_lengths(input_length, noise_density, mean_span_length)?;
        if l.noise_spans > vocab.num_sentinels() {
            return Err(DataError::InvalidConfig(format!(
                "{} noise spans need more sentinels than the {} reserved",
                l.noise_spans,
                vocab.num_sentinels()
            )));
        }
        Ok(CorruptionConfig {
            noise_density,
            mean_span_length,
            input_length,
            target_length: l.target_length,
            tokens_length: l.tokens_length,
            eos_id: vocab.eos_id(),
            pad_id: vocab.pad_id(),
            sentinel_base: vocab.sentinel_base(),
            num_sentinels: vocab.num_sentinels(),
        })
    }

    pub fn is_sentinel(&self, id: u32) -> bool {
        let n = self.num_sentinels as u32;
        n > 0 && id <= self.sentinel_base && id + n > self.sentinel_base
    }
}

/// Splits `n` items into `k` nonempty runs, uniformly over all compositions.
fn random_segmentation<R: Rng>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    debug_assert!(k >= 1 && k <= n);
    let mut cuts: Vec<bool> = (0..n - 1).map(|i| i < k - 1).collect();
    cuts.shuffle(rng);
    let mut lengths = Vec::with_capacity(k);
    let mut run = 1;
    for c in cuts {
        if c {
            lengths.push(run);
            run = 1;
        } else {
            run += 1;
        }
    }
    lengths.push(run);
    lengths
}

/// Random noise mask over `len` tokens: alternating non-noise and noise
/// runs, starting with non-noise, with `spans` runs of each.
pub fn random_noise_mask<R: Rng>(
    len: usize,
    noise_density: f64,
    mean_span: f64,
    rng: &mut R,
) -> Vec<bool> {
    let Some(l) = lengths_for_raw(len, noise_density, mean_span) else {
        return vec![false; len];
    };
    let noise = random_segmentation(l.noise_tokens, l.noise_spans, rng);
    let keep = random_segmentation(len - l.noise_tokens, l.noise_spans, rng);
    let mut mask = Vec::with_capacity(len);
    for (k, n) in keep.into_iter().zip(noise) {
        mask.extend(std::iter::repeat(false).take(k));
        mask.extend(std::iter::repeat(true).take(n));
    }
    mask
}

/// Applies a noise mask: each noise run becomes one sentinel in the input
/// and `sentinel, tokens...` in the target; both end with EOS.
pub fn apply_noise_mask(tokens: &[u32], mask: &[bool], cfg: &CorruptionConfig) -> Example {
    let mut input = Vec::with_capacity(cfg.input_length);
    let mut target = Vec::with_capacity(cfg.target_length);
    let mut span = 0u32;
    let mut prev_noise = false;
    for (&tok, &noise) in tokens.iter().zip(mask) {
        if noise {
            if !prev_noise {
                let s = cfg.sentinel_base - span;
                input.push(s);
                target.push(s);
                span += 1;
            }
            target.push(tok);
        } else {
            input.push(tok);
        }
        prev_noise = noise;
    }
    input.push(cfg.eos_id);
    target.push(cfg.eos_id);
    Example { input, target }
}

/// Corrupts one raw chunk of exactly `cfg.tokens_length` tokens.
pub fn corrupt_spans<R: Rng>(
    tokens: &[u32],
    cfg: &CorruptionConfig,
    rng: &mut R,
) -> Result<Example, DataError> {
    if tokens.len() != cfg.tokens_length {
        return Err(DataError::Contract(format!(
            "chunk has {} tokens, corruption expects {}",
            tokens.len(),
            cfg.tokens_length
        )));
    }
    let mask = random_noise_mask(tokens.len(), cfg.noise_density, cfg.mean_span_length, rng);
    let ex = apply_noise_mask(tokens, &mask, cfg);
    if ex.input.len() != cfg.input_length || ex.target.len() != cfg.target_length {
        return Err(DataError::Contract(format!(
            "corruption produced {}/{} tokens, expected {}/{}",
            ex.input.len(),
            ex.target.len(),
            cfg.input_length,
            cfg.target_length
        )));
    }
    Ok(ex)
}

/// Rebuilds the original chunk from a corrupted example.
///
/// Returns `None` if a sentinel in the input has no matching run in the target.
pub fn reconstruct(ex: &Example, cfg: &CorruptionConfig) -> Option<Vec<u32>> {
    let body = |s: &[u32]| -> Vec<u32> {
        match s.last() {
            Some(&last) if last == cfg.eos_id => s[..s.len() - 1].to_vec(),
            _ => s.to_vec(),
        }
    };
    let target = body(&ex.target);
    let mut spans: Vec<(u32, Vec<u32>)> = Vec::new();
    for &t in &target {
        if cfg.is_sentinel(t) {
            spans.push((t, Vec::new()));
        } else {
            spans.last_mut()?.1.push(t);
        }
    }
    let mut spans = spans.into_iter();
    let mut out = Vec::new();
    for t in body(&ex.input) {
        if cfg.is_sentinel(t) {
            let (s, toks) = spans.next()?;
            if s != t {
                return None;
            }
            out.extend(toks);
        } else {
            out.push(t);
        }
    }
    if spans.next().is_some() {
        return None;
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_geometry() {
        let l = compute_span_lengths(512, 0.15, 3.0).unwrap();
        assert_eq!((l.tokens_length, l.target_length), (568, 114));
        assert_eq!((l.noise_tokens, l.noise_spans), (85, 28));
    }

    #[test]
    fn small_geometry() {
        let l = compute_span_lengths(10, 0.2, 2.0).unwrap();
        assert_eq!((l.tokens_length, l.target_length), (10, 4));
    }

    #[test]
    fn spans_clamp_to_one() {
        let l = lengths_for_raw(10, 0.2, 50.0).unwrap();
        assert_eq!(l.noise_spans, 1);
    }

    #[test]
    fn invalid_parameters() {
        assert!(compute_span_lengths(512, 0.0, 3.0).is_err());
        assert!(compute_span_lengths(512, 0.15, 0.5).is_err());
        assert!(compute_span_lengths(1, 0.15, 3.0).is_err());
    }

    fn toy_cfg() -> CorruptionConfig {
        CorruptionConfig {
            noise_density: 0.4,
            mean_span_length: 2.0,
            input_length: 5,
            target_length: 4,
            tokens_length: 5,
            eos_id: 1,
            pad_id: 0,
            sentinel_base: 99,
            num_sentinels: 10,
        }
    }

    #[test]
    fn forced_single_span() {
        let (a, b, c, d, e) = (10, 11, 12, 13, 14);
        let ex = apply_noise_mask(
            &[a, b, c, d, e],
            &[false, false, true, true, false],
            &toy_cfg(),
        );
        assert_eq!(ex.input, vec![a, b, 99, e, 1]);
        assert_eq!(ex.target, vec![99, c, d, 1]);
        assert_eq!(reconstruct(&ex, &toy_cfg()).unwrap(), vec![a, b, c, d, e]);
    }

    #[test]
    fn segmentation_is_a_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..20 {
            for k in 1..=n {
                let seg = random_segmentation(n, k, &mut rng);
                assert_eq!(seg.len(), k);
                assert_eq!(seg.iter().sum::<usize>(), n);
                assert!(seg.iter().all(|&x| x >= 1));
            }
        }
    }

    #[test]
    fn wrong_chunk_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(corrupt_spans(&[1, 2, 3], &toy_cfg(), &mut rng).is_err());
    }
}
