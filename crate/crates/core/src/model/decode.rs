use super::forward::{decode_logits, encode_detached};
use super::{ModelConfig, ModelError, ModelParams};
use crate::tensor::{Element, Tensor};

/// Anything that can score the next token after a decoder prefix.
pub trait NextTokenScorer {
    /// Logits over the vocabulary for the token following `generated`
    /// (which excludes the start token).
    fn next_logits(&mut self, generated: &[u32]) -> Result<Vec<f64>, ModelError>;
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate().skip(1) {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding until `eos_id` or `max_len` tokens. EOS is not returned.
pub fn greedy_decode<S: NextTokenScorer>(
    scorer: &mut S,
    max_len: usize,
    eos_id: u32,
) -> Result<Vec<u32>, ModelError> {
    let mut out = Vec::new();
    while out.len() < max_len {
        let logits = scorer.next_logits(&out)?;
        let next = argmax(&logits) as u32;
        if next == eos_id {
            break;
        }
        out.push(next);
    }
    Ok(out)
}

/// Scores continuations of one encoded input with the full model.
///
/// The decoder is re-run over the whole prefix at every step; sequences are
/// short enough at desk scale that a key/value cache is not worth it.
pub struct ModelScorer<'a, T> {
    params: &'a ModelParams<T>,
    cfg: &'a ModelConfig,
    start_id: u32,
    encoded: Tensor<T>,
    mask: Vec<bool>,
}

impl<'a, T: Element> ModelScorer<'a, T> {
    pub fn new(
        params: &'a ModelParams<T>,
        cfg: &'a ModelConfig,
        input_ids: &[u32],
        pad_id: u32,
        start_id: u32,
    ) -> Result<Self, ModelError> {
        let mask: Vec<bool> = input_ids.iter().map(|&t| t != pad_id).collect();
        let encoded = encode_detached(params, cfg, input_ids, &mask, 1)?;
        Ok(ModelScorer {
            params,
            cfg,
            start_id,
            encoded,
            mask,
        })
    }
}

impl<T: Element> NextTokenScorer for ModelScorer<'_, T> {
    fn next_logits(&mut self, generated: &[u32]) -> Result<Vec<f64>, ModelError> {
        let mut ids = Vec::with_capacity(generated.len() + 1);
        ids.push(self.start_id);
        ids.extend_from_slice(generated);
        let logits = decode_logits(self.params, self.cfg, &ids, 1, &self.encoded, &self.mask)?;
        let v = self.cfg.vocab_size;
        let last = &logits.data()[generated.len() * v..];
        Ok(last.iter().map(|x| x.as_f64()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<f64>);

    impl NextTokenScorer for Fixed {
        fn next_logits(&mut self, _: &[u32]) -> Result<Vec<f64>, ModelError> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn eos_first_gives_empty() {
        let mut s = Fixed(vec![0.0, 5.0, 1.0]);
        assert!(greedy_decode(&mut s, 10, 1).unwrap().is_empty());
    }

    #[test]
    fn stops_at_max_len() {
        let mut s = Fixed(vec![0.0, -5.0, 1.0]);
        assert_eq!(greedy_decode(&mut s, 3, 1).unwrap(), vec![2, 2, 2]);
    }

    #[test]
    fn ties_pick_lowest_index() {
        assert_eq!(argmax(&[0.0, 3.0, 3.0, 1.0]), 1);
        let mut s = Fixed(vec![2.0, 2.0, 2.0]);
        assert_eq!(greedy_decode(&mut s, 2, 1).unwrap(), vec![0, 0]);
    }

    #[test]
    fn zero_max_len() {
        let mut s = Fixed(vec![0.0, 1.0]);
        assert!(greedy_decode(&mut s, 0, 0).unwrap().is_empty());
    }
}
