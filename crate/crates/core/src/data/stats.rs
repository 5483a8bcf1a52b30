use std::collections::BTreeMap;
use std::fmt;

use super::{BatchIter, DataError, StreamSpec, IGNORE_INDEX};

/// Summary of the first `examples` examples of a stream.
#[derive(Clone, Debug, PartialEq)]
pub struct DataStats {
    pub examples: usize,
    pub tokens_length: usize,
    /// Masked raw tokens over all raw tokens.
    pub masked_fraction: f64,
    /// Examples per number of sentinels used.
    pub sentinels: BTreeMap<usize, usize>,
    /// Examples per (non-pad input length, non-pad target length).
    pub lengths: BTreeMap<(usize, usize), usize>,
}

/// Streams `n` examples one at a time and tallies them.
pub fn collect_stats(mut spec: StreamSpec, n: usize) -> Result<DataStats, DataError> {
    if n == 0 {
        return Err(DataError::Contract("data statistics need at least one example".into()));
    }
    spec.batch_size = 1;
    let corruption = spec.corruption.clone();
    let pad = spec.vocab.pad_id();
    let mut it = BatchIter::new(spec, 0)?;
    let mut stats = DataStats {
        examples: 0,
        tokens_length: corruption.tokens_length,
        masked_fraction: 0.0,
        sentinels: BTreeMap::new(),
        lengths: BTreeMap::new(),
    };
    let mut masked = 0usize;
    while stats.examples < n {
        let Some(b) = it.next_batch()? else {
            break;
        };
        let sentinels = b.input_ids.iter().filter(|&&t| corruption.is_sentinel(t)).count();
        let labels = b.labels.iter().filter(|&&l| l != IGNORE_INDEX).count();
        // the target holds each sentinel, the masked tokens and a final EOS
        masked += labels - sentinels - 1;
        *stats.sentinels.entry(sentinels).or_default() += 1;
        let input = b.input_ids.iter().filter(|&&t| t != pad).count();
        *stats.lengths.entry((input, labels)).or_default() += 1;
        stats.examples += 1;
    }
    if stats.examples == 0 {
        return Err(DataError::Contract("corpus yields no examples".into()));
    }
    stats.masked_fraction = masked as f64 / (stats.examples * corruption.tokens_length) as f64;
    Ok(stats)
}

impl fmt::Display for DataStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "examples: {}", self.examples)?;
        writeln!(f, "raw tokens per example: {}", self.tokens_length)?;
        writeln!(f, "masked fraction: {:.4}", self.masked_fraction)?;
        writeln!(f, "sentinels per example:")?;
        for (k, v) in &self.sentinels {
            writeln!(f, "  {k:>4}: {v}")?;
        }
        writeln!(f, "input/target lengths:")?;
        for ((i, t), v) in &self.lengths {
            writeln!(f, "  {i:>4}/{t:<4}: {v}")?;
        }
        Ok(())
    }
}
