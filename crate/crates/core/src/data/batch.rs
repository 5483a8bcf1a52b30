use super::DataError;

/// Label value excluded from the loss.
pub const IGNORE_INDEX: i64 = -100;

/// One encoder input and its decoder target, both already at their final length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub input: Vec<u32>,
    pub target: Vec<u32>,
}

/// Shape and special ids a batch is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchGeometry {
    pub input_len: usize,
    pub target_len: usize,
    pub pad_id: u32,
    pub start_id: u32,
}

/// Padded training batch, row-major `[size, input_len]` and `[size, target_len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub input_len: usize,
    pub target_len: usize,
    pub input_ids: Vec<u32>,
    pub input_mask: Vec<bool>,
    /// Labels shifted right by one with the start token in front.
    pub decoder_input_ids: Vec<u32>,
    pub labels: Vec<i64>,
}

impl Batch {
    /// Number of labels that take part in the loss.
    pub fn target_tokens(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_INDEX).count()
    }

    /// Rows `range` as a smaller batch.
    pub fn slice(&self, start: usize, end: usize) -> Batch {
        let (s, t) = (self.input_len, self.target_len);
        Batch {
            size: end - start,
            input_len: s,
            target_len: t,
            input_ids: self.input_ids[start * s..end * s].to_vec(),
            input_mask: self.input_mask[start * s..end * s].to_vec(),
            decoder_input_ids: self.decoder_input_ids[start * t..end * t].to_vec(),
            labels: self.labels[start * t..end * t].to_vec(),
        }
    }
}

/// Stacks exact-length examples into a batch.
pub fn make_batch(examples: &[Example], geo: &BatchGeometry) -> Result<Batch, DataError> {
    if examples.is_empty() {
        return Err(DataError::Contract("cannot batch zero examples".into()));
    }
    let n = examples.len();
    let mut batch = Batch {
        size: n,
        input_len: geo.input_len,
        target_len: geo.target_len,
        input_ids: Vec::with_capacity(n * geo.input_len),
        input_mask: Vec::with_capacity(n * geo.input_len),
        decoder_input_ids: Vec::with_capacity(n * geo.target_len),
        labels: Vec::with_capacity(n * geo.target_len),
    };
    for (i, ex) in examples.iter().enumerate() {
        if ex.input.len() != geo.input_len || ex.target.len() != geo.target_len {
            return Err(DataError::Contract(format!(
                "example {i} has lengths {}/{}, expected {}/{}",
                ex.input.len(),
                ex.target.len(),
                geo.input_len,
                geo.target_len
            )));
        }
        batch.input_ids.extend_from_slice(&ex.input);
        batch.input_mask.extend(ex.input.iter().map(|&t| t != geo.pad_id));
        batch.labels.extend(ex.target.iter().map(|&t| {
            if t == geo.pad_id {
                IGNORE_INDEX
            } else {
                t as i64
            }
        }));
        batch.decoder_input_ids.push(geo.start_id);
        batch
            .decoder_input_ids
            .extend_from_slice(&ex.target[..geo.target_len.saturating_sub(1)]);
    }
    Ok(batch)
}

/// Truncates or right-pads a sequence to exactly `len` tokens.
pub fn fit_length(tokens: &[u32], len: usize, pad_id: u32) -> Vec<u32> {
    let mut out: Vec<u32> = tokens.iter().copied().take(len).collect();
    out.resize(len, pad_id);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geo(input_len: usize, target_len: usize) -> BatchGeometry {
        BatchGeometry {
            input_len,
            target_len,
            pad_id: 0,
            start_id: 2,
        }
    }

    #[test]
    fn single_example_shapes_and_shift() {
        let ex = Example {
            input: vec![5, 6, 7, 1],
            target: vec![9, 8, 1],
        };
        let b = make_batch(&[ex], &geo(4, 3)).unwrap();
        assert_eq!(b.input_ids.len(), 4);
        assert_eq!(b.decoder_input_ids, vec![2, 9, 8]);
        assert_eq!(b.labels, vec![9, 8, 1]);
        for t in 1..3 {
            assert_eq!(b.decoder_input_ids[t] as i64, b.labels[t - 1]);
        }
    }

    #[test]
    fn padding_is_masked_and_ignored() {
        let ex = Example {
            input: vec![5, 1, 0, 0],
            target: vec![9, 1, 0],
        };
        let b = make_batch(&[ex], &geo(4, 3)).unwrap();
        assert_eq!(b.input_mask, vec![true, true, false, false]);
        assert_eq!(b.labels, vec![9, 1, IGNORE_INDEX]);
        assert_eq!(b.target_tokens(), 2);
    }

    #[test]
    fn ragged_examples_rejected() {
        let a = Example {
            input: vec![5, 1],
            target: vec![1],
        };
        let b = Example {
            input: vec![5, 6, 1],
            target: vec![1],
        };
        assert!(matches!(
            make_batch(&[a, b], &geo(2, 1)),
            Err(DataError::Contract(_))
        ));
    }

    #[test]
    fn fit_length_pads_and_truncates() {
        assert_eq!(fit_length(&[1, 2, 3], 2, 0), vec![1, 2]);
        assert_eq!(fit_length(&[1], 3, 0), vec![1, 0, 0]);
    }
}
