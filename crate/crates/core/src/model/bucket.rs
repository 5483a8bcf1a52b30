/// Maps a signed key-minus-query offset to a relative attention bucket.
///
/// Bidirectional mode gives half the buckets to positive offsets. Within a
/// half, the first `half / 2` offsets get their own bucket and larger ones
/// are binned logarithmically up to `max_distance`, beyond which everything
/// shares the last bucket. The log is taken in single precision, matching
/// the reference T5 implementations bucket-for-bucket.
pub fn relative_position_bucket(
    rel: i64,
    bidirectional: bool,
    num_buckets: usize,
    max_distance: usize,
) -> usize {
    let mut buckets = num_buckets;
    let mut base = 0;
    let n = if bidirectional {
        buckets /= 2;
        if rel > 0 {
            base = buckets;
        }
        rel.unsigned_abs() as usize
    } else {
        (-rel).max(0) as usize
    };
    let max_exact = buckets / 2;
    if n < max_exact {
        return base + n;
    }
    let ratio = (n as f32 / max_exact as f32).ln() / (max_distance as f32 / max_exact as f32).ln();
    let large = max_exact + (ratio * (buckets - max_exact) as f32) as usize;
    base + large.min(buckets - 1)
}

/// Bucket ids for every (query, key) pair, row-major `[q_len, k_len]`.
pub fn bucket_grid(
    q_len: usize,
    k_len: usize,
    bidirectional: bool,
    num_buckets: usize,
    max_distance: usize,
) -> Vec<usize> {
    let mut ids = Vec::with_capacity(q_len * k_len);
    for q in 0..q_len {
        for k in 0..k_len {
            let rel = k as i64 - q as i64;
            ids.push(relative_position_bucket(
                rel,
                bidirectional,
                num_buckets,
                max_distance,
            ));
        }
    }
    ids
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_offsets() {
        assert_eq!(relative_position_bucket(0, true, 32, 128), 0);
        assert_eq!(relative_position_bucket(1, true, 32, 128), 17);
        assert_eq!(relative_position_bucket(-1, true, 32, 128), 1);
        assert_eq!(relative_position_bucket(1, false, 32, 128), 0);
        assert_eq!(relative_position_bucket(-3, false, 32, 128), 3);
    }

    #[test]
    fn far_offsets_clamp() {
        assert_eq!(relative_position_bucket(-10_000, true, 32, 128), 15);
        assert_eq!(relative_position_bucket(10_000, true, 32, 128), 31);
        assert_eq!(relative_position_bucket(-10_000, false, 32, 128), 31);
    }
}
