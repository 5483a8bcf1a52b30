//! Tokenization, span corruption and batch streaming.

mod batch;
mod corruption;
mod stats;
mod stream;
mod vocab;

use thiserror::Error;

pub use batch::{fit_length, make_batch, Batch, BatchGeometry, Example, IGNORE_INDEX};
pub use corruption::{
    apply_noise_mask, compute_span_lengths, corrupt_spans, lengths_for_raw, random_noise_mask,
    reconstruct, CorruptionConfig, SpanLengths,
};
pub use stream::{
    example_seed, BatchIter, BatchSource, CorpusSource, Documents, Prefetcher, Remainder, Split,
    StreamSpec, TokenStream, BUNDLED_CORPUS,
};
pub use stats::{collect_stats, DataStats};
pub use vocab::{ByteVocab, Vocab, VocabDescriptor, WordVocab, BYTE_OFFSET, EOS_ID, PAD_ID, START_ID};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("vocabulary line {line}: {msg}")]
    VocabParse { line: usize, msg: String },
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("invalid corruption config: {0}")]
    InvalidConfig(String),
    #[error("no raw length corrupts to {input_length} tokens at density {noise_density}, mean span {mean_span}")]
    Infeasible {
        input_length: usize,
        noise_density: f64,
        mean_span: f64,
    },
    #[error("data contract violated: {0}")]
    Contract(String),
}
