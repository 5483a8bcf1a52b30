//! Corpus ingestion: documents are tokenized lazily, joined with EOS and cut
//! into fixed-length raw chunks, which are corrupted into examples and
//! grouped into batches, optionally on a background producer thread.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{corrupt_spans, make_batch, Batch, BatchGeometry, CorruptionConfig, DataError, Vocab};

/// Small public-domain English sample shipped with the crate.
pub const BUNDLED_CORPUS: &str = include_str!("../../data/corpus.txt");

/// Where documents come from: one document per non-empty line.
#[derive(Clone, Debug, PartialEq)]
pub enum CorpusSource {
    Bundled,
    Text(String),
    /// A text file, or a directory whose `.txt` files are read in name order.
    Path(PathBuf),
}

/// Which documents of the corpus a stream sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    All,
    /// Every document except each `every`-th one.
    Train { every: usize },
    /// Each `every`-th document (indices `every - 1`, `2 * every - 1`, ...).
    Heldout { every: usize },
}

impl Split {
    fn keeps(self, doc: usize) -> bool {
        match self {
            Split::All => true,
            Split::Train { every } => every == 0 || doc % every != every - 1,
            Split::Heldout { every } => every != 0 && doc % every == every - 1,
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn list_files(path: &Path) -> Result<Vec<PathBuf>, DataError> {
    if path.is_dir() {
        let mut files = Vec::new();
        for entry in std::fs::read_dir(path).map_err(|e| io_err(path, e))? {
            let p = entry.map_err(|e| io_err(path, e))?.path();
            if p.extension().is_some_and(|x| x == "txt") {
                files.push(p);
            }
        }
        files.sort();
        Ok(files)
    } else {
        File::open(path).map_err(|e| io_err(path, e))?;
        Ok(vec![path.to_path_buf()])
    }
}

/// Lazily yields non-empty lines across the source's files.
pub struct Documents {
    files: std::vec::IntoIter<PathBuf>,
    current: Option<(PathBuf, std::io::Lines<BufReader<File>>)>,
    text: Option<std::vec::IntoIter<String>>,
}

impl Documents {
    pub fn open(source: &CorpusSource) -> Result<Self, DataError> {
        let lines_of = |s: &str| -> Vec<String> {
            s.lines()
                .filter(|l| !l.trim().is_empty())
                .map(str::to_string)
                .collect()
        };
        Ok(match source {
            CorpusSource::Bundled => Documents {
                files: Vec::new().into_iter(),
                current: None,
                text: Some(lines_of(BUNDLED_CORPUS).into_iter()),
            },
            CorpusSource::Text(t) => Documents {
                files: Vec::new().into_iter(),
                current: None,
                text: Some(lines_of(t).into_iter()),
            },
            CorpusSource::Path(p) => Documents {
                files: list_files(p)?.into_iter(),
                current: None,
                text: None,
            },
        })
    }
}

impl Iterator for Documents {
    type Item = Result<String, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        if let Some(text) = &mut self.text {
            return text.next().map(Ok);
        }
        loop {
            if let Some((path, lines)) = &mut self.current {
                match lines.next() {
                    Some(Ok(l)) if l.trim().is_empty() => continue,
                    Some(Ok(l)) => return Some(Ok(l)),
                    Some(Err(e)) => return Some(Err(io_err(path, e))),
                    None => self.current = None,
                }
            }
            let path = self.files.next()?;
            match File::open(&path) {
                Ok(f) => self.current = Some((path, BufReader::new(f).lines())),
                Err(e) => return Some(Err(io_err(&path, e))),
            }
        }
    }
}

/// What to do with the tokens left over after the last full chunk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Remainder {
    Drop,
    /// Emit one final chunk right-padded with this id.
    Pad(u32),
}

/// Fixed-length raw token chunks from EOS-joined documents.
pub struct TokenStream {
    docs: Documents,
    vocab: Vocab,
    split: Split,
    chunk_len: usize,
    remainder: Remainder,
    doc_index: usize,
    buffer: Vec<u32>,
    done: bool,
}

impl TokenStream {
    pub fn new(
        source: &CorpusSource,
        vocab: &Vocab,
        split: Split,
        chunk_len: usize,
        remainder: Remainder,
    ) -> Result<Self, DataError> {
        if chunk_len == 0 {
            return Err(DataError::InvalidConfig("chunk length must be positive".into()));
        }
        Ok(TokenStream {
            docs: Documents::open(source)?,
            vocab: vocab.clone(),
            split,
            chunk_len,
            remainder,
            doc_index: 0,
            buffer: Vec::new(),
            done: false,
        })
    }
}

impl Iterator for TokenStream {
    type Item = Result<Vec<u32>, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        while self.buffer.len() < self.chunk_len {
            if self.done {
                break;
            }
            match self.docs.next() {
                Some(Ok(doc)) => {
                    let keep = self.split.keeps(self.doc_index);
                    self.doc_index += 1;
                    if keep {
                        self.buffer.extend(self.vocab.tokenize(&doc));
                        self.buffer.push(self.vocab.eos_id());
                    }
                }
                Some(Err(e)) => {
                    self.done = true;
                    return Some(Err(e));
                }
                None => self.done = true,
            }
        }
        if self.buffer.len() >= self.chunk_len {
            let rest = self.buffer.split_off(self.chunk_len);
            return Some(Ok(std::mem::replace(&mut self.buffer, rest)));
        }
        match self.remainder {
            Remainder::Pad(pad) if !self.buffer.is_empty() => {
                let mut chunk = std::mem::take(&mut self.buffer);
                chunk.resize(self.chunk_len, pad);
                Some(Ok(chunk))
            }
            _ => None,
        }
    }
}

/// Seed of the `index`-th example drawn from a stream seeded with `seed`.
pub fn example_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finaliser over the pair
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Everything needed to regenerate a pre-training stream from scratch.
#[derive(Clone, Debug)]
pub struct StreamSpec {
    pub source: CorpusSource,
    pub vocab: Vocab,
    pub split: Split,
    pub corruption: CorruptionConfig,
    pub batch_size: usize,
    pub seed: u64,
    /// Restart from the top of the corpus when it runs out.
    pub cycle: bool,
}

impl StreamSpec {
    pub fn geometry(&self) -> BatchGeometry {
        BatchGeometry {
            input_len: self.corruption.input_length,
            target_len: self.corruption.target_length,
            pad_id: self.vocab.pad_id(),
            start_id: self.vocab.start_id(),
        }
    }
}

/// Deterministic, single-threaded batch iterator.
///
/// Example `k` is always chunk `k` of the (possibly cycled) corpus corrupted
/// with [`example_seed`]`(seed, k)`, so content never depends on timing.
pub struct BatchIter {
    spec: StreamSpec,
    chunks: TokenStream,
    next_example: u64,
    epoch_had_chunks: bool,
}

impl BatchIter {
    /// Starts at example `start`, skipping the chunks before it.
    pub fn new(spec: StreamSpec, start: u64) -> Result<Self, DataError> {
        let chunks = Self::open(&spec)?;
        let mut it = BatchIter {
            spec,
            chunks,
            next_example: 0,
            epoch_had_chunks: false,
        };
        while it.next_example < start {
            if it.next_chunk()?.is_none() {
                break;
            }
            it.next_example += 1;
        }
        Ok(it)
    }

    fn open(spec: &StreamSpec) -> Result<TokenStream, DataError> {
        TokenStream::new(
            &spec.source,
            &spec.vocab,
            spec.split,
            spec.corruption.tokens_length,
            Remainder::Drop,
        )
    }

    fn next_chunk(&mut self) -> Result<Option<Vec<u32>>, DataError> {
        loop {
            match self.chunks.next() {
                Some(chunk) => {
                    self.epoch_had_chunks = true;
                    return chunk.map(Some);
                }
                None if self.spec.cycle && self.epoch_had_chunks => {
                    self.chunks = Self::open(&self.spec)?;
                    self.epoch_had_chunks = false;
                }
                None => return Ok(None),
            }
        }
    }

    /// Index of the next example this iterator will produce.
    pub fn position(&self) -> u64 {
        self.next_example
    }

    /// Next full batch, or `None` once a non-cycling corpus is exhausted.
    pub fn next_batch(&mut self) -> Result<Option<Batch>, DataError> {
        let mut examples = Vec::with_capacity(self.spec.batch_size);
        while examples.len() < self.spec.batch_size {
            let Some(chunk) = self.next_chunk()? else {
                return Ok(None);
            };
            let mut rng = ChaCha8Rng::seed_from_u64(example_seed(self.spec.seed, self.next_example));
            examples.push(corrupt_spans(&chunk, &self.spec.corruption, &mut rng)?);
            self.next_example += 1;
        }
        Ok(Some(make_batch(&examples, &self.spec.geometry())?))
    }
}

impl Iterator for BatchIter {
    type Item = Result<Batch, DataError>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_batch().transpose()
    }
}

/// Background producer feeding a bounded queue of batches.
pub struct Prefetcher {
    rx: Receiver<Result<Batch, DataError>>,
    produced: Arc<AtomicUsize>,
    handle: Option<JoinHandle<()>>,
}

impl Prefetcher {
    /// Spawns the producer; at most `capacity` finished batches wait in the queue.
    pub fn spawn(spec: StreamSpec, start: u64, capacity: usize) -> Result<Self, DataError> {
        let mut iter = BatchIter::new(spec, start)?;
        let (tx, rx) = sync_channel(capacity.max(1));
        let produced = Arc::new(AtomicUsize::new(0));
        let counter = Arc::clone(&produced);
        let handle = std::thread::Builder::new()
            .name("batch-producer".into())
            .spawn(move || {
                for item in &mut iter {
                    let failed = item.is_err();
                    if tx.send(item).is_err() || failed {
                        return;
                    }
                    counter.fetch_add(1, Ordering::SeqCst);
                }
            })
            .map_err(|e| DataError::Io {
                path: "<producer thread>".into(),
                source: e,
            })?;
        Ok(Prefetcher {
            rx,
            produced,
            handle: Some(handle),
        })
    }

    /// Batches handed to the queue so far.
    pub fn produced(&self) -> usize {
        self.produced.load(Ordering::SeqCst)
    }

    pub fn next_batch(&mut self) -> Result<Option<Batch>, DataError> {
        match self.rx.recv() {
            Ok(item) => item.map(Some),
            Err(_) => Ok(None),
        }
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        // unblock a producer waiting on a full queue, then wait for it
        let (_, dummy) = sync_channel(0);
        drop(std::mem::replace(&mut self.rx, dummy));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Either an inline iterator or a background producer, with identical content.
pub enum BatchSource {
    Inline(BatchIter),
    Background(Prefetcher),
}

impl BatchSource {
    pub fn open(spec: StreamSpec, start: u64, prefetch: Option<usize>) -> Result<Self, DataError> {
        Ok(match prefetch {
            Some(cap) => BatchSource::Background(Prefetcher::spawn(spec, start, cap)?),
            None => BatchSource::Inline(BatchIter::new(spec, start)?),
        })
    }

    pub fn next_batch(&mut self) -> Result<Option<Batch>, DataError> {
        match self {
            BatchSource::Inline(it) => it.next_batch(),
            BatchSource::Background(p) => p.next_batch(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::bytes(384).unwrap()
    }

    #[test]
    fn chunks_follow_document_order() {
        let src = CorpusSource::Text("ab\ncd\nef\n".into());
        let chunks: Vec<Vec<u32>> = TokenStream::new(&src, &vocab(), Split::All, 3, Remainder::Drop)
            .unwrap()
            .map(Result::unwrap)
            .collect();
        let v = vocab();
        let mut expect = Vec::new();
        for d in ["ab", "cd", "ef"] {
            expect.extend(v.tokenize(d));
            expect.push(v.eos_id());
        }
        assert_eq!(chunks.concat(), expect);
    }

    #[test]
    fn short_source_yields_nothing() {
        let src = CorpusSource::Text("abc\n".into());
        let mut s = TokenStream::new(&src, &vocab(), Split::All, 10, Remainder::Drop).unwrap();
        assert!(s.next().is_none());
    }

    #[test]
    fn remainder_padded_in_eval_mode() {
        let src = CorpusSource::Text("abcd\n".into());
        let chunks: Vec<_> = TokenStream::new(&src, &vocab(), Split::All, 3, Remainder::Pad(0))
            .unwrap()
            .map(Result::unwrap)
            .collect();
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[1][2], 0);
    }

    #[test]
    fn empty_source_ends_cleanly() {
        let src = CorpusSource::Text(String::new());
        let mut s = TokenStream::new(&src, &vocab(), Split::All, 3, Remainder::Drop).unwrap();
        assert!(s.next().is_none());
    }

    #[test]
    fn splits_partition_documents() {
        let all: Vec<usize> = (0..20).collect();
        let train: Vec<_> = all.iter().filter(|&&d| Split::Train { every: 5 }.keeps(d)).collect();
        let held: Vec<_> = all.iter().filter(|&&d| Split::Heldout { every: 5 }.keeps(d)).collect();
        assert_eq!(train.len() + held.len(), 20);
        assert_eq!(held, vec![&4, &9, &14, &19]);
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = Documents::open(&CorpusSource::Path("/nonexistent/corpus.txt".into()));
        assert!(matches!(err, Err(DataError::Io { .. })));
    }
}
