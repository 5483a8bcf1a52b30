use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;

pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const START_ID: u32 = 2;
/// Id of byte `0x00` in the byte-level vocabulary.
pub const BYTE_OFFSET: u32 = 3;
const NUM_SPECIAL: usize = 3;

/// Identity of a vocabulary, stored with checkpoints to catch mismatches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabDescriptor {
    pub kind: String,
    pub size: usize,
    pub fingerprint: u64,
}

/// Token vocabulary: byte-level by default, or loaded from a word list.
#[derive(Clone, Debug, PartialEq)]
pub enum Vocab {
    Bytes(ByteVocab),
    Words(WordVocab),
}

/// `pad`, `eos`, `start`, the 256 bytes, then sentinels filling the top of the id space.
#[derive(Clone, Debug, PartialEq)]
pub struct ByteVocab {
    size: usize,
}

/// Whitespace-separated words, one per line of a vocabulary file.
#[derive(Clone, Debug, PartialEq)]
pub struct WordVocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    pad: u32,
    eos: u32,
    start: u32,
    unk: u32,
    sentinel_base: u32,
    num_sentinels: usize,
}

impl ByteVocab {
    pub fn new(size: usize) -> Result<Self, DataError> {
        if size <= NUM_SPECIAL + 256 {
            return Err(DataError::Vocab(format!(
                "byte vocabulary needs more than {} ids to reserve sentinels, got {size}",
                NUM_SPECIAL + 256
            )));
        }
        Ok(ByteVocab { size })
    }
}

impl WordVocab {
    /// Parses a vocabulary file: one token per line, line number (from 0) is the id.
    ///
    /// `<pad>`, `</s>` and `<unk>` are required; `<s>` is the decoder start
    /// token and defaults to `<pad>`. Sentinels are `<extra_id_0>`,
    /// `<extra_id_1>`, ... and must occupy consecutive descending ids.
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let tok = line.trim_end_matches('\r');
            let lineno = i + 1;
            if tok.is_empty() {
                return Err(DataError::VocabParse {
                    line: lineno,
                    msg: "empty token".into(),
                });
            }
            if tok.chars().any(char::is_whitespace) {
                return Err(DataError::VocabParse {
                    line: lineno,
                    msg: format!("token {tok:?} contains whitespace"),
                });
            }
            if index.insert(tok.to_string(), i as u32).is_some() {
                return Err(DataError::VocabParse {
                    line: lineno,
                    msg: format!("duplicate token {tok:?}"),
                });
            }
            tokens.push(tok.to_string());
        }
        let need = |name: &str| {
            index.get(name).copied().ok_or_else(|| DataError::VocabParse {
                line: tokens.len() + 1,
                msg: format!("missing required token {name}"),
            })
        };
        let pad = need("<pad>")?;
        let eos = need("</s>")?;
        let unk = need("<unk>")?;
        let start = index.get("<s>").copied().unwrap_or(pad);
        let mut num_sentinels = 0;
        let mut sentinel_base = 0;
        while let Some(&id) = index.get(&format!("<extra_id_{num_sentinels}>")) {
            if num_sentinels == 0 {
                sentinel_base = id;
            } else if id + num_sentinels as u32 != sentinel_base {
                return Err(DataError::VocabParse {
                    line: id as usize + 1,
                    msg: format!("<extra_id_{num_sentinels}> must have id {}", sentinel_base as i64 - num_sentinels as i64),
                });
            }
            num_sentinels += 1;
        }
        Ok(WordVocab {
            tokens,
            index,
            pad,
            eos,
            start,
            unk,
            sentinel_base,
            num_sentinels,
        })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl Vocab {
    pub fn bytes(size: usize) -> Result<Self, DataError> {
        Ok(Vocab::Bytes(ByteVocab::new(size)?))
    }

    pub fn load_words(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Ok(Vocab::Words(WordVocab::parse(&text)?))
    }

    pub fn size(&self) -> usize {
        match self {
            Vocab::Bytes(b) => b.size,
            Vocab::Words(w) => w.tokens.len(),
        }
    }

    pub fn pad_id(&self) -> u32 {
        match self {
            Vocab::Bytes(_) => PAD_ID,
            Vocab::Words(w) => w.pad,
        }
    }

    pub fn eos_id(&self) -> u32 {
        match self {
            Vocab::Bytes(_) => EOS_ID,
            Vocab::Words(w) => w.eos,
        }
    }

    pub fn start_id(&self) -> u32 {
        match self {
            Vocab::Bytes(_) => START_ID,
            Vocab::Words(w) => w.start,
        }
    }

    /// Id of the first sentinel; later sentinels count down from it.
    pub fn sentinel_base(&self) -> u32 {
        match self {
            Vocab::Bytes(b) => b.size as u32 - 1,
            Vocab::Words(w) => w.sentinel_base,
        }
    }

    pub fn num_sentinels(&self) -> usize {
        match self {
            Vocab::Bytes(b) => b.size - NUM_SPECIAL - 256,
            Vocab::Words(w) => w.num_sentinels,
        }
    }

    pub fn is_sentinel(&self, id: u32) -> bool {
        let base = self.sentinel_base();
        let n = self.num_sentinels() as u32;
        n > 0 && id <= base && id + n > base
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        match self {
            Vocab::Bytes(_) => text.bytes().map(|b| b as u32 + BYTE_OFFSET).collect(),
            Vocab::Words(w) => text
                .split_whitespace()
                .map(|t| w.index.get(t).copied().unwrap_or(w.unk))
                .collect(),
        }
    }

    /// Inverse of [`Vocab::tokenize`]; pad, eos and start are dropped and
    /// sentinels are rendered as `<extra_id_N>`.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        match self {
            Vocab::Bytes(_) => {
                let mut bytes = Vec::with_capacity(ids.len());
                for &id in ids {
                    if self.is_sentinel(id) {
                        let n = self.sentinel_base() - id;
                        bytes.extend_from_slice(format!("<extra_id_{n}>").as_bytes());
                    } else if (BYTE_OFFSET..BYTE_OFFSET + 256).contains(&id) {
                        bytes.push((id - BYTE_OFFSET) as u8);
                    }
                }
                String::from_utf8_lossy(&bytes).into_owned()
            }
            Vocab::Words(w) => ids
                .iter()
                .filter(|&&id| id != w.pad && id != w.eos && id != w.start)
                .filter_map(|&id| w.tokens.get(id as usize).map(String::as_str))
                .collect::<Vec<_>>()
                .join(" "),
        }
    }

    pub fn descriptor(&self) -> VocabDescriptor {
        match self {
            Vocab::Bytes(b) => VocabDescriptor {
                kind: "bytes".into(),
                size: b.size,
                fingerprint: 0,
            },
            Vocab::Words(w) => {
                let mut h: u64 = 0xcbf2_9ce4_8422_2325;
                for tok in &w.tokens {
                    for b in tok.bytes().chain(std::iter::once(b'\n')) {
                        h ^= b as u64;
                        h = h.wrapping_mul(0x0100_0000_01b3);
                    }
                }
                VocabDescriptor {
                    kind: "words".into(),
                    size: w.tokens.len(),
                    fingerprint: h,
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_vocab_layout() {
        let v = Vocab::bytes(384).unwrap();
        assert_eq!(v.tokenize(""), Vec::<u32>::new());
        assert_eq!(v.tokenize("AB"), vec![65 + BYTE_OFFSET, 66 + BYTE_OFFSET]);
        assert_eq!(v.sentinel_base(), 383);
        assert_eq!(v.num_sentinels(), 125);
        assert!(v.is_sentinel(383) && v.is_sentinel(259) && !v.is_sentinel(258));
        assert_eq!(v.detokenize(&[START_ID, 72, 383, EOS_ID]), "E<extra_id_0>");
    }

    #[test]
    fn byte_vocab_too_small() {
        assert!(Vocab::bytes(259).is_err());
    }

    #[test]
    fn word_vocab_roundtrip() {
        let v = Vocab::Words(
            WordVocab::parse("<pad>\n</s>\n<unk>\nthe\ncat\n<extra_id_1>\n<extra_id_0>\n").unwrap(),
        );
        assert_eq!(v.tokenize("the cat dog"), vec![3, 4, 2]);
        assert_eq!(v.detokenize(&[3, 4, 1]), "the cat");
        assert_eq!(v.sentinel_base(), 6);
        assert_eq!(v.num_sentinels(), 2);
        assert_eq!(v.start_id(), 0);
    }

    #[test]
    fn word_vocab_errors_carry_line_numbers() {
        let err = WordVocab::parse("<pad>\n</s>\n\n<unk>\n").unwrap_err();
        assert!(matches!(err, DataError::VocabParse { line: 3, .. }), "{err}");
        let err = WordVocab::parse("<pad>\n</s>\n<unk>\n</s>\n").unwrap_err();
        assert!(matches!(err, DataError::VocabParse { line: 4, .. }), "{err}");
        let err = WordVocab::parse("<pad>\n</s>\n").unwrap_err();
        assert!(err.to_string().contains("<unk>"));
    }
}
