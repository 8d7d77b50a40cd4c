//! Byte-level corpus ingestion and fixed-length sampling.

use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus is empty")]
    Empty,
    #[error("split fractions {0:?} must be non-negative and sum to 1")]
    BadSplits([f64; 3]),
    #[error("the train split is empty")]
    EmptyTrain,
    #[error("vocabulary must list distinct bytes in ascending order")]
    BadVocab,
}

/// Sorted distinct bytes of the train split; id `len` is the unknown symbol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<u8>,
    lookup: [Option<u16>; 256],
}

impl Vocab {
    pub fn from_bytes(bytes: &[u8]) -> Self {
        let mut seen = [false; 256];
        bytes.iter().for_each(|&b| seen[b as usize] = true);
        let symbols: Vec<u8> = (0..=255u8).filter(|&b| seen[b as usize]).collect();
        Self::from_symbols(symbols).expect("sorted distinct bytes")
    }

    pub fn from_symbols(symbols: Vec<u8>) -> Result<Self, CorpusError> {
        if symbols.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CorpusError::BadVocab);
        }
        let mut lookup = [None; 256];
        for (i, &b) in symbols.iter().enumerate() {
            lookup[b as usize] = Some(i as u16);
        }
        Ok(Self { symbols, lookup })
    }

    pub fn symbols(&self) -> &[u8] {
        &self.symbols
    }

    /// Number of ids including the unknown one.
    pub fn size(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn unk(&self) -> usize {
        self.symbols.len()
    }

    pub fn encode(&self, bytes: &[u8]) -> Vec<usize> {
        bytes
            .iter()
            .map(|&b| self.lookup[b as usize].map_or(self.unk(), usize::from))
            .collect()
    }

    /// Unknown ids decode to `?`.
    pub fn decode(&self, ids: &[usize]) -> Vec<u8> {
        ids.iter().map(|&i| self.symbols.get(i).copied().unwrap_or(b'?')).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Byte offsets where the validation and test splits begin.
    pub boundaries: [usize; 2],
}

/// `[floor(len·f_train), floor(len·(f_train + f_val))]`.
pub fn split_boundaries(len: usize, splits: [f64; 3]) -> Result<[usize; 2], CorpusError> {
    if splits.iter().any(|&s| !(s >= 0.0)) || (splits.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadSplits(splits));
    }
    let a = (len as f64 * splits[0]).floor() as usize;
    let b = (len as f64 * (splits[0] + splits[1])).floor() as usize;
    Ok([a.min(len), b.min(len)])
}

impl Corpus {
    pub fn from_bytes(bytes: &[u8], splits: [f64; 3]) -> Result<Self, CorpusError> {
        Self::build(bytes, splits, None)
    }

    /// Like [`Self::from_bytes`] but with a fixed vocabulary (e.g. from a checkpoint).
    pub fn with_vocab(bytes: &[u8], splits: [f64; 3], vocab: Vocab) -> Result<Self, CorpusError> {
        Self::build(bytes, splits, Some(vocab))
    }

    fn build(bytes: &[u8], splits: [f64; 3], vocab: Option<Vocab>) -> Result<Self, CorpusError> {
        if bytes.is_empty() {
            return Err(CorpusError::Empty);
        }
        let [a, b] = split_boundaries(bytes.len(), splits)?;
        if a == 0 {
            return Err(CorpusError::EmptyTrain);
        }
        let vocab = vocab.unwrap_or_else(|| Vocab::from_bytes(&bytes[..a]));
        Ok(Self {
            train: vocab.encode(&bytes[..a]),
            val: vocab.encode(&bytes[a..b]),
            test: vocab.encode(&bytes[b..]),
            vocab,
            boundaries: [a, b],
        })
    }

    pub fn split(&self, name: &str) -> Option<&[usize]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

pub fn read_corpus(path: &Path) -> Result<Vec<u8>, CorpusError> {
    std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn ingest(path: &Path, splits: [f64; 3]) -> Result<Corpus, CorpusError> {
    Corpus::from_bytes(&read_corpus(path)?, splits)
}

/// Contiguous, non-overlapping `len`-token samples; a short tail is dropped.
pub fn samples(tokens: &[usize], len: usize) -> Vec<&[usize]> {
    if len == 0 {
        return Vec::new();
    }
    tokens.chunks_exact(len).collect()
}

/// Flattened next-token inputs and targets for a batch of samples:
/// input `s[..len-1]`, target `s[1..]`.
pub fn batch_io(batch: &[&[usize]]) -> (Vec<usize>, Vec<usize>) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for s in batch {
        x.extend_from_slice(&s[..s.len() - 1]);
        y.extend_from_slice(&s[1..]);
    }
    (x, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn abab_example() {
        let c = Corpus::from_bytes(b"abab", [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(c.vocab.symbols(), b"ab");
        assert_eq!(c.vocab.size(), 3);
        let s = samples(&c.train, 2);
        assert_eq!(s.len(), 2);
        assert_eq!(c.vocab.decode(s[0]), b"ab");
        assert_eq!(c.vocab.decode(s[1]), b"ab");
    }

    #[test]
    fn unseen_bytes_map_to_unk() {
        let c = Corpus::from_bytes(b"aaaaaaaabz", [0.8, 0.2, 0.0]).unwrap();
        assert_eq!(c.vocab.symbols(), b"a");
        assert_eq!(c.val, vec![1, 1]);
    }

    #[test]
    fn empty_rejected() {
        assert!(matches!(Corpus::from_bytes(b"", [1.0, 0.0, 0.0]), Err(CorpusError::Empty)));
        assert!(matches!(
            Corpus::from_bytes(b"ab", [0.5, 0.2, 0.2]),
            Err(CorpusError::BadSplits(_))
        ));
    }

    #[test]
    fn batch_io_shifts_by_one() {
        let a = [1, 2, 3];
        let b = [4, 5, 6];
        let (x, y) = batch_io(&[&a, &b]);
        assert_eq!(x, vec![1, 2, 4, 5]);
        assert_eq!(y, vec![2, 3, 5, 6]);
    }
}
