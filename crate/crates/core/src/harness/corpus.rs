use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Token sequences for calibration or evaluation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub sequences: Vec<Vec<u32>>,
}

impl Corpus {
    pub fn new(sequences: Vec<Vec<u32>>) -> Self {
        Self { sequences }
    }

    /// Uniform random token ids, deterministic in `seed`.
    pub fn synthetic(vocab: usize, n_sequences: usize, seq_len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sequences = (0..n_sequences)
            .map(|_| (0..seq_len).map(|_| rng.random_range(0..vocab as u32)).collect())
            .collect();
        Self { sequences }
    }

    /// Cut a flat token stream into sequences of `seq_len`; a shorter tail
    /// becomes the last sequence.
    pub fn from_tokens(tokens: &[u32], seq_len: usize) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::invalid("sequence length must be positive"));
        }
        Ok(Self {
            sequences: tokens.chunks(seq_len).map(<[u32]>::to_vec).collect(),
        })
    }

    /// Read a raw little-endian u32 token file and check every id against
    /// the vocabulary.
    pub fn load(path: impl AsRef<Path>, seq_len: usize, vocab: usize) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::invalid(format!(
                "{}: token file length {} is not a multiple of 4",
                path.display(),
                bytes.len()
            )));
        }
        let tokens: Vec<u32> = bytes
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if tokens.is_empty() {
            return Err(Error::invalid(format!("{}: token file is empty", path.display())));
        }
        if let Some((pos, &id)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= vocab) {
            return Err(Error::invalid(format!(
                "{}: token id {id} at position {pos} is out of range for vocab size {vocab}",
                path.display()
            )));
        }
        Self::from_tokens(&tokens, seq_len)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.tokens().flat_map(u32::to_le_bytes).collect();
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn tokens(&self) -> impl Iterator<Item = u32> + '_ {
        self.sequences.iter().flatten().copied()
    }

    pub fn n_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.n_tokens() == 0
    }

    /// Disjoint calibration and evaluation splits: the first
    /// `ceil(fraction · n)` sequences calibrate, the rest evaluate. Both
    /// sides are non-empty whenever there are at least two sequences.
    pub fn split(&self, calib_fraction: f64) -> Result<(Corpus, Corpus)> {
        if !(calib_fraction > 0.0 && calib_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "calibration fraction {calib_fraction} must lie strictly between 0 and 1"
            )));
        }
        let n = self.sequences.len();
        if n < 2 {
            return Err(Error::invalid(format!(
                "corpus has {n} sequence(s); splitting needs at least 2"
            )));
        }
        let k = ((calib_fraction * n as f64).ceil() as usize).clamp(1, n - 1);
        Ok((
            Corpus::new(self.sequences[..k].to_vec()),
            Corpus::new(self.sequences[k..].to_vec()),
        ))
    }
}
