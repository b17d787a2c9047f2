//! Byte-level corpus with a deterministic train/validation split, random
//! training windows and non-overlapping evaluation windows.

use std::path::Path;

use rand::Rng;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    bytes: Vec<u8>,
    split: usize,
}

impl Corpus {
    /// The first `floor(len · split_fraction)` bytes train, the rest validate.
    pub fn from_bytes(bytes: Vec<u8>, split_fraction: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&split_fraction) {
            return Err(HarnessError::Config(format!("split must be in [0, 1], got {split_fraction}")));
        }
        let split = ((bytes.len() as f64 * split_fraction).floor() as usize).min(bytes.len());
        Ok(Self { bytes, split })
    }

    pub fn train(&self) -> &[u8] {
        &self.bytes[..self.split]
    }

    pub fn valid(&self) -> &[u8] {
        &self.bytes[self.split..]
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

pub fn load_corpus(path: &Path, split_fraction: f64) -> Result<Corpus> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(HarnessError::CorpusNotFound(path.to_path_buf()))
        }
        Err(e) => return Err(HarnessError::io(path)(e)),
    };
    if bytes.is_empty() {
        return Err(HarnessError::EmptyCorpus(path.to_path_buf()));
    }
    Corpus::from_bytes(bytes, split_fraction)
}

/// `batch` windows of `seq_len` inputs, each with its shifted targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
}

/// Endless stream of random contiguous training windows.
#[derive(Debug)]
pub struct TrainBatches<'a, R> {
    tokens: &'a [u8],
    seq_len: usize,
    batch: usize,
    rng: R,
}

pub fn make_batches<R: Rng>(tokens: &[u8], seq_len: usize, batch: usize, rng: R) -> Result<TrainBatches<'_, R>> {
    if seq_len == 0 || batch == 0 {
        return Err(HarnessError::Config("seq_len and batch size must be positive".into()));
    }
    if tokens.len() < seq_len + 1 {
        return Err(HarnessError::CorpusTooShort {
            need: seq_len + 1,
            have: tokens.len(),
        });
    }
    Ok(TrainBatches {
        tokens,
        seq_len,
        batch,
        rng,
    })
}

impl<R: Rng> TrainBatches<'_, R> {
    pub fn rng_mut(&mut self) -> &mut R {
        &mut self.rng
    }
}

impl<R: Rng> Iterator for TrainBatches<'_, R> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let span = self.seq_len + 1;
        let last_start = self.tokens.len() - span;
        let mut inputs = Vec::with_capacity(self.batch * self.seq_len);
        let mut targets = Vec::with_capacity(self.batch * self.seq_len);
        for _ in 0..self.batch {
            let s = self.rng.random_range(0..=last_start);
            let w = &self.tokens[s..s + span];
            inputs.extend(w[..self.seq_len].iter().map(|&b| b as usize));
            targets.extend(w[1..].iter().map(|&b| b as usize));
        }
        Some(Batch {
            inputs,
            targets,
            batch: self.batch,
            seq_len: self.seq_len,
        })
    }
}

/// Non-overlapping evaluation windows: window `i` predicts tokens
/// `i·S+1 ..= (i+1)·S` from the `S` tokens before each.
#[derive(Debug, Clone, Copy)]
pub struct EvalWindows<'a> {
    tokens: &'a [u8],
    seq_len: usize,
}

impl<'a> EvalWindows<'a> {
    pub fn new(tokens: &'a [u8], seq_len: usize) -> Result<Self> {
        if seq_len == 0 {
            return Err(HarnessError::Config("eval length must be positive".into()));
        }
        if tokens.len() < seq_len + 1 {
            return Err(HarnessError::CorpusTooShort {
                need: seq_len + 1,
                have: tokens.len(),
            });
        }
        Ok(Self { tokens, seq_len })
    }

    pub fn count(&self) -> usize {
        (self.tokens.len() - 1) / self.seq_len
    }

    /// Tokens never used as inputs because they fall past the last full window.
    pub fn dropped(&self) -> usize {
        self.tokens.len() - self.count() * self.seq_len
    }

    /// `(inputs, targets)` of window `i`.
    pub fn window(&self, i: usize) -> (&'a [u8], &'a [u8]) {
        let s = i * self.seq_len;
        (&self.tokens[s..s + self.seq_len], &self.tokens[s + 1..s + self.seq_len + 1])
    }
}
