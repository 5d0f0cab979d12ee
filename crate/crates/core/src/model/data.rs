use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::rng::RngStream;

/// Target id that contributes nothing to the loss.
pub const IGNORE_TARGET: u32 = u32::MAX;

/// `batch_size` sequences of `seq_len` tokens with next-token targets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub batch_size: usize,
    pub seq_len: usize,
    pub tokens: Vec<u32>,
    pub targets: Vec<u32>,
}

impl Batch {
    pub fn new(batch_size: usize, seq_len: usize, tokens: Vec<u32>, targets: Vec<u32>) -> Result<Self> {
        if batch_size == 0 || seq_len == 0 {
            return Err(invalid("empty batch"));
        }
        let n = batch_size * seq_len;
        if tokens.len() != n || targets.len() != n {
            return Err(invalid(format!(
                "batch {batch_size}x{seq_len} needs {n} tokens and targets, got {} and {}",
                tokens.len(),
                targets.len()
            )));
        }
        Ok(Self {
            batch_size,
            seq_len,
            tokens,
            targets,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    /// Hex SHA-256 over the token and target ids.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.batch_size as u64).to_le_bytes());
        h.update((self.seq_len as u64).to_le_bytes());
        for t in self.tokens.iter().chain(&self.targets) {
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Seeded order-2 Markov source. The next token is drawn from a sparse
/// table keyed on the previous token with probability 0.6, otherwise from a
/// table keyed on the token before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkovSource {
    pub vocab: usize,
    pub seed: u64,
}

const CANDIDATES: usize = 4;
const CANDIDATE_PROBS: [f64; CANDIDATES] = [0.55, 0.25, 0.15, 0.05];
const RECENT_WEIGHT: f64 = 0.6;

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl MarkovSource {
    pub fn new(vocab: usize, seed: u64) -> Self {
        Self { vocab, seed }
    }

    fn candidate(&self, table: u64, prev: u32, slot: usize) -> u32 {
        let h = mix(mix(self.seed ^ table, prev as u64), slot as u64);
        (h % self.vocab as u64) as u32
    }

    fn pick(&self, table: u64, prev: u32, u: f64) -> u32 {
        let mut acc = 0.0;
        for (slot, p) in CANDIDATE_PROBS.iter().enumerate() {
            acc += p;
            if u < acc {
                return self.candidate(table, prev, slot);
            }
        }
        self.candidate(table, prev, CANDIDATES - 1)
    }

    pub fn next_token(&self, before: u32, last: u32, rng: &mut impl Rng) -> u32 {
        let which: f64 = rng.random();
        let u: f64 = rng.random();
        if which < RECENT_WEIGHT {
            self.pick(1, last, u)
        } else {
            self.pick(2, before, u)
        }
    }

    /// One batch drawn from a fresh generator on `rng`.
    pub fn batch(&self, batch_size: usize, seq_len: usize, rng: &RngStream) -> Result<Batch> {
        let mut g = rng.generator();
        let mut tokens = Vec::with_capacity(batch_size * seq_len);
        let mut targets = Vec::with_capacity(batch_size * seq_len);
        for _ in 0..batch_size {
            let mut seq: Vec<u32> = vec![
                g.random_range(0..self.vocab as u32),
                g.random_range(0..self.vocab as u32),
            ];
            while seq.len() < seq_len + 1 {
                let n = seq.len();
                let t = self.next_token(seq[n - 2], seq[n - 1], &mut g);
                seq.push(t);
            }
            tokens.extend_from_slice(&seq[..seq_len]);
            targets.extend_from_slice(&seq[1..]);
        }
        Batch::new(batch_size, seq_len, tokens, targets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_are_deterministic_and_shifted() {
        let src = MarkovSource::new(256, 3);
        let a = src.batch(4, 16, &RngStream::new(1)).unwrap();
        let b = src.batch(4, 16, &RngStream::new(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
        for s in 0..4 {
            for t in 0..15 {
                assert_eq!(a.tokens[s * 16 + t + 1], a.targets[s * 16 + t]);
            }
        }
        assert!(a.tokens.iter().all(|&t| t < 256));
        let c = src.batch(4, 16, &RngStream::new(2)).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn source_is_sparse() {
        // Given the previous two tokens at most 2*CANDIDATES continuations occur.
        let src = MarkovSource::new(256, 9);
        let mut g = RngStream::new(0).generator();
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..2000 {
            seen.insert(src.next_token(10, 20, &mut g));
        }
        assert!(seen.len() <= 2 * CANDIDATES);
    }

    #[test]
    fn rejects_inconsistent_batches() {
        assert!(Batch::new(2, 2, vec![0; 3], vec![0; 4]).is_err());
        assert!(Batch::new(0, 2, vec![], vec![]).is_err());
    }
}
