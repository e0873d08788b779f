//! Named, seeded random streams.
//!
//! Each stream is a ChaCha8 generator keyed by SHA-256 over the run seed and
//! the stream label, so "mobility" draws never perturb "traffic" draws and
//! the sequence is identical on every platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RngError {
    #[error("empty interval: lo {lo} > hi {hi}")]
    EmptyInterval { lo: f64, hi: f64 },
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    label: String,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, label: &str) -> Self {
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(label.as_bytes());
        let key: [u8; 32] = h.finalize().into();
        RngStream {
            seed,
            label: label.to_string(),
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// A value in `[lo, hi)`; exactly `lo` when the interval is degenerate.
    pub fn draw_uniform(&mut self, lo: f64, hi: f64) -> Result<f64, RngError> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(RngError::EmptyInterval { lo, hi });
        }
        if lo == hi {
            return Ok(lo);
        }
        let u: f64 = self.rng.gen();
        let v = lo + (hi - lo) * u;
        // rounding can land exactly on hi for wide intervals
        Ok(if v >= hi { hi.next_down().max(lo) } else { v })
    }

    /// Uniform integer in the inclusive range `[lo, hi]`.
    pub fn draw_int(&mut self, lo: u64, hi: u64) -> Result<u64, RngError> {
        if lo > hi {
            return Err(RngError::EmptyInterval {
                lo: lo as f64,
                hi: hi as f64,
            });
        }
        Ok(self.rng.gen_range(lo..=hi))
    }

    /// Bernoulli trial with success probability `p` (clamped to [0, 1]).
    pub fn chance(&mut self, p: f64) -> bool {
        let u: f64 = self.rng.gen();
        u < p.clamp(0.0, 1.0)
    }

    /// Index into a collection of length `len` (> 0).
    pub fn pick(&mut self, len: usize) -> usize {
        assert!(len > 0, "pick from empty collection");
        self.rng.gen_range(0..len)
    }
}
