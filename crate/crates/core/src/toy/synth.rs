//! Synthetic aligned "speech" with known token end frames.
//!
//! Each token is a short voiced segment whose frames weakly encode the token
//! identity, followed by an unvoiced tail: a few more weak frames, then a
//! strong identity cue. The reference end frame is the last voiced frame, so
//! a causal model recognizes a token reliably only if it may emit it several
//! frames after that end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::Vocab;

/// Feature dimension of every frame.
pub const FEATURES: usize = 8;
const VOICING: usize = 6;
const TAIL: usize = 7;
/// Identity dimensions available for non-blank tokens.
const MAX_TOKENS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub tokens_per_utt: (usize, usize),
    pub segment_frames: (usize, usize),
    /// Weak tail frames right after the reference end.
    pub weak_tail: usize,
    /// Strong-cue frames that follow the weak tail.
    pub strong_frames: (usize, usize),
    pub gap_frames: (usize, usize),
    pub lead_frames: (usize, usize),
    pub weak_amp: f64,
    pub strong_amp: f64,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            tokens_per_utt: (2, 4),
            segment_frames: (3, 6),
            weak_tail: 5,
            strong_frames: (2, 4),
            gap_frames: (1, 2),
            lead_frames: (1, 3),
            weak_amp: 0.3,
            strong_amp: 1.0,
            noise: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthUtterance {
    pub id: String,
    /// Row-major `[T][FEATURES]`.
    pub features: Vec<f64>,
    pub tokens: Vec<usize>,
    /// Last voiced frame of each token.
    pub end_frames: Vec<usize>,
}

impl SynthUtterance {
    pub fn frames(&self) -> usize {
        self.features.len() / FEATURES
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.features[t * FEATURES..(t + 1) * FEATURES]
    }

    /// Little-endian dump used for determinism checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(self.id.as_bytes());
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.tokens.iter().chain(&self.end_frames) {
            out.extend_from_slice(&(*v as u64).to_le_bytes());
        }
        out
    }
}

fn symbols(vocab: &Vocab) -> Vec<usize> {
    (0..vocab.size()).filter(|&k| k != vocab.blank() && Some(k) != vocab.eos()).collect()
}

pub fn synth_corpus(n: usize, vocab: &Vocab, seed: u64) -> Result<Vec<SynthUtterance>> {
    synth_corpus_with(n, vocab, seed, &SynthConfig::default())
}

pub fn synth_corpus_with(n: usize, vocab: &Vocab, seed: u64, cfg: &SynthConfig) -> Result<Vec<SynthUtterance>> {
    if n == 0 {
        return Err(Error::InvalidArgument("corpus size must be at least 1".into()));
    }
    let syms = symbols(vocab);
    if syms.is_empty() || syms.len() > MAX_TOKENS {
        return Err(Error::InvalidVocab(format!(
            "synthetic corpus supports 1..={MAX_TOKENS} emitting symbols, got {}",
            syms.len()
        )));
    }
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let range = |rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)| rng.random_range(lo..=hi);

    let mut corpus = Vec::with_capacity(n);
    for i in 0..n {
        let count = range(&mut rng, cfg.tokens_per_utt);
        let mut frames: Vec<[f64; FEATURES]> = Vec::new();
        let mut tokens = Vec::with_capacity(count);
        let mut ends = Vec::with_capacity(count);
        for _ in 0..range(&mut rng, cfg.lead_frames) {
            frames.push([0.0; FEATURES]);
        }
        let mut last: Option<usize> = None;
        for _ in 0..count {
            // No immediate repeats: adjacent identical tokens would differ only
            // by a short silence gap.
            let slot = match last {
                Some(prev) if syms.len() > 1 => (prev + rng.random_range(1..syms.len())) % syms.len(),
                _ => rng.random_range(0..syms.len()),
            };
            last = Some(slot);
            let seg = range(&mut rng, cfg.segment_frames);
            for _ in 0..seg {
                let mut f = [0.0; FEATURES];
                f[slot] = cfg.weak_amp;
                f[VOICING] = 1.0;
                frames.push(f);
            }
            ends.push(frames.len() - 1);
            tokens.push(syms[slot]);
            let strong = range(&mut rng, cfg.strong_frames);
            for j in 0..cfg.weak_tail + strong {
                let mut f = [0.0; FEATURES];
                f[slot] = if j < cfg.weak_tail { cfg.weak_amp } else { cfg.strong_amp };
                f[TAIL] = 1.0;
                frames.push(f);
            }
            for _ in 0..range(&mut rng, cfg.gap_frames) {
                frames.push([0.0; FEATURES]);
            }
        }
        let mut features = Vec::with_capacity(frames.len() * FEATURES);
        for f in frames {
            for v in f {
                features.push(v + noise.sample(&mut rng));
            }
        }
        corpus.push(SynthUtterance { id: format!("synth-{seed}-{i:05}"), features, tokens, end_frames: ends });
    }
    Ok(corpus)
}
