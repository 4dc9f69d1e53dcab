//! Packed versus dense timing of the softmax-fused restricted loss.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::band::{make_band, pack_values, AlignLabels, BandPlan};
use crate::error::{Error, Result};
use crate::lattice::{Target, Vocab};
use crate::loss::{loss_from_logits, packed_loss_from_logits};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub frames: usize,
    pub tokens: usize,
    pub symbols: usize,
    pub left: usize,
    pub right: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { frames: 200, tokens: 40, symbols: 512, left: 0, right: 10, iters: 5, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    /// `(U + 1) * T` lattice cells.
    pub dense_cells: usize,
    /// Cells stored by the band layout.
    pub packed_cells: usize,
    pub cell_ratio: f64,
    /// Best-of-iterations wall time per loss evaluation.
    pub dense_seconds: f64,
    pub packed_seconds: f64,
    pub speedup: f64,
    /// `|dense loss - packed loss|`.
    pub loss_gap: f64,
}

impl BenchReport {
    pub fn dense_values(&self, symbols: usize) -> usize {
        self.dense_cells * symbols
    }

    pub fn packed_values(&self, symbols: usize) -> usize {
        self.packed_cells * symbols
    }
}

/// Evenly spaced, strictly increasing labels over the utterance.
pub fn spread_labels(frames: usize, tokens: usize) -> Result<AlignLabels> {
    AlignLabels::new((1..=tokens).map(|u| u * frames / (tokens + 1)).collect())
}

fn best_of<F: FnMut() -> Result<f64>>(iters: usize, mut f: F) -> Result<(Duration, f64)> {
    let mut best = Duration::MAX;
    let mut value = 0.0;
    for _ in 0..iters {
        let start = Instant::now();
        value = f()?;
        best = best.min(start.elapsed());
    }
    Ok((best, value))
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.frames == 0 || cfg.symbols < 2 || cfg.iters == 0 {
        return Err(Error::InvalidArgument("bench needs T >= 1, D >= 2 and at least one iteration".into()));
    }
    let vocab = Vocab::new(cfg.symbols, 0, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tokens: Vec<usize> = (0..cfg.tokens).map(|u| 1 + u % (cfg.symbols - 1)).collect();
    let target = Target::new(tokens, &vocab)?;
    let plan: BandPlan = make_band(&spread_labels(cfg.frames, cfg.tokens)?, cfg.frames, cfg.left, cfg.right)?;
    let dense_cells = cfg.frames * (cfg.tokens + 1);
    let logits: Vec<f64> =
        (0..dense_cells * cfg.symbols).map(|_| StandardNormal.sample(&mut rng)).collect();
    let packed = pack_values(&logits, cfg.frames, cfg.tokens, cfg.symbols, &plan)?;

    let (dense_time, dense_loss) =
        best_of(cfg.iters, || Ok(loss_from_logits(&logits, cfg.frames, cfg.symbols, &target, Some(&plan))?.loss))?;
    let (packed_time, packed_loss) = best_of(cfg.iters, || Ok(packed_loss_from_logits(&packed, &target)?.loss))?;

    let packed_cells = plan.packed_cells();
    let dense_seconds = dense_time.as_secs_f64();
    let packed_seconds = packed_time.as_secs_f64();
    Ok(BenchReport {
        dense_cells,
        packed_cells,
        cell_ratio: dense_cells as f64 / packed_cells as f64,
        dense_seconds,
        packed_seconds,
        speedup: dense_seconds / packed_seconds.max(f64::MIN_POSITIVE),
        loss_gap: (dense_loss - packed_loss).abs(),
    })
}
