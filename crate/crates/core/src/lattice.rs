//! Joiner output lattices and the symbols that index them.

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logspace::{log_softmax_in_place, log_sum_exp};

/// Tolerance on per-cell normalization of log-probability lattices.
pub const NORMALIZATION_TOL: f64 = 1e-6;

/// Output symbol inventory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    blank: usize,
    eos: Option<usize>,
}

impl Vocab {
    pub fn new(size: usize, blank: usize, eos: Option<usize>) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidVocab("size must be positive".into()));
        }
        if blank >= size {
            return Err(Error::InvalidVocab(format!("blank id {blank} >= size {size}")));
        }
        if let Some(e) = eos {
            if e >= size || e == blank {
                return Err(Error::InvalidVocab(format!(
                    "eos id {e} must be < {size} and differ from blank"
                )));
            }
        }
        Ok(Self { size, blank, eos })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn blank(&self) -> usize {
        self.blank
    }

    pub fn eos(&self) -> Option<usize> {
        self.eos
    }
}

/// Reference transcript: non-blank symbol ids, tied to the vocabulary it was
/// validated against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    tokens: Vec<usize>,
    vocab: Vocab,
}

impl Target {
    pub fn new(tokens: Vec<usize>, vocab: &Vocab) -> Result<Self> {
        for (i, &k) in tokens.iter().enumerate() {
            if k >= vocab.size() {
                return Err(Error::InvalidTarget(format!(
                    "token {i} = {k} outside vocabulary of size {}",
                    vocab.size()
                )));
            }
            if k == vocab.blank() {
                return Err(Error::InvalidTarget(format!("token {i} is the blank symbol")));
            }
        }
        Ok(Self { tokens, vocab: *vocab })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn blank(&self) -> usize {
        self.vocab.blank()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Addressing of DP cells `(t, u)` into a flat buffer.
///
/// Rows `u` run over `0..=U`; each row materializes a contiguous span of
/// frames. Cells outside the span are treated as log 0.
pub trait CellLayout {
    fn frames(&self) -> usize;
    /// Number of target tokens `U`; there are `U + 1` rows.
    fn tokens(&self) -> usize;
    fn span(&self, u: usize) -> RangeInclusive<usize>;
    fn cell(&self, t: usize, u: usize) -> Option<usize>;
    fn num_cells(&self) -> usize;
}

/// Full `T x (U + 1)` grid, frame-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseLayout {
    pub frames: usize,
    pub tokens: usize,
}

impl CellLayout for DenseLayout {
    fn frames(&self) -> usize {
        self.frames
    }

    fn tokens(&self) -> usize {
        self.tokens
    }

    fn span(&self, _u: usize) -> RangeInclusive<usize> {
        0..=self.frames - 1
    }

    #[inline]
    fn cell(&self, t: usize, u: usize) -> Option<usize> {
        (t < self.frames && u <= self.tokens).then(|| t * (self.tokens + 1) + u)
    }

    fn num_cells(&self) -> usize {
        self.frames * (self.tokens + 1)
    }
}

/// Dense log-probability lattice `logz[t][u][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    frames: usize,
    tokens: usize,
    symbols: usize,
    logz: Vec<f64>,
}

impl Lattice {
    /// Wraps normalized log-probabilities laid out as `[T][U + 1][D]`.
    pub fn from_log_probs(frames: usize, tokens: usize, symbols: usize, logz: Vec<f64>) -> Result<Self> {
        let lattice = Self::from_raw(frames, tokens, symbols, logz)?;
        for (cell, row) in lattice.logz.chunks_exact(symbols).enumerate() {
            if let Some(bad) = row.iter().find(|v| !v.is_finite() || **v > 0.0) {
                return Err(Error::InvalidLattice(format!("cell {cell} holds {bad}")));
            }
            let total = log_sum_exp(row);
            if total.abs() > NORMALIZATION_TOL {
                return Err(Error::InvalidLattice(format!(
                    "cell {cell} is not normalized (logsumexp = {total:e})"
                )));
            }
        }
        Ok(lattice)
    }

    /// Applies a log-softmax over the symbol axis of raw joiner scores.
    pub fn from_logits(frames: usize, tokens: usize, symbols: usize, mut logits: Vec<f64>) -> Result<Self> {
        check_dims(frames, symbols, logits.len(), frames * (tokens + 1) * symbols)?;
        if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidLattice(format!("non-finite logit {bad}")));
        }
        for row in logits.chunks_exact_mut(symbols) {
            log_softmax_in_place(row);
        }
        Ok(Self { frames, tokens, symbols, logz: logits })
    }

    /// Every cell holds the uniform distribution over `symbols`.
    pub fn uniform(frames: usize, tokens: usize, symbols: usize) -> Result<Self> {
        let v = -(symbols as f64).ln();
        Self::from_log_probs(frames, tokens, symbols, vec![v; frames * (tokens + 1) * symbols])
    }

    /// Unvalidated constructor; cells may hold `-inf` (e.g. after unpacking).
    pub(crate) fn from_raw(frames: usize, tokens: usize, symbols: usize, logz: Vec<f64>) -> Result<Self> {
        check_dims(frames, symbols, logz.len(), frames * (tokens + 1) * symbols)?;
        Ok(Self { frames, tokens, symbols, logz })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn symbols(&self) -> usize {
        self.symbols
    }

    pub fn layout(&self) -> DenseLayout {
        DenseLayout { frames: self.frames, tokens: self.tokens }
    }

    #[inline]
    pub fn index(&self, t: usize, u: usize, k: usize) -> usize {
        (t * (self.tokens + 1) + u) * self.symbols + k
    }

    #[inline]
    pub fn get(&self, t: usize, u: usize, k: usize) -> f64 {
        self.logz[self.index(t, u, k)]
    }

    /// The `D` log-probabilities of cell `(t, u)`.
    pub fn cell(&self, t: usize, u: usize) -> &[f64] {
        let start = self.index(t, u, 0);
        &self.logz[start..start + self.symbols]
    }

    pub fn values(&self) -> &[f64] {
        &self.logz
    }

    pub fn into_values(self) -> Vec<f64> {
        self.logz
    }
}

fn check_dims(frames: usize, symbols: usize, got: usize, want: usize) -> Result<()> {
    if frames == 0 {
        return Err(Error::DimensionMismatch("lattice needs at least one frame".into()));
    }
    if symbols == 0 {
        return Err(Error::DimensionMismatch("lattice needs at least one symbol".into()));
    }
    if got != want {
        return Err(Error::DimensionMismatch(format!("expected {want} values, got {got}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_invariants() {
        assert!(Vocab::new(3, 0, None).is_ok());
        assert!(Vocab::new(3, 3, None).is_err());
        assert!(Vocab::new(3, 0, Some(0)).is_err());
        assert!(Vocab::new(3, 0, Some(3)).is_err());
        assert!(Vocab::new(0, 0, None).is_err());
    }

    #[test]
    fn target_rejects_blank_and_oov() {
        let v = Vocab::new(4, 0, None).unwrap();
        assert!(Target::new(vec![1, 3], &v).is_ok());
        assert!(Target::new(vec![0], &v).is_err());
        assert!(Target::new(vec![4], &v).is_err());
        assert!(Target::new(vec![], &v).unwrap().is_empty());
    }

    #[test]
    fn lattice_validation() {
        assert!(Lattice::uniform(2, 1, 3).is_ok());
        let bad = vec![0.0; 2 * 2 * 3];
        assert!(matches!(
            Lattice::from_log_probs(2, 1, 3, bad),
            Err(Error::InvalidLattice(_))
        ));
        assert!(matches!(
            Lattice::from_log_probs(2, 1, 3, vec![0.0; 5]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn logits_are_normalized() {
        let logits: Vec<f64> = (0..2 * 3 * 4).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let lat = Lattice::from_logits(2, 2, 4, logits).unwrap();
        for t in 0..2 {
            for u in 0..3 {
                assert!(log_sum_exp(lat.cell(t, u)).abs() < 1e-12);
            }
        }
    }
}
