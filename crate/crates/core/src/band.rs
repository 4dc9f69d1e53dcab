//! Emission windows derived from alignment labels, and the packed cell layout
//! that stores only the band-reachable part of the lattice.
//!
//! Token `u` (1-based) may be emitted at frame `t` only when
//! `a_u - b_l <= t <= a_u + b_r`. With non-decreasing labels, a DP cell
//! `(t, u)` carries forward mass iff `t >= v_l(u)` and backward mass iff
//! `t <= v_r(u + 1)`, so row `u` is materialized over `[lo(u), hi(u)]` with
//! `lo(u) = v_l(u)` and `hi(u) = v_r(u + 1)`. Rows are concatenated in `u`
//! order and addressed through a prefix sum of the row lengths.

use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{CellLayout, Lattice};

/// Encoder-frame index per target token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignLabels(Vec<usize>);

impl AlignLabels {
    /// Non-monotone labels are rejected, never repaired.
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        if let Some(i) = labels.windows(2).position(|w| w[1] < w[0]) {
            return Err(Error::BandInfeasible(format!(
                "alignment labels decrease at token {} ({} -> {})",
                i + 2,
                labels[i],
                labels[i + 1]
            )));
        }
        Ok(Self(labels))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Whether every label is a valid frame index for `frames` frames.
    pub fn fits(&self, frames: usize) -> bool {
        self.0.iter().all(|&a| a < frames)
    }

    /// Appends the end-of-sentence label, pinned to the final frame.
    pub fn with_eos(&self, frames: usize) -> Result<Self> {
        if frames == 0 {
            return Err(Error::InvalidArgument("zero frames".into()));
        }
        let mut v = self.0.clone();
        v.push(frames - 1);
        Self::new(v)
    }
}

/// Per-token emission windows plus the packed row spans.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandPlan {
    frames: usize,
    left: usize,
    right: usize,
    labels: AlignLabels,
    windows: Vec<(usize, usize)>,
    lo: Vec<usize>,
    hi: Vec<usize>,
    offsets: Vec<usize>,
}

/// Builds the band for `frames` encoder frames and buffers `left` / `right`.
pub fn make_band(labels: &AlignLabels, frames: usize, left: usize, right: usize) -> Result<BandPlan> {
    if frames == 0 {
        return Err(Error::DimensionMismatch("band needs at least one frame".into()));
    }
    let last = frames - 1;
    let windows: Vec<(usize, usize)> = labels
        .as_slice()
        .iter()
        .map(|&a| (a.saturating_sub(left), a.saturating_add(right).min(last)))
        .collect();
    if let Some((i, &(l, r))) = windows.iter().enumerate().find(|(_, (l, r))| l > r) {
        return Err(Error::BandInfeasible(format!(
            "token {} window [{l}, {r}] is empty for {frames} frames",
            i + 1
        )));
    }
    let u_max = windows.len();
    let lo: Vec<usize> = (0..=u_max).map(|u| if u == 0 { 0 } else { windows[u - 1].0 }).collect();
    let hi: Vec<usize> = (0..=u_max).map(|u| if u == u_max { last } else { windows[u].1 }).collect();

    let mut offsets = Vec::with_capacity(u_max + 2);
    offsets.push(0);
    for u in 0..=u_max {
        debug_assert!(lo[u] <= hi[u]);
        offsets.push(offsets[u] + hi[u] - lo[u] + 1);
    }
    Ok(BandPlan { frames, left, right, labels: labels.clone(), windows, lo, hi, offsets })
}

impl BandPlan {
    /// Band that admits every alignment.
    pub fn vacuous(frames: usize, tokens: usize) -> Result<Self> {
        make_band(&AlignLabels(vec![0; tokens]), frames, frames, frames)
    }

    pub fn left(&self) -> usize {
        self.left
    }

    pub fn right(&self) -> usize {
        self.right
    }

    pub fn labels(&self) -> &AlignLabels {
        &self.labels
    }

    /// Clipped emission window `(v_l, v_r)` of 1-based token `u`.
    pub fn window(&self, u: usize) -> (usize, usize) {
        self.windows[u - 1]
    }

    pub fn windows(&self) -> &[(usize, usize)] {
        &self.windows
    }

    /// Whether 1-based token `u` may be emitted at frame `t`.
    #[inline]
    pub fn allows(&self, u: usize, t: usize) -> bool {
        let (l, r) = self.windows[u - 1];
        l <= t && t <= r
    }

    pub fn row_lo(&self) -> &[usize] {
        &self.lo
    }

    pub fn row_hi(&self) -> &[usize] {
        &self.hi
    }

    /// Prefix sums of row lengths; `offsets[u]` is the first packed cell of row `u`.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Total packed cell count `V`.
    pub fn packed_cells(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// `T + U (b_l + b_r + 1) + (U + 1)`.
    pub fn cell_bound(&self) -> usize {
        let u = self.windows.len();
        self.frames + u * (self.left + self.right + 1) + u + 1
    }
}

impl CellLayout for BandPlan {
    fn frames(&self) -> usize {
        self.frames
    }

    fn tokens(&self) -> usize {
        self.windows.len()
    }

    fn span(&self, u: usize) -> RangeInclusive<usize> {
        self.lo[u]..=self.hi[u]
    }

    #[inline]
    fn cell(&self, t: usize, u: usize) -> Option<usize> {
        if u >= self.lo.len() || t < self.lo[u] || t > self.hi[u] {
            None
        } else {
            Some(self.offsets[u] + t - self.lo[u])
        }
    }

    fn num_cells(&self) -> usize {
        self.packed_cells()
    }
}

/// Band-only storage: `V x D` values plus the plan that indexes them.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedTensor {
    plan: BandPlan,
    symbols: usize,
    values: Vec<f64>,
}

impl PackedTensor {
    pub fn new(plan: BandPlan, symbols: usize, values: Vec<f64>) -> Result<Self> {
        let want = plan.packed_cells() * symbols;
        if symbols == 0 || values.len() != want {
            return Err(Error::ShapeMismatch(format!(
                "packed buffer needs {want} values, got {}",
                values.len()
            )));
        }
        Ok(Self { plan, symbols, values })
    }

    pub fn plan(&self) -> &BandPlan {
        &self.plan
    }

    pub fn symbols(&self) -> usize {
        self.symbols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn index(&self, t: usize, u: usize, k: usize) -> Option<usize> {
        self.plan.cell(t, u).map(|c| c * self.symbols + k)
    }

    /// Value at `(t, u, k)`; out-of-band cells read as log 0.
    pub fn get(&self, t: usize, u: usize, k: usize) -> f64 {
        self.index(t, u, k).map_or(f64::NEG_INFINITY, |i| self.values[i])
    }

    pub fn cell(&self, t: usize, u: usize) -> Option<&[f64]> {
        self.plan.cell(t, u).map(|c| &self.values[c * self.symbols..(c + 1) * self.symbols])
    }

    /// Scatters into a dense `[T][U + 1][D]` buffer, filling out-of-band cells.
    pub fn to_dense(&self, fill: f64) -> Vec<f64> {
        let t_max = self.plan.frames();
        let rows = self.plan.tokens() + 1;
        let d = self.symbols;
        let mut out = vec![fill; t_max * rows * d];
        for u in 0..rows {
            for t in self.plan.span(u) {
                let src = self.plan.cell(t, u).unwrap() * d;
                let dst = (t * rows + u) * d;
                out[dst..dst + d].copy_from_slice(&self.values[src..src + d]);
            }
        }
        out
    }
}

/// Gathers the in-band cells of a dense lattice.
pub fn pack(dense: &Lattice, plan: &BandPlan) -> Result<PackedTensor> {
    pack_values(dense.values(), dense.frames(), dense.tokens(), dense.symbols(), plan)
}

/// Gathers in-band cells from any dense `[T][U + 1][D]` buffer (logits, gradients).
pub fn pack_values(values: &[f64], frames: usize, tokens: usize, symbols: usize, plan: &BandPlan) -> Result<PackedTensor> {
    if plan.frames() != frames || plan.tokens() != tokens {
        return Err(Error::ShapeMismatch(format!(
            "plan covers T={} U={}, lattice has T={frames} U={tokens}",
            plan.frames(),
            plan.tokens()
        )));
    }
    if values.len() != frames * (tokens + 1) * symbols {
        return Err(Error::ShapeMismatch("dense buffer length".into()));
    }
    let rows = tokens + 1;
    let mut out = Vec::with_capacity(plan.packed_cells() * symbols);
    for u in 0..rows {
        for t in plan.span(u) {
            let src = (t * rows + u) * symbols;
            out.extend_from_slice(&values[src..src + symbols]);
        }
    }
    PackedTensor::new(plan.clone(), symbols, out)
}

/// Scatters back to a dense lattice; out-of-band cells become log 0.
pub fn unpack(packed: &PackedTensor) -> Lattice {
    Lattice::from_raw(
        packed.plan.frames(),
        packed.plan.tokens(),
        packed.symbols,
        packed.to_dense(f64::NEG_INFINITY),
    )
    .expect("plan dimensions are consistent")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(v: &[usize]) -> AlignLabels {
        AlignLabels::new(v.to_vec()).unwrap()
    }

    #[test]
    fn single_token_window_arithmetic() {
        let plan = make_band(&labels(&[10]), 12, 3, 2).unwrap();
        assert_eq!(plan.window(1), (7, 11));
        assert_eq!(plan.row_lo(), &[0, 7]);
        assert_eq!(plan.row_hi(), &[11, 11]);
        assert_eq!(plan.packed_cells(), 17);
    }

    #[test]
    fn zero_buffer_two_tokens() {
        let plan = make_band(&labels(&[0, 1]), 3, 0, 0).unwrap();
        assert_eq!(plan.windows(), &[(0, 0), (1, 1)]);
        assert_eq!(plan.row_lo(), &[0, 0, 1]);
        assert_eq!(plan.row_hi(), &[0, 1, 2]);
        assert_eq!(plan.packed_cells(), 5);
        assert!(plan.packed_cells() <= plan.cell_bound());
    }

    #[test]
    fn vacuous_band_is_dense() {
        let plan = make_band(&labels(&[1, 3, 3]), 6, 6, 6).unwrap();
        assert!(plan.windows().iter().all(|&w| w == (0, 5)));
        assert_eq!(plan.packed_cells(), 4 * 6);
    }

    #[test]
    fn decreasing_labels_rejected() {
        assert!(matches!(AlignLabels::new(vec![3, 2]), Err(Error::BandInfeasible(_))));
    }

    #[test]
    fn empty_window_is_infeasible() {
        let err = make_band(&labels(&[5]), 3, 1, 0).unwrap_err();
        assert!(err.is_band_infeasible());
        assert!(make_band(&labels(&[5]), 3, 3, 0).is_ok());
    }

    #[test]
    fn eos_label_is_last_frame() {
        assert_eq!(labels(&[1, 4]).with_eos(9).unwrap().as_slice(), &[1, 4, 8]);
    }

    #[test]
    fn pack_unpack_round_trip() {
        let vals: Vec<f64> = (0..4 * 3 * 2).map(|i| -(i as f64) * 0.1 - 0.01).collect();
        let dense = Lattice::from_raw(4, 2, 2, vals).unwrap();
        let plan = make_band(&labels(&[1, 2]), 4, 0, 1).unwrap();
        let packed = pack(&dense, &plan).unwrap();
        assert_eq!(packed.values().len(), plan.packed_cells() * 2);
        let back = unpack(&packed);
        for t in 0..4 {
            for u in 0..3 {
                for k in 0..2 {
                    if plan.cell(t, u).is_some() {
                        assert_eq!(back.get(t, u, k).to_bits(), dense.get(t, u, k).to_bits());
                    } else {
                        assert_eq!(back.get(t, u, k), f64::NEG_INFINITY);
                        assert_eq!(packed.get(t, u, k), f64::NEG_INFINITY);
                    }
                }
            }
        }
    }

    #[test]
    fn pack_shape_mismatch() {
        let dense = Lattice::uniform(4, 2, 2).unwrap();
        let plan = make_band(&labels(&[1]), 4, 0, 1).unwrap();
        assert!(matches!(pack(&dense, &plan), Err(Error::ShapeMismatch(_))));
    }
}
