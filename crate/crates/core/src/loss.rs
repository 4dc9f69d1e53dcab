//! Transducer loss by forward-backward over the `(t, u)` lattice.
//!
//! All arithmetic is in the natural-log domain. Frames are 0-based; the
//! forward variable starts at `alpha(0, 0) = 0` and the sequence probability
//! is `alpha(T - 1, U) + logz(blank, T - 1, U)` (every alignment ends with a
//! blank on the last frame). When a band is supplied, the emission of token
//! `u` at frame `t` is masked unless the band allows it; blank transitions
//! are never masked.

use rayon::prelude::*;

use crate::band::{BandPlan, PackedTensor};
use crate::error::{Error, Result};
use crate::lattice::{CellLayout, DenseLayout, Lattice, Target};
use crate::logspace::{log_add, log_sum_exp};

/// Largest `T + U` accepted by [`brute_force_loss`].
pub const BRUTE_FORCE_LIMIT: usize = 20;

/// Denominator floor of the relative error used by [`grad_check`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Loss and its gradient, laid out like the input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Log-domain forward and backward tables over a cell layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaBeta<L> {
    layout: L,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl<L: CellLayout> AlphaBeta<L> {
    pub fn layout(&self) -> &L {
        &self.layout
    }

    /// `alpha(t, u)`; cells the layout does not store read as log 0.
    pub fn alpha(&self, t: usize, u: usize) -> f64 {
        self.layout.cell(t, u).map_or(f64::NEG_INFINITY, |c| self.alpha[c])
    }

    pub fn beta(&self, t: usize, u: usize) -> f64 {
        self.layout.cell(t, u).map_or(f64::NEG_INFINITY, |c| self.beta[c])
    }

    pub fn alpha_values(&self) -> &[f64] {
        &self.alpha
    }

    pub fn beta_values(&self) -> &[f64] {
        &self.beta
    }
}

fn check_shapes<L: CellLayout>(layout: &L, symbols: usize, target: &Target, band: Option<&BandPlan>) -> Result<()> {
    if layout.tokens() != target.len() {
        return Err(Error::DimensionMismatch(format!(
            "lattice has {} rows, target needs {}",
            layout.tokens() + 1,
            target.len() + 1
        )));
    }
    if symbols != target.vocab().size() {
        return Err(Error::DimensionMismatch(format!(
            "lattice has {symbols} symbols, vocabulary has {}",
            target.vocab().size()
        )));
    }
    if let Some(plan) = band {
        if plan.frames() != layout.frames() || plan.tokens() != target.len() {
            return Err(Error::DimensionMismatch(format!(
                "band covers T={} U={}, lattice has T={} U={}",
                plan.frames(),
                plan.tokens(),
                layout.frames(),
                target.len()
            )));
        }
    }
    Ok(())
}

/// Runs the forward and backward recursions and returns `(log P, alpha, beta)`.
///
/// `logz(cell, k)` reads the log-probability of symbol `k` at a stored cell.
fn recursions<L, F>(layout: &L, target: &Target, band: Option<&BandPlan>, logz: F) -> (f64, Vec<f64>, Vec<f64>)
where
    L: CellLayout,
    F: Fn(usize, usize) -> f64,
{
    let blank = target.blank();
    let y = target.tokens();
    let frames = layout.frames();
    let rows = y.len();
    let allowed = |u: usize, t: usize| band.is_none_or(|b| b.allows(u, t));

    let mut alpha = vec![f64::NEG_INFINITY; layout.num_cells()];
    for u in 0..=rows {
        for t in layout.span(u) {
            let c = layout.cell(t, u).unwrap();
            if t == 0 && u == 0 {
                alpha[c] = 0.0;
                continue;
            }
            let mut acc = f64::NEG_INFINITY;
            if t > 0 {
                if let Some(p) = layout.cell(t - 1, u) {
                    acc = alpha[p] + logz(p, blank);
                }
            }
            if u > 0 && allowed(u, t) {
                if let Some(p) = layout.cell(t, u - 1) {
                    acc = log_add(acc, alpha[p] + logz(p, y[u - 1]));
                }
            }
            alpha[c] = acc;
        }
    }

    let mut beta = vec![f64::NEG_INFINITY; layout.num_cells()];
    for u in (0..=rows).rev() {
        for t in layout.span(u).rev() {
            let c = layout.cell(t, u).unwrap();
            if t == frames - 1 && u == rows {
                beta[c] = logz(c, blank);
                continue;
            }
            let mut acc = f64::NEG_INFINITY;
            if t + 1 < frames {
                if let Some(n) = layout.cell(t + 1, u) {
                    acc = beta[n] + logz(c, blank);
                }
            }
            if u < rows && allowed(u + 1, t) {
                if let Some(n) = layout.cell(t, u + 1) {
                    acc = log_add(acc, beta[n] + logz(c, y[u]));
                }
            }
            beta[c] = acc;
        }
    }

    let end = layout.cell(frames - 1, rows).expect("final cell is always stored");
    let log_prob = alpha[end] + logz(end, blank);
    (log_prob, alpha, beta)
}

/// Fills `dL/dlogz` for every stored cell; only blank and the next target
/// symbol receive non-zero entries.
fn logz_gradient<L, F>(
    layout: &L,
    symbols: usize,
    target: &Target,
    band: Option<&BandPlan>,
    log_prob: f64,
    alpha: &[f64],
    beta: &[f64],
    logz: F,
) -> Vec<f64>
where
    L: CellLayout,
    F: Fn(usize, usize) -> f64,
{
    let blank = target.blank();
    let y = target.tokens();
    let frames = layout.frames();
    let rows = y.len();
    let mut grad = vec![0.0; layout.num_cells() * symbols];
    for u in 0..=rows {
        for t in layout.span(u) {
            let c = layout.cell(t, u).unwrap();
            let a = alpha[c];
            if a == f64::NEG_INFINITY {
                continue;
            }
            let next_blank = if t == frames - 1 && u == rows {
                Some(0.0)
            } else if t + 1 < frames {
                layout.cell(t + 1, u).map(|n| beta[n])
            } else {
                None
            };
            if let Some(b) = next_blank {
                grad[c * symbols + blank] = -(a + logz(c, blank) + b - log_prob).exp();
            }
            if u < rows && band.is_none_or(|p| p.allows(u + 1, t)) {
                if let Some(n) = layout.cell(t, u + 1) {
                    let k = y[u];
                    grad[c * symbols + k] = -(a + logz(c, k) + beta[n] - log_prob).exp();
                }
            }
        }
    }
    grad
}

fn infeasible(target: &Target) -> Error {
    Error::BandInfeasible(format!(
        "no alignment of {} tokens has non-zero probability inside the band",
        target.len()
    ))
}

/// Loss over a dense lattice, with the band (if any) applied as an emission mask.
///
/// The gradient is `dL/dlogz` in the lattice's `[T][U + 1][D]` layout.
pub fn loss_forward_backward(
    lattice: &Lattice,
    target: &Target,
    band: Option<&BandPlan>,
) -> Result<(LossGrad, AlphaBeta<DenseLayout>)> {
    let layout = lattice.layout();
    let d = lattice.symbols();
    check_shapes(&layout, d, target, band)?;
    let values = lattice.values();
    let logz = |c: usize, k: usize| values[c * d + k];
    let (log_prob, alpha, beta) = recursions(&layout, target, band, logz);
    if log_prob == f64::NEG_INFINITY {
        return Err(infeasible(target));
    }
    let grad = logz_gradient(&layout, d, target, band, log_prob, &alpha, &beta, logz);
    Ok((LossGrad { loss: -log_prob, grad }, AlphaBeta { layout, alpha, beta }))
}

/// Loss over band-packed log-probabilities; the band is the tensor's own plan.
pub fn packed_loss_forward_backward(
    packed: &PackedTensor,
    target: &Target,
) -> Result<(LossGrad, AlphaBeta<BandPlan>)> {
    let plan = packed.plan();
    let d = packed.symbols();
    check_shapes(plan, d, target, Some(plan))?;
    let values = packed.values();
    let logz = |c: usize, k: usize| values[c * d + k];
    let (log_prob, alpha, beta) = recursions(plan, target, Some(plan), logz);
    if log_prob == f64::NEG_INFINITY {
        return Err(infeasible(target));
    }
    let grad = logz_gradient(plan, d, target, Some(plan), log_prob, &alpha, &beta, logz);
    Ok((
        LossGrad { loss: -log_prob, grad },
        AlphaBeta { layout: plan.clone(), alpha, beta },
    ))
}

/// Chains `dL/dlogz` through the per-cell log-softmax to `dL/dlogit`.
///
/// `logz` must be normalized log-probabilities with the same layout as `grad`.
pub fn chain_log_softmax(logz: &[f64], grad: &[f64], symbols: usize) -> Vec<f64> {
    let mut out = vec![0.0; grad.len()];
    for ((o, g), z) in out
        .chunks_exact_mut(symbols)
        .zip(grad.chunks_exact(symbols))
        .zip(logz.chunks_exact(symbols))
    {
        let total: f64 = g.iter().sum();
        if total == 0.0 && g.iter().all(|&v| v == 0.0) {
            continue;
        }
        for k in 0..symbols {
            o[k] = g[k] - z[k].exp() * total;
        }
    }
    out
}

fn fused<L: CellLayout>(
    layout: &L,
    logits: &[f64],
    symbols: usize,
    target: &Target,
    band: Option<&BandPlan>,
) -> Result<LossGrad> {
    let norms: Vec<f64> = logits.chunks_exact(symbols).map(log_sum_exp).collect();
    let logz = |c: usize, k: usize| logits[c * symbols + k] - norms[c];
    let (log_prob, alpha, beta) = recursions(layout, target, band, logz);
    if log_prob == f64::NEG_INFINITY {
        return Err(infeasible(target));
    }
    let mut grad = logz_gradient(layout, symbols, target, band, log_prob, &alpha, &beta, logz);
    for ((g, x), norm) in grad
        .chunks_exact_mut(symbols)
        .zip(logits.chunks_exact(symbols))
        .zip(&norms)
    {
        let total: f64 = g.iter().sum();
        for k in 0..symbols {
            g[k] -= (x[k] - norm).exp() * total;
        }
    }
    Ok(LossGrad { loss: -log_prob, grad })
}

/// Softmax-fused loss over dense raw joiner scores `[T][U + 1][D]`.
///
/// The gradient is with respect to the logits.
pub fn loss_from_logits(
    logits: &[f64],
    frames: usize,
    symbols: usize,
    target: &Target,
    band: Option<&BandPlan>,
) -> Result<LossGrad> {
    let layout = DenseLayout { frames, tokens: target.len() };
    if frames == 0 || logits.len() != layout.num_cells() * symbols {
        return Err(Error::DimensionMismatch(format!(
            "expected {} logits, got {}",
            layout.num_cells() * symbols,
            logits.len()
        )));
    }
    check_shapes(&layout, symbols, target, band)?;
    fused(&layout, logits, symbols, target, band)
}

/// Softmax-fused loss over band-packed raw joiner scores.
pub fn packed_loss_from_logits(packed: &PackedTensor, target: &Target) -> Result<LossGrad> {
    let plan = packed.plan();
    check_shapes(plan, packed.symbols(), target, Some(plan))?;
    fused(plan, packed.values(), packed.symbols(), target, Some(plan))
}

/// Explicit sum over every monotone path of the lattice.
///
/// With a band, paths that emit token `u` outside `a_u - b_l <= t <= a_u + b_r`
/// are skipped. Returns `+inf` when no path survives.
pub fn brute_force_loss(lattice: &Lattice, target: &Target, band: Option<&BandPlan>) -> Result<f64> {
    let frames = lattice.frames();
    let rows = target.len();
    if frames + rows > BRUTE_FORCE_LIMIT {
        return Err(Error::SizeGuardExceeded(frames + rows, BRUTE_FORCE_LIMIT));
    }
    check_shapes(&lattice.layout(), lattice.symbols(), target, band)?;
    let blank = target.blank();
    let y = target.tokens();
    let ok = |u: usize, t: usize| match band {
        None => true,
        Some(plan) => {
            let a = plan.labels().as_slice()[u - 1] as i64;
            let t = t as i64;
            a - plan.left() as i64 <= t && t <= a + plan.right() as i64
        }
    };

    // Iterative DFS over partial paths; each stack entry is (t, u, log-prob so far).
    let mut paths = Vec::new();
    let mut stack = vec![(0usize, 0usize, 0.0f64)];
    while let Some((t, u, lp)) = stack.pop() {
        if t == frames - 1 && u == rows {
            paths.push(lp + lattice.get(t, u, blank));
            continue;
        }
        if t + 1 < frames {
            stack.push((t + 1, u, lp + lattice.get(t, u, blank)));
        }
        if u < rows && ok(u + 1, t) {
            stack.push((t, u + 1, lp + lattice.get(t, u, y[u])));
        }
    }
    if paths.is_empty() {
        return Ok(f64::INFINITY);
    }
    Ok(-log_sum_exp(&paths))
}

/// Central-difference check of the logit gradient.
///
/// The lattice's log-probabilities are taken as logits (log-softmax leaves
/// them unchanged); each logit is perturbed by `eps` and the cell is
/// renormalized. Returns the largest `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check(lattice: &Lattice, target: &Target, band: Option<&BandPlan>, eps: f64) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside [1e-6, 1e-3]")));
    }
    let (frames, d) = (lattice.frames(), lattice.symbols());
    let base = lattice.values().to_vec();
    let analytic = loss_from_logits(&base, frames, d, target, band)?.grad;
    let mut worst = 0.0f64;
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + eps;
        let up = loss_from_logits(&probe, frames, d, target, band)?.loss;
        probe[i] = base[i] - eps;
        let down = loss_from_logits(&probe, frames, d, target, band)?.loss;
        probe[i] = base[i];
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// One utterance of a batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub id: &'a str,
    pub lattice: &'a Lattice,
    pub target: &'a Target,
    pub band: Option<&'a BandPlan>,
}

/// Mean loss over a batch and per-utterance `dL/dlogz`, each scaled by `1 / B`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub mean: f64,
    pub losses: Vec<f64>,
    pub grads: Vec<Vec<f64>>,
}

/// Evaluates utterances in parallel; errors carry the offending utterance id.
pub fn batch_loss(items: &[BatchItem<'_>]) -> Result<BatchLoss> {
    if items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let scale = 1.0 / items.len() as f64;
    let results: Vec<Result<LossGrad>> = items
        .par_iter()
        .map(|it| {
            loss_forward_backward(it.lattice, it.target, it.band)
                .map(|(lg, _)| lg)
                .map_err(|e| Error::Utterance { id: it.id.to_string(), source: Box::new(e) })
        })
        .collect();
    let mut losses = Vec::with_capacity(items.len());
    let mut grads = Vec::with_capacity(items.len());
    for r in results {
        let LossGrad { loss, mut grad } = r?;
        grad.iter_mut().for_each(|g| *g *= scale);
        losses.push(loss);
        grads.push(grad);
    }
    let mean = losses.iter().sum::<f64>() * scale;
    Ok(BatchLoss { mean, losses, grads })
}
