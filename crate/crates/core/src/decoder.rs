//! Frame-synchronous beam search over transducer outputs.
//!
//! Each decoder step consumes one encoder frame. Within a frame, hypotheses
//! are expanded by non-blank emissions in order of prefix length, so every
//! contribution to a prefix is merged (log-sum-exp) before that prefix is
//! expanded further; the frame closes with a blank on every surviving prefix.
//! Alongside the merged score each hypothesis keeps its single most probable
//! alignment, whose frames are the reported emission times.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::band::AlignLabels;
use crate::error::{Error, Result};
use crate::lattice::Lattice;
use crate::logspace::log_add;

/// Source of joiner distributions for a streaming decoder.
pub trait Joiner {
    /// Per-frame encoder output.
    type Frame;
    /// Predictor state after a token prefix.
    type State: Clone;

    fn blank(&self) -> usize;

    fn eos(&self) -> Option<usize> {
        None
    }

    fn initial_state(&self) -> Self::State;

    fn extend(&self, state: &Self::State, token: usize) -> Self::State;

    /// Log-probabilities over all `D` symbols.
    fn log_probs(&self, frame: &Self::Frame, state: &Self::State) -> Vec<f64>;

    /// Whether a prefix of `len` tokens may still grow.
    fn can_emit(&self, _len: usize) -> bool {
        true
    }
}

/// Treats a fixed lattice as a joiner whose state is the emitted-token count.
///
/// Frames are the frame indices `0..T`; prefixes are capped at `U` tokens.
#[derive(Debug, Clone, Copy)]
pub struct LatticeJoiner<'a> {
    lattice: &'a Lattice,
    blank: usize,
    eos: Option<usize>,
}

impl<'a> LatticeJoiner<'a> {
    pub fn new(lattice: &'a Lattice, blank: usize) -> Self {
        Self { lattice, blank, eos: None }
    }

    pub fn with_eos(mut self, eos: usize) -> Self {
        self.eos = Some(eos);
        self
    }

    pub fn frames(&self) -> std::ops::Range<usize> {
        0..self.lattice.frames()
    }
}

impl Joiner for LatticeJoiner<'_> {
    type Frame = usize;
    type State = usize;

    fn blank(&self) -> usize {
        self.blank
    }

    fn eos(&self) -> Option<usize> {
        self.eos
    }

    fn initial_state(&self) -> usize {
        0
    }

    fn extend(&self, state: &usize, _token: usize) -> usize {
        state + 1
    }

    fn log_probs(&self, frame: &usize, state: &usize) -> Vec<f64> {
        self.lattice.cell(*frame, (*state).min(self.lattice.tokens())).to_vec()
    }

    fn can_emit(&self, len: usize) -> bool {
        len < self.lattice.tokens()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Hypotheses kept per frame; `usize::MAX` disables pruning.
    pub beam: usize,
    /// Cap on non-blank emissions within a single frame.
    pub max_symbols_per_frame: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { beam: 4, max_symbols_per_frame: 4 }
    }
}

impl DecoderConfig {
    pub fn with_beam(beam: usize) -> Self {
        Self { beam, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Merged log-probability over all surviving alignments of `tokens`.
    pub log_prob: f64,
    /// Log-probability of the best single alignment.
    pub best_path: f64,
    /// Emission frame of each token on the best alignment.
    pub frames: Vec<usize>,
}

/// Hypothesis order: higher score, then shorter, then lexicographic ids.
pub fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_prob
        .total_cmp(&a.log_prob)
        .then(a.tokens.len().cmp(&b.tokens.len()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutput {
    pub best: Hypothesis,
    /// Final beam in rank order.
    pub beam: Vec<Hypothesis>,
    /// 1-best token prefix after each frame (empty unless partials requested).
    pub partials: Vec<Vec<usize>>,
    /// Per frame, the end-of-sentence posterior of the 1-best state.
    pub eos_posterior: Vec<f64>,
}

struct Node<S> {
    hyp: Hypothesis,
    state: S,
    depth: usize,
}

fn merge<S>(into: &mut Node<S>, other: Node<S>) {
    into.hyp.log_prob = log_add(into.hyp.log_prob, other.hyp.log_prob);
    let better = other.hyp.best_path > into.hyp.best_path
        || (other.hyp.best_path == into.hyp.best_path && other.hyp.frames < into.hyp.frames);
    if better {
        into.hyp.best_path = other.hyp.best_path;
        into.hyp.frames = other.hyp.frames;
    }
    into.depth = into.depth.min(other.depth);
}

/// Streaming beam decoder; feed frames in order, then [`finish`](Self::finish).
pub struct BeamDecoder<'j, J: Joiner> {
    joiner: &'j J,
    config: DecoderConfig,
    emit_partials: bool,
    beam: Vec<Node<J::State>>,
    frame: usize,
    partials: Vec<Vec<usize>>,
    eos_posterior: Vec<f64>,
}

impl<'j, J: Joiner> BeamDecoder<'j, J> {
    pub fn new(joiner: &'j J, config: DecoderConfig, emit_partials: bool) -> Result<Self> {
        if config.beam == 0 {
            return Err(Error::InvalidArgument("beam width must be at least 1".into()));
        }
        let root = Node {
            hyp: Hypothesis { tokens: Vec::new(), log_prob: 0.0, best_path: 0.0, frames: Vec::new() },
            state: joiner.initial_state(),
            depth: 0,
        };
        Ok(Self {
            joiner,
            config,
            emit_partials,
            beam: vec![root],
            frame: 0,
            partials: Vec::new(),
            eos_posterior: Vec::new(),
        })
    }

    pub fn frames_seen(&self) -> usize {
        self.frame
    }

    /// Current 1-best prefix.
    pub fn best_prefix(&self) -> &[usize] {
        &self.beam[0].hyp.tokens
    }

    /// Consumes one frame and returns the 1-best prefix after it.
    pub fn push_frame(&mut self, frame: &J::Frame) -> &[usize] {
        let t = self.frame;
        let blank = self.joiner.blank();
        let beam = self.config.beam;
        let mut pending: HashMap<Vec<usize>, Node<J::State>> =
            self.beam.drain(..).map(|n| (n.hyp.tokens.clone(), n)).collect();
        let mut closed: Vec<(Node<J::State>, Vec<f64>)> = Vec::new();

        // Every contribution to a prefix of length L comes from length L - 1,
        // so processing lengths in ascending order sees complete masses.
        while let Some(len) = pending.keys().map(Vec::len).min() {
            let mut keys: Vec<Vec<usize>> = pending.keys().filter(|k| k.len() == len).cloned().collect();
            keys.sort();
            let mut layer: Vec<Node<J::State>> = keys.iter().map(|k| pending.remove(k).unwrap()).collect();
            if layer.len() > beam {
                layer.sort_by(|a, b| rank(&a.hyp, &b.hyp));
                layer.truncate(beam);
            }
            for node in layer {
                let logp = self.joiner.log_probs(frame, &node.state);
                if node.depth < self.config.max_symbols_per_frame && self.joiner.can_emit(len) {
                    for (k, &lp) in logp.iter().enumerate() {
                        if k == blank {
                            continue;
                        }
                        let mut tokens = node.hyp.tokens.clone();
                        tokens.push(k);
                        let mut frames = node.hyp.frames.clone();
                        frames.push(t);
                        let child = Node {
                            hyp: Hypothesis {
                                tokens,
                                log_prob: node.hyp.log_prob + lp,
                                best_path: node.hyp.best_path + lp,
                                frames,
                            },
                            state: self.joiner.extend(&node.state, k),
                            depth: node.depth + 1,
                        };
                        match pending.get_mut(&child.hyp.tokens) {
                            Some(existing) => merge(existing, child),
                            None => {
                                pending.insert(child.hyp.tokens.clone(), child);
                            }
                        }
                    }
                }
                closed.push((node, logp));
            }
        }

        let eos = self.joiner.eos();
        let mut next: Vec<(Node<J::State>, f64)> = closed
            .into_iter()
            .map(|(mut n, logp)| {
                n.hyp.log_prob += logp[blank];
                n.hyp.best_path += logp[blank];
                n.depth = 0;
                let p_eos = eos.map_or(0.0, |e| logp[e].exp());
                (n, p_eos)
            })
            .collect();
        next.sort_by(|a, b| rank(&a.0.hyp, &b.0.hyp));
        next.truncate(beam);
        if eos.is_some() {
            self.eos_posterior.push(next[0].1);
        }
        self.beam = next.into_iter().map(|(n, _)| n).collect();
        if self.emit_partials {
            self.partials.push(self.beam[0].hyp.tokens.clone());
        }
        self.frame += 1;
        &self.beam[0].hyp.tokens
    }

    pub fn finish(self) -> Result<DecodeOutput> {
        if self.frame == 0 {
            return Err(Error::EmptyInput);
        }
        let beam: Vec<Hypothesis> = self.beam.into_iter().map(|n| n.hyp).collect();
        Ok(DecodeOutput {
            best: beam[0].clone(),
            beam,
            partials: self.partials,
            eos_posterior: self.eos_posterior,
        })
    }
}

/// Decodes a whole frame sequence.
pub fn beam_decode<J, I>(joiner: &J, frames: I, config: DecoderConfig, emit_partials: bool) -> Result<DecodeOutput>
where
    J: Joiner,
    I: IntoIterator<Item = J::Frame>,
{
    let mut decoder = BeamDecoder::new(joiner, config, emit_partials)?;
    for f in frames {
        decoder.push_frame(&f);
    }
    decoder.finish()
}

/// Timing of one recognized token against its reference end frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenTiming {
    pub token: usize,
    pub et_gt: usize,
    pub et_asr: usize,
    /// First frame whose 1-best partial contained this token (as a prefix match).
    pub ft_asr: Option<usize>,
}

impl TokenTiming {
    pub fn ed_frames(&self) -> i64 {
        self.et_asr as i64 - self.et_gt as i64
    }

    pub fn fd_frames(&self) -> Option<i64> {
        self.ft_asr.map(|f| f as i64 - self.et_gt as i64)
    }
}

/// Per-utterance emission and finalization delays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionTimeline {
    pub frame_seconds: f64,
    pub tokens: Vec<TokenTiming>,
    /// Reference tokens left out because the hypothesis did not match.
    pub excluded: usize,
}

impl EmissionTimeline {
    pub fn ed_sum_frames(&self) -> i64 {
        self.tokens.iter().map(TokenTiming::ed_frames).sum()
    }

    pub fn avg_ed_seconds(&self) -> Option<f64> {
        (!self.tokens.is_empty())
            .then(|| self.ed_sum_frames() as f64 / self.tokens.len() as f64 * self.frame_seconds)
    }

    pub fn avg_fd_seconds(&self) -> Option<f64> {
        let fds: Vec<i64> = self.tokens.iter().filter_map(TokenTiming::fd_frames).collect();
        (!fds.is_empty()).then(|| fds.iter().sum::<i64>() as f64 / fds.len() as f64 * self.frame_seconds)
    }

    /// Emission instants in seconds, taken at the end of the emitting frame.
    pub fn emission_seconds(&self) -> Vec<f64> {
        self.tokens.iter().map(|t| (t.et_asr + 1) as f64 * self.frame_seconds).collect()
    }
}

/// Compares the best path against reference end frames.
///
/// Delays are defined only on correct recognitions: when the hypothesis
/// tokens differ from the reference, every reference token is excluded.
pub fn measure_delays(
    best: &Hypothesis,
    partials: &[Vec<usize>],
    reference: &[usize],
    ref_labels: &AlignLabels,
    frame_seconds: f64,
) -> EmissionTimeline {
    if best.tokens != reference || ref_labels.len() != reference.len() {
        return EmissionTimeline { frame_seconds, tokens: Vec::new(), excluded: reference.len() };
    }
    let tokens = best
        .tokens
        .iter()
        .enumerate()
        .map(|(i, &token)| TokenTiming {
            token,
            et_gt: ref_labels.as_slice()[i],
            et_asr: best.frames[i],
            ft_asr: partials
                .iter()
                .position(|p| p.len() > i && p[..=i] == best.tokens[..=i]),
        })
        .collect();
    EmissionTimeline { frame_seconds, tokens, excluded: 0 }
}

/// Corpus-level delay averages over matched tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayStats {
    pub matched_tokens: usize,
    pub excluded_tokens: usize,
    pub avg_ed_seconds: Option<f64>,
    pub avg_fd_seconds: Option<f64>,
    pub avg_ed_frames: Option<f64>,
}

impl DelayStats {
    pub fn from_timelines<'a>(timelines: impl IntoIterator<Item = &'a EmissionTimeline>) -> Self {
        let (mut n, mut excluded, mut ed, mut ed_s, mut fd_n, mut fd_s) = (0usize, 0usize, 0i64, 0.0, 0usize, 0.0);
        for tl in timelines {
            excluded += tl.excluded;
            for tok in &tl.tokens {
                n += 1;
                ed += tok.ed_frames();
                ed_s += tok.ed_frames() as f64 * tl.frame_seconds;
                if let Some(fd) = tok.fd_frames() {
                    fd_n += 1;
                    fd_s += fd as f64 * tl.frame_seconds;
                }
            }
        }
        Self {
            matched_tokens: n,
            excluded_tokens: excluded,
            avg_ed_seconds: (n > 0).then(|| ed_s / n as f64),
            avg_fd_seconds: (fd_n > 0).then(|| fd_s / fd_n as f64),
            avg_ed_frames: (n > 0).then(|| ed as f64 / n as f64),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::Lattice;

    /// Blank is near-certain everywhere except token 1 forced at frame 2, row 0.
    fn forced_lattice() -> Lattice {
        let (t_max, u_max, d) = (5, 1, 3);
        let mut logits = vec![0.0; t_max * (u_max + 1) * d];
        for t in 0..t_max {
            for u in 0..=u_max {
                let base = (t * (u_max + 1) + u) * d;
                let (b, a, c) = if t == 2 && u == 0 { (-30.0, 30.0, -30.0) } else { (30.0, -30.0, -30.0) };
                logits[base] = b;
                logits[base + 1] = a;
                logits[base + 2] = c;
            }
        }
        Lattice::from_logits(t_max, u_max, d, logits).unwrap()
    }

    #[test]
    fn near_deterministic_lattice() {
        let lat = forced_lattice();
        let j = LatticeJoiner::new(&lat, 0);
        let out = beam_decode(&j, j.frames(), DecoderConfig::with_beam(4), true).unwrap();
        assert_eq!(out.best.tokens, vec![1]);
        assert_eq!(out.best.frames, vec![2]);
        assert!(out.best.log_prob <= 1e-12);
        assert_eq!(out.partials.len(), 5);
        assert_eq!(out.partials[1], Vec::<usize>::new());
        assert_eq!(out.partials[2], vec![1]);
    }

    #[test]
    fn empty_input() {
        let lat = forced_lattice();
        let j = LatticeJoiner::new(&lat, 0);
        assert!(matches!(
            beam_decode(&j, std::iter::empty(), DecoderConfig::default(), false),
            Err(Error::EmptyInput)
        ));
        assert!(BeamDecoder::new(&j, DecoderConfig::with_beam(0), false).is_err());
    }

    #[test]
    fn streaming_matches_batch() {
        let lat = forced_lattice();
        let j = LatticeJoiner::new(&lat, 0);
        let all = beam_decode(&j, j.frames(), DecoderConfig::default(), true).unwrap();
        let mut dec = BeamDecoder::new(&j, DecoderConfig::default(), true).unwrap();
        for t in j.frames() {
            dec.push_frame(&t);
        }
        assert_eq!(dec.finish().unwrap(), all);
    }

    #[test]
    fn eos_posterior_tracks_one_best() {
        let lat = forced_lattice();
        let j = LatticeJoiner::new(&lat, 0).with_eos(2);
        let out = beam_decode(&j, j.frames(), DecoderConfig::default(), false).unwrap();
        assert_eq!(out.eos_posterior.len(), 5);
        assert!(out.eos_posterior.iter().all(|&p| (0.0..1e-6).contains(&p)));
    }

    fn hyp(tokens: Vec<usize>, frames: Vec<usize>) -> Hypothesis {
        Hypothesis { tokens, log_prob: -1.0, best_path: -1.0, frames }
    }

    #[test]
    fn average_emission_delay() {
        let labels = AlignLabels::new(vec![4, 8]).unwrap();
        let tl = measure_delays(&hyp(vec![3, 5], vec![5, 9]), &[], &[3, 5], &labels, 0.06);
        assert!((tl.avg_ed_seconds().unwrap() - 0.06).abs() < 1e-12);
        assert_eq!(tl.avg_fd_seconds(), None);
        let exact = measure_delays(&hyp(vec![3, 5], vec![4, 8]), &[], &[3, 5], &labels, 0.06);
        assert_eq!(exact.avg_ed_seconds(), Some(0.0));
    }

    #[test]
    fn mismatch_is_excluded() {
        let labels = AlignLabels::new(vec![4, 8]).unwrap();
        let tl = measure_delays(&hyp(vec![3], vec![5]), &[], &[3, 5], &labels, 0.06);
        assert!(tl.tokens.is_empty());
        assert_eq!(tl.excluded, 2);
        let stats = DelayStats::from_timelines([&tl]);
        assert_eq!(stats.excluded_tokens, 2);
        assert_eq!(stats.avg_ed_seconds, None);
    }

    #[test]
    fn finalization_uses_first_appearance() {
        let labels = AlignLabels::new(vec![1, 2]).unwrap();
        let partials = vec![vec![], vec![7], vec![7, 4], vec![7], vec![7, 9], vec![7, 9]];
        let tl = measure_delays(&hyp(vec![7, 9], vec![1, 4]), &partials, &[7, 9], &labels, 0.1);
        assert_eq!(tl.tokens[0].ft_asr, Some(1));
        assert_eq!(tl.tokens[1].ft_asr, Some(4));
        assert_eq!(tl.tokens[1].fd_frames(), Some(2));
    }
}
