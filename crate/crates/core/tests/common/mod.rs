//! Test oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use artl_core::endpoint::EndpointInput;
use artl_core::{Lattice, Target, Vocab};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn random_lattice<R: Rng>(rng: &mut R, frames: usize, tokens: usize, symbols: usize, scale: f64) -> Lattice {
    let logits: Vec<f64> = (0..frames * (tokens + 1) * symbols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect();
    Lattice::from_logits(frames, tokens, symbols, logits).unwrap()
}

pub fn random_target<R: Rng>(rng: &mut R, tokens: usize, vocab: &Vocab) -> Target {
    let ids: Vec<usize> = (0..tokens)
        .map(|_| loop {
            let k = rng.random_range(0..vocab.size());
            if k != vocab.blank() {
                break k;
            }
        })
        .collect();
    Target::new(ids, vocab).unwrap()
}

/// Non-decreasing labels in `[0, frames)`.
pub fn random_labels<R: Rng>(rng: &mut R, frames: usize, tokens: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..tokens).map(|_| rng.random_range(0..frames)).collect();
    v.sort_unstable();
    v
}

/// Raw emission constraint, written out independently of the band module.
#[derive(Debug, Clone)]
pub struct Window {
    pub labels: Vec<usize>,
    pub left: usize,
    pub right: usize,
}

impl Window {
    /// Token `u` is 0-based here.
    fn ok(&self, u: usize, t: usize) -> bool {
        let a = self.labels[u] as i64;
        let t = t as i64;
        a - self.left as i64 <= t && t <= a + self.right as i64
    }
}

/// Every monotone alignment as (log-probability, visited cells, emission frames).
pub fn alignments(lattice: &Lattice, target: &Target, window: Option<&Window>) -> Vec<(f64, Vec<(usize, usize)>, Vec<usize>)> {
    let frames = lattice.frames();
    let y = target.tokens();
    let blank = target.blank();
    let mut out = Vec::new();
    let mut cells = vec![(0usize, 0usize)];
    let mut emits = Vec::new();
    fn walk(
        lattice: &Lattice,
        y: &[usize],
        blank: usize,
        frames: usize,
        window: Option<&Window>,
        t: usize,
        u: usize,
        score: f64,
        cells: &mut Vec<(usize, usize)>,
        emits: &mut Vec<usize>,
        out: &mut Vec<(f64, Vec<(usize, usize)>, Vec<usize>)>,
    ) {
        if t == frames - 1 && u == y.len() {
            out.push((score + lattice.get(t, u, blank), cells.clone(), emits.clone()));
            return;
        }
        if t + 1 < frames {
            cells.push((t + 1, u));
            walk(lattice, y, blank, frames, window, t + 1, u, score + lattice.get(t, u, blank), cells, emits, out);
            cells.pop();
        }
        if u < y.len() && window.is_none_or(|w| w.ok(u, t)) {
            cells.push((t, u + 1));
            emits.push(t);
            walk(lattice, y, blank, frames, window, t, u + 1, score + lattice.get(t, u, y[u]), cells, emits, out);
            emits.pop();
            cells.pop();
        }
    }
    walk(lattice, y, blank, frames, window, 0, 0, 0.0, &mut cells, &mut emits, &mut out);
    out
}

pub fn log_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Negative log of the summed path probabilities; `+inf` if no path is valid.
pub fn path_sum_loss(lattice: &Lattice, target: &Target, window: Option<&Window>) -> f64 {
    -log_sum(alignments(lattice, target, window).into_iter().map(|a| a.0))
}

/// Cells lying on at least one valid path.
pub fn visited_cells(lattice: &Lattice, target: &Target, window: Option<&Window>) -> BTreeSet<(usize, usize)> {
    alignments(lattice, target, window).into_iter().flat_map(|a| a.1).collect()
}

/// Result of scoring every output sequence a lattice can produce.
#[derive(Debug, Clone)]
pub struct Exhaustive {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub frames: Vec<usize>,
}

/// Enumerates every path of the free-running lattice decoder (any non-blank
/// symbol, at most `U` emissions in total, one closing blank per frame),
/// groups paths by token sequence and returns the most probable sequence
/// with the emission frames of its best path.
pub fn exhaustive_decode(lattice: &Lattice, blank: usize) -> Exhaustive {
    let frames = lattice.frames();
    let cap = lattice.tokens();
    let d = lattice.symbols();
    // tokens -> (path log-probs, best path score, frames)
    let mut groups: BTreeMap<Vec<usize>, (Vec<f64>, f64, Vec<usize>)> = BTreeMap::new();
    fn walk(
        lattice: &Lattice,
        blank: usize,
        frames: usize,
        cap: usize,
        d: usize,
        t: usize,
        tokens: &mut Vec<usize>,
        at: &mut Vec<usize>,
        score: f64,
        groups: &mut BTreeMap<Vec<usize>, (Vec<f64>, f64, Vec<usize>)>,
    ) {
        let u = tokens.len();
        // Close the frame with a blank.
        let closed = score + lattice.get(t, u, blank);
        if t + 1 == frames {
            let e = groups.entry(tokens.clone()).or_insert((Vec::new(), f64::NEG_INFINITY, Vec::new()));
            e.0.push(closed);
            if closed > e.1 || (closed == e.1 && *at < e.2) {
                e.1 = closed;
                e.2 = at.clone();
            }
        } else {
            walk(lattice, blank, frames, cap, d, t + 1, tokens, at, closed, groups);
        }
        if u < cap {
            for k in (0..d).filter(|&k| k != blank) {
                tokens.push(k);
                at.push(t);
                walk(lattice, blank, frames, cap, d, t, tokens, at, score + lattice.get(t, u, k), groups);
                at.pop();
                tokens.pop();
            }
        }
    }
    walk(lattice, blank, frames, cap, d, 0, &mut Vec::new(), &mut Vec::new(), 0.0, &mut groups);
    let mut best: Option<Exhaustive> = None;
    for (tokens, (scores, _, frames)) in groups {
        let lp = log_sum(scores);
        let better = match &best {
            None => true,
            Some(b) => lp > b.log_prob || (lp == b.log_prob && tokens.len() < b.tokens.len()),
        };
        if better {
            best = Some(Exhaustive { tokens, log_prob: lp, frames });
        }
    }
    best.unwrap()
}

/// Five utterances for the static end-pointer at `T_static = 1.0 s`.
///
/// | id | last token | audio | speech end | decision | outcome          |
/// |----|-----------:|------:|-----------:|---------:|------------------|
/// | a  | 3.00       | 6.00  | 3.25       | 4.00     | latency 0.75     |
/// | b  | 2.00       | 3.50  | 2.75       | 3.00     | latency 0.25     |
/// | c  | 1.00       | 4.00  | 2.50       | 2.00     | early cut        |
/// | d  | 2.50       | 3.00  | 3.00       | 3.50     | no endpoint      |
/// | e  | 4.75       | 5.00  | 4.875      | 5.75     | no endpoint      |
///
/// With 2 s of silence appended to `d`, its audio runs to 5.00 s and it
/// endpoints at 3.50 s with latency 0.50.
pub fn endpoint_fixture() -> Vec<EndpointInput> {
    let mk = |id: &str, tokens: &[f64], audio: f64, end: f64| EndpointInput {
        id: id.into(),
        token_times: tokens.to_vec(),
        audio_seconds: audio,
        speech_end: end,
        frame_seconds: 0.04,
        eoq: Vec::new(),
        eos: Vec::new(),
    };
    vec![
        mk("a", &[0.5, 1.5, 3.0], 6.0, 3.25),
        mk("b", &[1.0, 2.0], 3.5, 2.75),
        mk("c", &[0.5, 1.0], 4.0, 2.5),
        mk("d", &[1.0, 2.5], 3.0, 3.0),
        mk("e", &[4.75], 5.0, 4.875),
    ]
}
