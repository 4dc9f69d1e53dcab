//! A small transducer with hand-written backpropagation.
//!
//! Encoder: one causal tanh recurrent layer. Predictor: embedding of the
//! previous token followed by an affine map. Joiner: `tanh(enc + pred)`
//! followed by an affine map and a log-softmax over the vocabulary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::{SynthUtterance, FEATURES};
use crate::band::BandPlan;
use crate::decoder::Joiner;
use crate::error::{Error, Result};
use crate::lattice::{Target, Vocab};
use crate::logspace::log_softmax_in_place;
use crate::loss::loss_from_logits;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub features: usize,
    pub hidden: usize,
    pub embed: usize,
    pub joint: usize,
    pub vocab: usize,
}

impl ModelDims {
    pub fn for_vocab(vocab: usize) -> Self {
        Self { features: FEATURES, hidden: 32, embed: 16, joint: 32, vocab }
    }
}

/// Named parameter tensors, in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub enc_in: Vec<f64>,
    pub enc_rec: Vec<f64>,
    pub enc_bias: Vec<f64>,
    pub enc_proj: Vec<f64>,
    pub embedding: Vec<f64>,
    pub pred_proj: Vec<f64>,
    pub pred_bias: Vec<f64>,
    pub out_weight: Vec<f64>,
    pub out_bias: Vec<f64>,
}

pub const PARAM_NAMES: [&str; 9] = [
    "enc_in",
    "enc_rec",
    "enc_bias",
    "enc_proj",
    "embedding",
    "pred_proj",
    "pred_bias",
    "out_weight",
    "out_bias",
];

impl Params {
    pub fn zeros(d: &ModelDims) -> Self {
        Self {
            enc_in: vec![0.0; d.hidden * d.features],
            enc_rec: vec![0.0; d.hidden * d.hidden],
            enc_bias: vec![0.0; d.hidden],
            enc_proj: vec![0.0; d.joint * d.hidden],
            embedding: vec![0.0; d.vocab * d.embed],
            pred_proj: vec![0.0; d.joint * d.embed],
            pred_bias: vec![0.0; d.joint],
            out_weight: vec![0.0; d.vocab * d.joint],
            out_bias: vec![0.0; d.vocab],
        }
    }

    pub fn shapes(d: &ModelDims) -> [Vec<usize>; 9] {
        [
            vec![d.hidden, d.features],
            vec![d.hidden, d.hidden],
            vec![d.hidden],
            vec![d.joint, d.hidden],
            vec![d.vocab, d.embed],
            vec![d.joint, d.embed],
            vec![d.joint],
            vec![d.vocab, d.joint],
            vec![d.vocab],
        ]
    }

    pub fn tensors(&self) -> [&Vec<f64>; 9] {
        [
            &self.enc_in,
            &self.enc_rec,
            &self.enc_bias,
            &self.enc_proj,
            &self.embedding,
            &self.pred_proj,
            &self.pred_bias,
            &self.out_weight,
            &self.out_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 9] {
        [
            &mut self.enc_in,
            &mut self.enc_rec,
            &mut self.enc_bias,
            &mut self.enc_proj,
            &mut self.embedding,
            &mut self.pred_proj,
            &mut self.pred_bias,
            &mut self.out_weight,
            &mut self.out_bias,
        ]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Params, s: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += s * y);
        }
    }

    pub fn get(&self, flat: usize) -> f64 {
        let mut i = flat;
        for t in self.tensors() {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("parameter index {flat} out of range")
    }

    pub fn set(&mut self, flat: usize, v: f64) {
        let mut i = flat;
        for t in self.tensors_mut() {
            if i < t.len() {
                t[i] = v;
                return;
            }
            i -= t.len();
        }
        panic!("parameter index {flat} out of range")
    }
}

/// `out = W x (+ out)` for row-major `W` of shape `[rows, x.len()]`.
fn matvec_acc(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += W^T g`.
fn matvec_t_acc(w: &[f64], g: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (gi, row) in g.iter().zip(w.chunks_exact(cols)) {
        if *gi == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(row) {
            *o += gi * a;
        }
    }
}

/// `dW += g x^T`.
fn outer_acc(dw: &mut [f64], g: &[f64], x: &[f64]) {
    let cols = x.len();
    for (gi, row) in g.iter().zip(dw.chunks_exact_mut(cols)) {
        if *gi == 0.0 {
            continue;
        }
        for (d, a) in row.iter_mut().zip(x) {
            *d += gi * a;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub dims: ModelDims,
    pub vocab: Vocab,
    pub params: Params,
}

/// Streaming encoder state: feed feature frames, get joiner-space projections.
pub struct EncoderStream<'m> {
    model: &'m ToyModel,
    hidden: Vec<f64>,
}

impl EncoderStream<'_> {
    /// Advances one frame; returns `(hidden, projection)`.
    pub fn step(&mut self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let p = &self.model.params;
        let d = &self.model.dims;
        let mut a = p.enc_bias.clone();
        matvec_acc(&p.enc_in, x, &mut a);
        matvec_acc(&p.enc_rec, &self.hidden, &mut a);
        a.iter_mut().for_each(|v| *v = v.tanh());
        self.hidden = a;
        let mut e = vec![0.0; d.joint];
        matvec_acc(&p.enc_proj, &self.hidden, &mut e);
        (self.hidden.clone(), e)
    }
}

struct Forward {
    hidden: Vec<Vec<f64>>,
    prev: Vec<usize>,
    pred: Vec<Vec<f64>>,
    /// `tanh(enc_t + pred_u)` per cell, frame-major.
    act: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl ToyModel {
    pub fn new(vocab: Vocab, seed: u64) -> Self {
        let dims = ModelDims::for_vocab(vocab.size());
        let mut params = Params::zeros(&dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fans = [dims.features, dims.hidden, 0, dims.hidden, 0, dims.embed, 0, dims.joint, 0];
        for (t, fan) in params.tensors_mut().into_iter().zip(fans) {
            let scale = if fan == 0 { 0.0 } else { 1.0 / (fan as f64).sqrt() };
            for v in t.iter_mut() {
                *v = rng.random_range(-1.0..1.0) * scale;
            }
        }
        // Embeddings start as small random vectors rather than zeros.
        for v in params.embedding.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        Self { dims, vocab, params }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn encoder(&self) -> EncoderStream<'_> {
        EncoderStream { model: self, hidden: vec![0.0; self.dims.hidden] }
    }

    /// Encoder hidden states for a whole utterance (row per frame).
    pub fn encode(&self, features: &[f64]) -> Vec<Vec<f64>> {
        let mut enc = self.encoder();
        features.chunks_exact(self.dims.features).map(|x| enc.step(x).0).collect()
    }

    /// Predictor projection after `prev` (the blank id stands for sentence start).
    pub fn predict(&self, prev: usize) -> Vec<f64> {
        let d = &self.dims;
        let p = &self.params;
        let mut out = p.pred_bias.clone();
        matvec_acc(&p.pred_proj, &p.embedding[prev * d.embed..(prev + 1) * d.embed], &mut out);
        out
    }

    fn joint(&self, enc: &[f64], pred: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let act: Vec<f64> = enc.iter().zip(pred).map(|(a, b)| (a + b).tanh()).collect();
        let mut logits = self.params.out_bias.clone();
        matvec_acc(&self.params.out_weight, &act, &mut logits);
        (act, logits)
    }

    fn forward(&self, utt: &SynthUtterance) -> Forward {
        let mut stream = self.encoder();
        let (mut hidden, mut enc) = (Vec::new(), Vec::new());
        for t in 0..utt.frames() {
            let (h, e) = stream.step(utt.frame(t));
            hidden.push(h);
            enc.push(e);
        }
        let prev: Vec<usize> = std::iter::once(self.vocab.blank()).chain(utt.tokens.iter().copied()).collect();
        let pred: Vec<Vec<f64>> = prev.iter().map(|&k| self.predict(k)).collect();
        let mut act = Vec::with_capacity(enc.len() * pred.len());
        let mut logits = Vec::with_capacity(enc.len() * pred.len() * self.dims.vocab);
        for e in &enc {
            for p in &pred {
                let (a, l) = self.joint(e, p);
                act.push(a);
                logits.extend(l);
            }
        }
        Forward { hidden, prev, pred, act, logits }
    }

    /// Joiner logits `[T][U + 1][D]` for an utterance.
    pub fn logits(&self, utt: &SynthUtterance) -> Vec<f64> {
        self.forward(utt).logits
    }

    pub fn target(&self, utt: &SynthUtterance) -> Result<Target> {
        Target::new(utt.tokens.clone(), &self.vocab)
    }

    /// Loss of one utterance (optionally band-restricted) and its parameter gradient.
    pub fn loss_and_grad(&self, utt: &SynthUtterance, band: Option<&BandPlan>) -> Result<(f64, Params)> {
        let d = self.dims;
        let p = &self.params;
        let fwd = self.forward(utt);
        let target = self.target(utt)?;
        let frames = utt.frames();
        let lg = loss_from_logits(&fwd.logits, frames, d.vocab, &target, band)?;
        let rows = fwd.pred.len();
        let mut g = Params::zeros(&d);
        let mut d_enc = vec![vec![0.0; d.joint]; frames];
        let mut d_pred = vec![vec![0.0; d.joint]; rows];

        for t in 0..frames {
            for u in 0..rows {
                let c = t * rows + u;
                let gl = &lg.grad[c * d.vocab..(c + 1) * d.vocab];
                if gl.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let act = &fwd.act[c];
                outer_acc(&mut g.out_weight, gl, act);
                g.out_bias.iter_mut().zip(gl).for_each(|(a, b)| *a += b);
                let mut d_act = vec![0.0; d.joint];
                matvec_t_acc(&p.out_weight, gl, &mut d_act);
                for j in 0..d.joint {
                    let pre = d_act[j] * (1.0 - act[j] * act[j]);
                    d_enc[t][j] += pre;
                    d_pred[u][j] += pre;
                }
            }
        }

        for (u, dp) in d_pred.iter().enumerate() {
            let k = fwd.prev[u];
            let emb = &p.embedding[k * d.embed..(k + 1) * d.embed];
            outer_acc(&mut g.pred_proj, dp, emb);
            g.pred_bias.iter_mut().zip(dp).for_each(|(a, b)| *a += b);
            matvec_t_acc(&p.pred_proj, dp, &mut g.embedding[k * d.embed..(k + 1) * d.embed]);
        }

        let mut carry = vec![0.0; d.hidden];
        for t in (0..frames).rev() {
            outer_acc(&mut g.enc_proj, &d_enc[t], &fwd.hidden[t]);
            let mut dh = carry;
            matvec_t_acc(&p.enc_proj, &d_enc[t], &mut dh);
            let h = &fwd.hidden[t];
            let da: Vec<f64> = dh.iter().zip(h).map(|(g, h)| g * (1.0 - h * h)).collect();
            outer_acc(&mut g.enc_in, &da, utt.frame(t));
            if t > 0 {
                outer_acc(&mut g.enc_rec, &da, &fwd.hidden[t - 1]);
            }
            g.enc_bias.iter_mut().zip(&da).for_each(|(a, b)| *a += b);
            carry = vec![0.0; d.hidden];
            matvec_t_acc(&p.enc_rec, &da, &mut carry);
        }
        Ok((lg.loss, g))
    }

    pub fn loss(&self, utt: &SynthUtterance, band: Option<&BandPlan>) -> Result<f64> {
        let fwd = self.forward(utt);
        Ok(loss_from_logits(&fwd.logits, utt.frames(), self.dims.vocab, &self.target(utt)?, band)?.loss)
    }

    /// Encoder projections for every frame, the decoder's frame stream.
    pub fn encoder_frames(&self, utt: &SynthUtterance) -> Vec<Vec<f64>> {
        let mut stream = self.encoder();
        (0..utt.frames()).map(|t| stream.step(utt.frame(t)).1).collect()
    }
}

impl Joiner for ToyModel {
    type Frame = Vec<f64>;
    type State = Vec<f64>;

    fn blank(&self) -> usize {
        self.vocab.blank()
    }

    fn eos(&self) -> Option<usize> {
        self.vocab.eos()
    }

    fn initial_state(&self) -> Vec<f64> {
        self.predict(self.vocab.blank())
    }

    fn extend(&self, _state: &Vec<f64>, token: usize) -> Vec<f64> {
        self.predict(token)
    }

    fn log_probs(&self, frame: &Vec<f64>, state: &Vec<f64>) -> Vec<f64> {
        let (_, mut logits) = self.joint(frame, state);
        log_softmax_in_place(&mut logits);
        logits
    }
}

/// Finite-difference check of the full-model gradient on one utterance.
///
/// Returns the largest relative error over every parameter.
pub fn model_grad_check(model: &ToyModel, utt: &SynthUtterance, band: Option<&BandPlan>, eps: f64) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside [1e-6, 1e-3]")));
    }
    let (_, analytic) = model.loss_and_grad(utt, band)?;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for i in 0..model.params.len() {
        let base = model.params.get(i);
        probe.params.set(i, base + eps);
        let up = probe.loss(utt, band)?;
        probe.params.set(i, base - eps);
        let down = probe.loss(utt, band)?;
        probe.params.set(i, base);
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(crate::loss::relative_error(analytic.get(i), numeric));
    }
    Ok(worst)
}
