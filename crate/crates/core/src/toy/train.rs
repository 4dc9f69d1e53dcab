//! Training, evaluation and the right-band sweep for the toy transducer.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{Params, ToyModel};
use super::synth::SynthUtterance;
use crate::band::{make_band, AlignLabels, BandPlan};
use crate::decoder::{beam_decode, measure_delays, DecoderConfig, DelayStats};
use crate::error::{Error, Result};
use crate::lattice::Vocab;

/// Gradient-norm clipping threshold.
pub const CLIP_NORM: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Standard,
    Ar,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "standard" | "rnnt" => Ok(LossKind::Standard),
            "ar" | "restricted" => Ok(LossKind::Ar),
            other => Err(Error::InvalidArgument(format!("unknown loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub left: usize,
    pub right: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { loss: LossKind::Standard, left: 0, right: 0, lr: 0.05, steps: 2000, batch: 8, seed: 1 }
    }
}

impl TrainConfig {
    pub fn ar(left: usize, right: usize) -> Self {
        Self { loss: LossKind::Ar, left, right, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.steps == 0 {
            return Err(Error::InvalidArgument("steps and batch must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub model: ToyModel,
    /// Mean batch loss at every step, before the update.
    pub curve: Vec<f64>,
}

/// Per-utterance band, or `None` for the standard loss.
pub fn utterance_band(cfg: &TrainConfig, utt: &SynthUtterance) -> Result<Option<BandPlan>> {
    if cfg.loss == LossKind::Standard {
        return Ok(None);
    }
    AlignLabels::new(utt.end_frames.clone())
        .and_then(|labels| make_band(&labels, utt.frames(), cfg.left, cfg.right))
        .map(Some)
        .map_err(|e| Error::Utterance { id: utt.id.clone(), source: Box::new(e) })
}

/// Mean loss and gradient over a batch; accumulation order is fixed so
/// results do not depend on the worker count.
pub fn batch_gradient(
    model: &ToyModel,
    batch: &[&SynthUtterance],
    bands: &[&Option<BandPlan>],
) -> Result<(f64, Params)> {
    let parts: Vec<(f64, Params)> = batch
        .par_iter()
        .zip(bands.par_iter())
        .map(|(utt, band)| {
            model
                .loss_and_grad(utt, band.as_ref())
                .map_err(|e| Error::Utterance { id: utt.id.clone(), source: Box::new(e) })
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut grad = Params::zeros(&model.dims);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        grad.add_scaled(g, scale);
    }
    Ok((loss * scale, grad))
}

pub fn train(cfg: &TrainConfig, corpus: &[SynthUtterance], vocab: &Vocab) -> Result<TrainOutcome> {
    fine_tune(cfg, corpus, ToyModel::new(*vocab, cfg.seed))
}

/// Continues training an existing model with `cfg`.
pub fn fine_tune(cfg: &TrainConfig, corpus: &[SynthUtterance], mut model: ToyModel) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let bands: Vec<Option<BandPlan>> = corpus.iter().map(|u| utterance_band(cfg, u)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let batch = cfg.batch.min(corpus.len());
    let mut curve = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let picks = sample(&mut rng, corpus.len(), batch).into_vec();
        let utts: Vec<&SynthUtterance> = picks.iter().map(|&i| &corpus[i]).collect();
        let plans: Vec<&Option<BandPlan>> = picks.iter().map(|&i| &bands[i]).collect();
        let (loss, mut grad) = batch_gradient(&model, &utts, &plans)?;
        curve.push(loss);
        let norm = grad.norm();
        if norm > CLIP_NORM {
            grad.scale(CLIP_NORM / norm);
        }
        model.params.add_scaled(&grad, -cfg.lr);
    }
    Ok(TrainOutcome { model, curve })
}

/// Mean loss over a corpus (standard or banded per `cfg`).
pub fn corpus_loss(model: &ToyModel, cfg: &TrainConfig, corpus: &[SynthUtterance]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let losses: Vec<f64> = corpus
        .par_iter()
        .map(|u| model.loss(u, utterance_band(cfg, u)?.as_ref()))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Token-level edit distance.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let next = (row[j + 1] + 1).min(row[j] + 1).min(diag + usize::from(x != y));
            diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[b.len()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utterances: usize,
    pub ref_tokens: usize,
    pub errors: usize,
    pub token_error: f64,
    pub delays: DelayStats,
}

/// Decodes every utterance and scores errors and delays against the
/// generator's end frames.
pub fn evaluate(
    model: &ToyModel,
    corpus: &[SynthUtterance],
    decoder: DecoderConfig,
    frame_seconds: f64,
) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let per_utt: Vec<_> = corpus
        .par_iter()
        .map(|u| -> Result<_> {
            let out = beam_decode(model, model.encoder_frames(u), decoder, true)?;
            let labels = AlignLabels::new(u.end_frames.clone())?;
            let errors = edit_distance(&out.best.tokens, &u.tokens);
            Ok((errors, measure_delays(&out.best, &out.partials, &u.tokens, &labels, frame_seconds)))
        })
        .collect::<Result<_>>()?;
    let ref_tokens: usize = corpus.iter().map(|u| u.tokens.len()).sum();
    let errors: usize = per_utt.iter().map(|(e, _)| e).sum();
    Ok(EvalReport {
        utterances: corpus.len(),
        ref_tokens,
        errors,
        token_error: errors as f64 / ref_tokens.max(1) as f64,
        delays: DelayStats::from_timelines(per_utt.iter().map(|(_, tl)| tl)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `None` for the unrestricted point.
    pub right: Option<usize>,
    pub token_error: f64,
    pub avg_ed_seconds: Option<f64>,
    pub avg_fd_seconds: Option<f64>,
    pub avg_ed_frames: Option<f64>,
}

/// Trains one model per right-band value (from scratch, same seed, left band
/// from `base`) and evaluates each on `test`. `None` trains with the
/// unrestricted loss.
pub fn sweep_br(
    rights: &[Option<usize>],
    base: &TrainConfig,
    train_set: &[SynthUtterance],
    test: &[SynthUtterance],
    vocab: &Vocab,
    frame_seconds: f64,
) -> Result<Vec<SweepRow>> {
    if rights.len() < 2 {
        return Err(Error::InvalidArgument("a sweep needs at least two b_r values".into()));
    }
    rights
        .iter()
        .map(|&right| {
            let cfg = match right {
                Some(right) => TrainConfig { loss: LossKind::Ar, right, ..base.clone() },
                None => TrainConfig { loss: LossKind::Standard, ..base.clone() },
            };
            let model = train(&cfg, train_set, vocab)?.model;
            let report = evaluate(&model, test, DecoderConfig::default(), frame_seconds)?;
            Ok(SweepRow {
                right,
                token_error: report.token_error,
                avg_ed_seconds: report.delays.avg_ed_seconds,
                avg_fd_seconds: report.delays.avg_fd_seconds,
                avg_ed_frames: report.delays.avg_ed_frames,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::synth::synth_corpus;

    fn vocab() -> Vocab {
        Vocab::new(6, 0, None).unwrap()
    }

    #[test]
    fn edit_distance_basics() {
        assert_eq!(edit_distance(&[], &[1, 2]), 2);
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance(&[1, 3], &[1, 2, 3]), 1);
        assert_eq!(edit_distance(&[4, 2, 3], &[1, 2, 3]), 1);
    }

    #[test]
    fn infeasible_band_names_utterance() {
        let mut corpus = synth_corpus(2, &vocab(), 4).unwrap();
        corpus[1].end_frames = vec![corpus[1].frames() + 5; corpus[1].tokens.len()];
        let cfg = TrainConfig { steps: 1, ..TrainConfig::ar(0, 0) };
        let err = train(&cfg, &corpus, &vocab()).unwrap_err();
        assert!(err.is_band_infeasible());
        assert!(matches!(err, Error::Utterance { ref id, .. } if *id == corpus[1].id));
    }

    #[test]
    fn seeded_runs_are_identical() {
        let corpus = synth_corpus(20, &vocab(), 4).unwrap();
        let cfg = TrainConfig { steps: 15, batch: 4, ..TrainConfig::default() };
        let a = train(&cfg, &corpus, &vocab()).unwrap();
        let b = train(&cfg, &corpus, &vocab()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_config_rejected() {
        let corpus = synth_corpus(2, &vocab(), 4).unwrap();
        let cfg = TrainConfig { lr: 0.0, ..TrainConfig::default() };
        assert!(train(&cfg, &corpus, &vocab()).is_err());
        assert!(sweep_br(&[Some(3)], &TrainConfig::default(), &corpus, &corpus, &vocab(), 0.04).is_err());
    }
}
