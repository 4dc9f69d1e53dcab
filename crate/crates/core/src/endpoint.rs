//! End-pointer simulators and their corpus metrics.
//!
//! Times are in seconds from the start of audio. A static end-pointer fires
//! `T_static` after the last token emission; the neural and E2E end-pointers
//! fire once a per-frame probability stream stays at or above a threshold
//! for a dwell time, falling back to the static rule when they never do.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Silence appended to each utterance by the evaluation protocol.
pub const EVAL_TRAILING_SILENCE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Static,
    Nep,
    E2e,
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "static" => Ok(Policy::Static),
            "nep" => Ok(Policy::Nep),
            "e2e" => Ok(Policy::E2e),
            other => Err(Error::InvalidArgument(format!("unknown end-pointer policy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub policy: Policy,
    pub t_static: f64,
    pub alpha_eoq: f64,
    pub t_eoq_ms: f64,
    pub alpha_e2e: f64,
    pub t_e2e_ms: f64,
    pub fallback_static: Option<f64>,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            policy: Policy::Static,
            t_static: 1.0,
            alpha_eoq: 0.5,
            t_eoq_ms: 120.0,
            alpha_e2e: 0.5,
            t_e2e_ms: 120.0,
            fallback_static: Some(1.0),
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, a) in [("alpha_eoq", self.alpha_eoq), ("alpha_e2e", self.alpha_e2e)] {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::InvalidArgument(format!("{name} = {a} outside [0, 1]")));
            }
        }
        for (name, v) in [("t_static", self.t_static), ("t_eoq_ms", self.t_eoq_ms), ("t_e2e_ms", self.t_e2e_ms)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} = {v} must be a finite non-negative number")));
            }
        }
        if let Some(f) = self.fallback_static {
            if !(f >= 0.0 && f.is_finite()) {
                return Err(Error::InvalidArgument(format!("fallback_static = {f} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Everything an end-pointer sees for one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointInput {
    pub id: String,
    /// Emission instants of the 1-best tokens, in seconds.
    #[serde(default)]
    pub token_times: Vec<f64>,
    pub audio_seconds: f64,
    /// Annotated time the speaker stopped.
    pub speech_end: f64,
    pub frame_seconds: f64,
    /// Per-frame end-of-query probability.
    #[serde(default)]
    pub eoq: Vec<f64>,
    /// Per-frame end-of-sentence posterior from the decoder.
    #[serde(default)]
    pub eos: Vec<f64>,
}

impl EndpointInput {
    /// Extends the audio by `seconds`, repeating the last stream values.
    pub fn with_trailing_silence(&self, seconds: f64) -> Self {
        let mut out = self.clone();
        out.audio_seconds += seconds;
        let extra = (seconds / self.frame_seconds).round() as usize;
        for stream in [&mut out.eoq, &mut out.eos] {
            if let Some(&last) = stream.last() {
                stream.extend(std::iter::repeat_n(last, extra));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointOutcome {
    pub id: String,
    pub decision_time: Option<f64>,
    pub latency: Option<f64>,
    pub early_cut: bool,
    pub no_endpoint: bool,
    /// Tokens emitted after the decision, lost to the cut.
    pub truncated_tokens: usize,
}

impl EndpointOutcome {
    fn decide(input: &EndpointInput, decision: Option<f64>) -> Self {
        match decision {
            Some(d) => Self {
                id: input.id.clone(),
                decision_time: Some(d),
                latency: Some(d - input.speech_end),
                early_cut: d < input.speech_end,
                no_endpoint: false,
                truncated_tokens: input.token_times.iter().filter(|&&t| t > d).count(),
            },
            None => Self {
                id: input.id.clone(),
                decision_time: None,
                latency: None,
                early_cut: false,
                no_endpoint: true,
                truncated_tokens: 0,
            },
        }
    }
}

fn static_decision(input: &EndpointInput, t_static: f64) -> Option<f64> {
    let last = input.token_times.iter().copied().fold(0.0f64, f64::max);
    let d = last + t_static;
    (d <= input.audio_seconds).then_some(d)
}

/// Trailing-silence rule: fire `t_static` after the last emission (or after
/// audio start when nothing was emitted), unless that is past the audio end.
pub fn run_static(input: &EndpointInput, t_static: f64) -> EndpointOutcome {
    EndpointOutcome::decide(input, static_decision(input, t_static))
}

/// End of the first frame that completes a run of at least `dwell_ms` with
/// every frame at or above `alpha`. A zero dwell still needs one frame.
fn dwell_decision(stream: &[f64], frame_seconds: f64, alpha: f64, dwell_ms: f64) -> Option<f64> {
    let need = ((dwell_ms / 1000.0 / frame_seconds) - 1e-9).ceil().max(1.0) as usize;
    let mut run = 0usize;
    for (i, &p) in stream.iter().enumerate() {
        run = if p >= alpha { run + 1 } else { 0 };
        if run >= need {
            return Some((i + 1) as f64 * frame_seconds);
        }
    }
    None
}

/// Probability-stream rule with optional static fall-back.
pub fn run_dwell(
    input: &EndpointInput,
    stream: &[f64],
    alpha: f64,
    dwell_ms: f64,
    fallback_static: Option<f64>,
) -> EndpointOutcome {
    let fired = dwell_decision(stream, input.frame_seconds, alpha, dwell_ms).filter(|&d| d <= input.audio_seconds);
    let decision = fired.or_else(|| fallback_static.and_then(|t| static_decision(input, t)));
    EndpointOutcome::decide(input, decision)
}

/// Dispatches on the configured policy.
pub fn run(input: &EndpointInput, config: &EndpointConfig) -> EndpointOutcome {
    match config.policy {
        Policy::Static => run_static(input, config.t_static),
        Policy::Nep => run_dwell(input, &input.eoq, config.alpha_eoq, config.t_eoq_ms, config.fallback_static),
        Policy::E2e => run_dwell(input, &input.eos, config.alpha_e2e, config.t_e2e_ms, config.fallback_static),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointReport {
    pub utterances: usize,
    /// Mean latency over utterances that end-pointed without an early cut.
    pub l_avg: Option<f64>,
    /// Nearest-rank 90th percentile over the same set.
    pub l_p90: Option<f64>,
    pub early_cut_pct: f64,
    pub noep_pct: f64,
    pub truncated_tokens: usize,
}

/// `ceil(p * n)`-th order statistic of an ascending slice.
pub fn nearest_rank(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p * sorted.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

pub fn aggregate(outcomes: &[EndpointOutcome]) -> Result<EndpointReport> {
    if outcomes.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let n = outcomes.len() as f64;
    let mut lat: Vec<f64> = outcomes
        .iter()
        .filter(|o| !o.early_cut)
        .filter_map(|o| o.latency)
        .collect();
    lat.sort_by(f64::total_cmp);
    let early = outcomes.iter().filter(|o| o.early_cut).count() as f64;
    let noep = outcomes.iter().filter(|o| o.no_endpoint).count() as f64;
    Ok(EndpointReport {
        utterances: outcomes.len(),
        l_avg: (!lat.is_empty()).then(|| lat.iter().sum::<f64>() / lat.len() as f64),
        l_p90: nearest_rank(&lat, 0.9),
        early_cut_pct: 100.0 * early / n,
        noep_pct: 100.0 * noep / n,
        truncated_tokens: outcomes.iter().map(|o| o.truncated_tokens).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(tokens: &[f64], audio: f64, speech_end: f64) -> EndpointInput {
        EndpointInput {
            id: "u".into(),
            token_times: tokens.to_vec(),
            audio_seconds: audio,
            speech_end,
            frame_seconds: 0.06,
            eoq: Vec::new(),
            eos: Vec::new(),
        }
    }

    #[test]
    fn static_fixture() {
        let o = run_static(&input(&[1.2, 3.0], 6.0, 3.2), 1.0);
        assert!((o.decision_time.unwrap() - 4.0).abs() < 1e-12);
        assert!((o.latency.unwrap() - 0.8).abs() < 1e-12);
        assert!(!o.early_cut && !o.no_endpoint);
    }

    #[test]
    fn static_silence_only() {
        let o = run_static(&input(&[], 6.0, 0.0), 1.0);
        assert_eq!(o.decision_time, Some(1.0));
    }

    #[test]
    fn static_past_audio() {
        let o = run_static(&input(&[5.5], 6.0, 5.6), 1.0);
        assert!(o.no_endpoint);
        assert_eq!(o.decision_time, None);
        assert!(!o.early_cut);
    }

    #[test]
    fn dwell_fires_after_two_frames() {
        let mut i = input(&[], 1.0, 0.1);
        i.eoq = vec![0.1, 0.2, 0.9, 0.95, 0.9, 0.9];
        let o = run_dwell(&i, &i.eoq, 0.5, 120.0, None);
        assert!((o.decision_time.unwrap() - 4.0 * 0.06).abs() < 1e-12);
    }

    #[test]
    fn dwell_alpha_zero_fires_at_dwell() {
        let mut i = input(&[], 1.0, 0.1);
        i.eoq = vec![0.0; 10];
        let o = run_dwell(&i, &i.eoq, 0.0, 120.0, None);
        assert!((o.decision_time.unwrap() - 0.12).abs() < 1e-12);
    }

    #[test]
    fn dwell_falls_back_to_static() {
        let mut i = input(&[3.0], 6.0, 3.1);
        i.eoq = vec![0.1; 100];
        let o = run_dwell(&i, &i.eoq, 0.5, 120.0, Some(1.0));
        assert!((o.decision_time.unwrap() - 4.0).abs() < 1e-12);
        let none = run_dwell(&i, &i.eoq, 0.5, 120.0, None);
        assert!(none.no_endpoint);
    }

    #[test]
    fn early_cut_truncates_tokens() {
        let mut i = input(&[0.3, 0.9, 1.5], 3.0, 1.6);
        i.eoq = vec![0.0, 0.0, 1.0, 1.0, 1.0];
        let o = run_dwell(&i, &i.eoq, 0.5, 120.0, None);
        assert!(o.early_cut);
        assert_eq!(o.truncated_tokens, 3);
    }

    #[test]
    fn aggregate_basic() {
        let mk = |lat: f64| EndpointOutcome {
            id: "x".into(),
            decision_time: Some(1.0 + lat),
            latency: Some(lat),
            early_cut: false,
            no_endpoint: false,
            truncated_tokens: 0,
        };
        let r = aggregate(&[mk(0.4), mk(0.6)]).unwrap();
        assert!((r.l_avg.unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(r.l_p90, Some(0.6));
        assert_eq!(r.early_cut_pct, 0.0);
        assert_eq!(r.noep_pct, 0.0);

        let noep = EndpointOutcome::decide(&input(&[], 1.0, 0.5), None);
        let r = aggregate(&[mk(0.1), mk(0.2), mk(0.3), noep]).unwrap();
        assert_eq!(r.noep_pct, 25.0);
        assert!(matches!(aggregate(&[]), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn nearest_rank_percentile() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(nearest_rank(&v, 0.9), Some(9.0));
        assert_eq!(nearest_rank(&v[..3], 0.9), Some(3.0));
        assert_eq!(nearest_rank(&[], 0.9), None);
    }

    #[test]
    fn trailing_silence_extends_audio_and_streams() {
        let mut i = input(&[5.5], 6.0, 5.6);
        i.eoq = vec![0.2, 0.7];
        let s = i.with_trailing_silence(EVAL_TRAILING_SILENCE);
        assert_eq!(s.audio_seconds, 8.0);
        assert_eq!(s.eoq.len(), 2 + 33);
        assert_eq!(*s.eoq.last().unwrap(), 0.7);
        assert!((run_static(&s, 1.0).decision_time.unwrap() - 6.5).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(EndpointConfig::default().validate().is_ok());
        let bad = EndpointConfig { alpha_eoq: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = EndpointConfig { t_e2e_ms: -1.0, ..Default::default() };
        assert!(bad.validate().is_err());
        assert_eq!("E2E".parse::<Policy>().unwrap(), Policy::E2e);
    }
}
