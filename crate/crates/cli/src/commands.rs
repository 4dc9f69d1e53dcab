use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use artl_core::align::{subsample, Strategy};
use artl_core::bench::{run_bench, BenchConfig};
use artl_core::decoder::{beam_decode, measure_delays, DecoderConfig, LatticeJoiner};
use artl_core::endpoint::{aggregate, run as run_endpoint, EndpointConfig, EndpointOutcome, Policy};
use artl_core::loss::loss_from_logits;
use artl_core::toy::{evaluate, fine_tune, sweep_br, synth_corpus, train, LossKind, ToyModel, TrainConfig};
use artl_core::{loss_forward_backward, make_band, AlignLabels, Lattice, Target, Vocab};
use rayon::prelude::*;
use serde_json::json;

use crate::config::Config;
use crate::error::{CliError, CliResult};
use crate::records::{list_arg, read_jsonl, EndpointRecord, UtteranceRecord};
use crate::tensor::{Dtype, Tensor};
use crate::{checkpoint, AlignArgs, BenchArgs, DecodeArgs, EndpointArgs, LossArgs, SweepArgs, ToyArgs, TrainToyArgs};

const DEFAULT_FRAME_SECONDS: f64 = 0.04;
/// Symbols of the toy task: blank plus five tokens.
const TOY_SYMBOLS: usize = 6;

fn secs(v: f64) -> String {
    format!("{v:.3}")
}

fn opt_secs(v: Option<f64>) -> String {
    v.map(secs).unwrap_or_default()
}

/// Rounds to the millisecond for JSON output.
fn ms_round(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

fn write_or_print(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::io(p, e)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).map_err(|e| CliError::io("<stdout>", e))
        }
    }
}

pub fn loss(args: &LossArgs) -> CliResult<()> {
    let tensor = Tensor::read(&args.lattice)?;
    let (frames, tokens, symbols) = tensor.lattice_dims()?;
    let vocab = Vocab::new(symbols, args.blank, None)?;
    let target = Target::new(list_arg(&args.target)?, &vocab)?;
    if target.len() != tokens {
        return Err(CliError::Format(format!(
            "target has {} tokens but the lattice has U+1 = {} rows",
            target.len(),
            tokens + 1
        )));
    }
    let band = match (&args.align, args.bl, args.br) {
        (Some(a), bl, br) => {
            let labels = AlignLabels::new(list_arg(a)?)?;
            Some(make_band(&labels, frames, bl.unwrap_or(0), br.unwrap_or(0))?)
        }
        (None, None, None) => None,
        (None, _, _) => return Err(CliError::Usage("--bl/--br need --align".into())),
    };
    let (value, grad) = if args.logits {
        let lg = loss_from_logits(&tensor.values, frames, symbols, &target, band.as_ref())?;
        (lg.loss, lg.grad)
    } else {
        let lattice = Lattice::from_log_probs(frames, tokens, symbols, tensor.values.clone())?;
        let (lg, _) = loss_forward_backward(&lattice, &target, band.as_ref())?;
        (lg.loss, lg.grad)
    };
    println!("{value:.6}");
    if let Some(path) = &args.grad {
        Tensor::new(tensor.dims.clone(), grad).write(path, Dtype::F64)?;
    }
    Ok(())
}

pub fn align(args: &AlignArgs) -> CliResult<()> {
    let strategy: Strategy = args.strategy.parse()?;
    if args.subsample == 0 {
        return Err(CliError::Usage("--subsample must be at least 1".into()));
    }
    let origin = args.input.display().to_string();
    let mut out = String::new();
    for (line, rec) in read_jsonl::<UtteranceRecord>(&args.input)? {
        let at_line = |message: String| CliError::Line { path: origin.clone(), line, message };
        let alignment = rec.alignment().map_err(&at_line)?;
        let labels = alignment.labels(strategy).map_err(|e| at_line(e.to_string()))?;
        let labels = subsample(&labels, args.subsample, rec.frames.unwrap_or(usize::MAX))
            .map_err(|e| at_line(e.to_string()))?;
        let row = json!({ "id": rec.id, "tokens": alignment.tokens(), "labels": labels.as_slice() });
        writeln!(out, "{row}").unwrap();
    }
    write_or_print(args.out.as_deref(), &out)
}

const DECODE_KEYS: &[&str] = &["beam", "max-symbols", "frame-seconds"];

pub fn decode(args: &DecodeArgs) -> CliResult<()> {
    let cfg = Config::load(args.config.as_deref(), DECODE_KEYS)?;
    let defaults = DecoderConfig::default();
    let decoder = DecoderConfig {
        beam: cfg.pick(args.beam, "beam", defaults.beam)?,
        max_symbols_per_frame: cfg.pick(args.max_symbols, "max-symbols", defaults.max_symbols_per_frame)?,
    };
    let frame_seconds = cfg.pick(args.frame_seconds, "frame-seconds", DEFAULT_FRAME_SECONDS)?;
    let tensor = Tensor::read(&args.lattice)?;
    let (frames, tokens, symbols) = tensor.lattice_dims()?;
    Vocab::new(symbols, args.blank, args.eos)?;
    let lattice = Lattice::from_log_probs(frames, tokens, symbols, tensor.values)?;
    let mut joiner = LatticeJoiner::new(&lattice, args.blank);
    if let Some(e) = args.eos {
        joiner = joiner.with_eos(e);
    }
    let out = beam_decode(&joiner, joiner.frames(), decoder, true)?;
    let emission: Vec<f64> = out.best.frames.iter().map(|&f| ms_round((f + 1) as f64 * frame_seconds)).collect();
    let mut doc = json!({
        "tokens": out.best.tokens,
        "log_prob": out.best.log_prob,
        "best_path_log_prob": out.best.best_path,
        "frames": out.best.frames,
        "emission_seconds": emission,
        "partials": out.partials,
    });
    if args.eos.is_some() {
        doc["eos_posterior"] = json!(out.eos_posterior);
    }
    match (&args.reference, &args.labels) {
        (Some(r), Some(l)) => {
            let reference = list_arg(r)?;
            let labels = AlignLabels::new(list_arg(l)?)?;
            if labels.len() != reference.len() {
                return Err(CliError::Format(format!(
                    "{} reference tokens but {} labels",
                    reference.len(),
                    labels.len()
                )));
            }
            let tl = measure_delays(&out.best, &out.partials, &reference, &labels, frame_seconds);
            doc["delays"] = json!({
                "matched": tl.tokens.len(),
                "excluded": tl.excluded,
                "avg_ed_s": tl.avg_ed_seconds().map(ms_round),
                "avg_fd_s": tl.avg_fd_seconds().map(ms_round),
                "tokens": tl.tokens,
            });
        }
        (None, None) => {}
        _ => return Err(CliError::Usage("--reference and --labels go together".into())),
    }
    println!("{doc}");
    Ok(())
}

const ENDPOINT_KEYS: &[&str] = &[
    "policy",
    "t-static",
    "alpha-eoq",
    "t-eoq-ms",
    "alpha-e2e",
    "t-e2e-ms",
    "fallback-static",
    "append-silence",
];

/// `none`/`off` disable the static fall-back.
fn parse_fallback(raw: &str) -> CliResult<Option<f64>> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "none" | "off" => Ok(None),
        v => v
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("fallback-static must be seconds or 'none', got {raw:?}"))),
    }
}

pub const REPORT_HEADER: &str = "utterances,l_avg_s,l_p90_s,early_cut_pct,noep_pct,truncated_tokens";

pub fn endpoint(args: &EndpointArgs) -> CliResult<()> {
    let cfg = Config::load(args.config.as_deref(), ENDPOINT_KEYS)?;
    let d = EndpointConfig::default();
    let policy: Policy = match cfg.pick_opt(args.policy.clone(), "policy")? {
        Some(p) => p.parse()?,
        None => d.policy,
    };
    let fallback = match cfg.pick_opt(args.fallback_static.clone(), "fallback-static")? {
        Some(raw) => parse_fallback(&raw)?,
        None => d.fallback_static,
    };
    let config = EndpointConfig {
        policy,
        t_static: cfg.pick(args.t_static, "t-static", d.t_static)?,
        alpha_eoq: cfg.pick(args.alpha_eoq, "alpha-eoq", d.alpha_eoq)?,
        t_eoq_ms: cfg.pick(args.t_eoq_ms, "t-eoq-ms", d.t_eoq_ms)?,
        alpha_e2e: cfg.pick(args.alpha_e2e, "alpha-e2e", d.alpha_e2e)?,
        t_e2e_ms: cfg.pick(args.t_e2e_ms, "t-e2e-ms", d.t_e2e_ms)?,
        fallback_static: fallback,
    };
    config.validate()?;
    let extra = cfg.pick(args.append_silence, "append-silence", 0.0)?;
    if !(extra >= 0.0 && extra.is_finite()) {
        return Err(CliError::Usage(format!("append-silence must be non-negative, got {extra}")));
    }

    let origin = args.input.display().to_string();
    let records = read_jsonl::<EndpointRecord>(&args.input)?;
    for (line, rec) in &records {
        let i = &rec.input;
        if !(i.frame_seconds > 0.0) || i.audio_seconds < 0.0 || rec.append_silence < 0.0 {
            return Err(CliError::Line {
                path: origin.clone(),
                line: *line,
                message: "frame_seconds must be positive; audio_seconds and append_silence non-negative".into(),
            });
        }
    }
    let outcomes: Vec<EndpointOutcome> = records
        .par_iter()
        .map(|(_, rec)| {
            let pad = rec.append_silence + extra;
            let input = if pad > 0.0 { rec.input.with_trailing_silence(pad) } else { rec.input.clone() };
            run_endpoint(&input, &config)
        })
        .collect();
    let report = aggregate(&outcomes)?;
    if let Some(path) = &args.outcomes {
        let mut text = String::new();
        for o in &outcomes {
            writeln!(text, "{}", serde_json::to_string(o).unwrap()).unwrap();
        }
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))?;
    }
    let csv = format!(
        "{REPORT_HEADER}\n{},{},{},{:.2},{:.2},{}\n",
        report.utterances,
        opt_secs(report.l_avg),
        opt_secs(report.l_p90),
        report.early_cut_pct,
        report.noep_pct,
        report.truncated_tokens
    );
    write_or_print(args.report.as_deref(), &csv)
}

const TOY_KEYS: &[&str] = &[
    "seed",
    "steps",
    "batch",
    "lr",
    "bl",
    "br",
    "loss",
    "train-size",
    "test-size",
    "frame-seconds",
];

struct ToySetup {
    base: TrainConfig,
    train_size: usize,
    test_size: usize,
    frame_seconds: f64,
    vocab: Vocab,
}

fn toy_setup(args: &ToyArgs, cfg: &Config) -> CliResult<ToySetup> {
    let d = TrainConfig::default();
    let base = TrainConfig {
        seed: cfg.pick(args.seed, "seed", d.seed)?,
        steps: cfg.pick(args.steps, "steps", d.steps)?,
        batch: cfg.pick(args.batch, "batch", d.batch)?,
        lr: cfg.pick(args.lr, "lr", d.lr)?,
        left: cfg.pick(args.bl, "bl", d.left)?,
        ..d
    };
    base.validate()?;
    let frame_seconds = cfg.pick(args.frame_seconds, "frame-seconds", DEFAULT_FRAME_SECONDS)?;
    if !(frame_seconds > 0.0) {
        return Err(CliError::Usage("frame-seconds must be positive".into()));
    }
    Ok(ToySetup {
        train_size: cfg.pick(args.train_size, "train-size", 2000)?,
        test_size: cfg.pick(args.test_size, "test-size", 500)?,
        frame_seconds,
        vocab: Vocab::new(TOY_SYMBOLS, 0, None)?,
        base,
    })
}

/// Training and held-out corpora derive their seeds from the run seed.
fn corpora(s: &ToySetup) -> CliResult<(Vec<artl_core::toy::SynthUtterance>, Vec<artl_core::toy::SynthUtterance>)> {
    let seed = s.base.seed;
    let train_set = synth_corpus(s.train_size, &s.vocab, seed.wrapping_mul(2))?;
    let test_set = synth_corpus(s.test_size.max(1), &s.vocab, seed.wrapping_mul(2).wrapping_add(1))?;
    Ok((train_set, test_set))
}

pub fn train_toy(args: &TrainToyArgs) -> CliResult<()> {
    let cfg = Config::load(args.common.config.as_deref(), TOY_KEYS)?;
    let setup = toy_setup(&args.common, &cfg)?;
    let kind: LossKind = match cfg.pick_opt(args.loss.clone(), "loss")? {
        Some(k) => k.parse()?,
        None => LossKind::Standard,
    };
    let run = TrainConfig { loss: kind, right: cfg.pick(args.br, "br", 0)?, ..setup.base.clone() };
    let (train_set, test_set) = corpora(&setup)?;
    let outcome = match &args.init {
        Some(path) => {
            let model: ToyModel = checkpoint::load(path)?;
            if model.vocab != setup.vocab {
                return Err(CliError::Format(format!("{}: checkpoint vocabulary differs from the toy task", path.display())));
            }
            fine_tune(&run, &train_set, model)?
        }
        None => train(&run, &train_set, &setup.vocab)?,
    };
    checkpoint::save(&outcome.model, &args.out)?;
    if let Some(path) = &args.curve {
        let mut text = String::from("step,loss\n");
        for (i, l) in outcome.curve.iter().enumerate() {
            writeln!(text, "{i},{l:.6}").unwrap();
        }
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))?;
    }
    let first = outcome.curve.first().copied().unwrap_or(f64::NAN);
    let last = outcome.curve.last().copied().unwrap_or(f64::NAN);
    println!("initial_loss={first:.6}");
    println!("final_loss={last:.6}");
    if setup.test_size > 0 {
        let report = evaluate(&outcome.model, &test_set, DecoderConfig::default(), setup.frame_seconds)?;
        println!("token_error={:.4}", report.token_error);
        println!("avg_ed_s={}", opt_secs(report.delays.avg_ed_seconds));
        println!("avg_fd_s={}", opt_secs(report.delays.avg_fd_seconds));
    }
    Ok(())
}

/// `0,5,inf`: numbers are right bands, `inf`/`vacuous` the unrestricted loss.
pub fn parse_br_list(raw: &str) -> CliResult<Vec<Option<usize>>> {
    raw.split(',')
        .map(|p| match p.trim().to_ascii_lowercase().as_str() {
            "inf" | "vacuous" | "none" => Ok(None),
            v => v.parse().map(Some).map_err(|_| CliError::Usage(format!("bad b_r value {p:?} in --br"))),
        })
        .collect()
}

pub const SWEEP_HEADER: &str = "b_r,token_error,avg_ed_s,avg_fd_s";

pub fn sweep(args: &SweepArgs) -> CliResult<()> {
    let cfg = Config::load(args.common.config.as_deref(), TOY_KEYS)?;
    let setup = toy_setup(&args.common, &cfg)?;
    let rights = parse_br_list(&args.br)?;
    let (train_set, test_set) = corpora(&setup)?;
    let rows = sweep_br(&rights, &setup.base, &train_set, &test_set, &setup.vocab, setup.frame_seconds)?;
    let mut csv = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let br = r.right.map_or_else(|| "inf".to_string(), |v| v.to_string());
        writeln!(
            csv,
            "{br},{:.4},{},{}",
            r.token_error,
            opt_secs(r.avg_ed_seconds),
            opt_secs(r.avg_fd_seconds)
        )
        .unwrap();
    }
    write_or_print(args.out.as_deref(), &csv)
}

pub fn bench(args: &BenchArgs) -> CliResult<()> {
    let cfg = BenchConfig {
        frames: args.frames,
        tokens: args.tokens,
        symbols: args.symbols,
        left: args.bl,
        right: args.br,
        iters: args.iters,
        seed: args.seed,
    };
    let r = run_bench(&cfg)?;
    println!("dense_cells={}", r.dense_cells);
    println!("packed_cells={}", r.packed_cells);
    println!("dense_values={}", r.dense_values(cfg.symbols));
    println!("packed_values={}", r.packed_values(cfg.symbols));
    println!("cell_ratio={:.3}", r.cell_ratio);
    println!("dense_s={:.6}", r.dense_seconds);
    println!("packed_s={:.6}", r.packed_seconds);
    println!("speedup={:.3}", r.speedup);
    Ok(())
}
