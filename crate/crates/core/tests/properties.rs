mod common;

use artl_core::align::{align_as1, align_as2, WordAlignment, WordSpan};
use artl_core::decoder::{beam_decode, BeamDecoder, DecoderConfig, LatticeJoiner};
use artl_core::endpoint::{run_dwell, run_static, EndpointInput};
use artl_core::loss::{loss_forward_backward, packed_loss_forward_backward};
use artl_core::{make_band, pack, AlignLabels, Lattice, Target, Vocab};
use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
struct Case {
    lattice: Lattice,
    target: Target,
    labels: Vec<usize>,
}

fn case(max_t: usize, max_u: usize, max_d: usize) -> impl Strategy<Value = Case> {
    (1..=max_t, 0..=max_u, 2..=max_d, any::<u64>()).prop_map(|(t, u, d, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = Vocab::new(d, 0, None).unwrap();
        Case {
            lattice: random_lattice(&mut rng, t, u, d, 1.5),
            target: random_target(&mut rng, u, &vocab),
            labels: random_labels(&mut rng, t, u),
        }
    })
}

fn band_loss(c: &Case, left: usize, right: usize) -> f64 {
    let plan = make_band(&AlignLabels::new(c.labels.clone()).unwrap(), c.lattice.frames(), left, right).unwrap();
    loss_forward_backward(&c.lattice, &c.target, Some(&plan)).unwrap().0.loss
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dp_matches_path_sum(c in case(5, 3, 4), left in 0usize..3, right in 0usize..3) {
        let free = loss_forward_backward(&c.lattice, &c.target, None).unwrap().0.loss;
        prop_assert!((free - path_sum_loss(&c.lattice, &c.target, None)).abs() <= 1e-8);
        let w = Window { labels: c.labels.clone(), left, right };
        prop_assert!((band_loss(&c, left, right) - path_sum_loss(&c.lattice, &c.target, Some(&w))).abs() <= 1e-8);
    }

    #[test]
    fn wide_band_is_vacuous(c in case(8, 4, 5)) {
        let t = c.lattice.frames();
        let (free, _) = loss_forward_backward(&c.lattice, &c.target, None).unwrap();
        let plan = make_band(&AlignLabels::new(c.labels.clone()).unwrap(), t, t, t).unwrap();
        let (banded, _) = loss_forward_backward(&c.lattice, &c.target, Some(&plan)).unwrap();
        prop_assert_eq!(free.loss, banded.loss);
        prop_assert_eq!(free.grad, banded.grad);
    }

    #[test]
    fn widening_never_raises_loss(c in case(7, 3, 4), left in 0usize..3, right in 0usize..3) {
        let base = band_loss(&c, left, right);
        prop_assert!(band_loss(&c, left + 1, right) <= base + 1e-12);
        prop_assert!(band_loss(&c, left, right + 1) <= base + 1e-12);
        let free = loss_forward_backward(&c.lattice, &c.target, None).unwrap().0.loss;
        prop_assert!(free <= base + 1e-12);
    }

    #[test]
    fn anti_diagonal_mass_is_total(c in case(8, 4, 4), band in prop::option::of((0usize..3, 0usize..3))) {
        let plan = band.map(|(l, r)| make_band(&AlignLabels::new(c.labels.clone()).unwrap(), c.lattice.frames(), l, r).unwrap());
        let (lg, ab) = loss_forward_backward(&c.lattice, &c.target, plan.as_ref()).unwrap();
        let (t, u) = (c.lattice.frames(), c.target.len());
        for n in 0..t + u {
            let terms: Vec<f64> = (0..=u.min(n)).filter(|&j| n - j < t).map(|j| ab.alpha(n - j, j) + ab.beta(n - j, j)).collect();
            prop_assert!((log_sum(terms) + lg.loss).abs() <= 1e-9);
        }
    }

    #[test]
    fn gradient_touches_only_blank_and_next_token(c in case(6, 3, 5), band in prop::option::of((0usize..2, 0usize..2))) {
        let plan = band.map(|(l, r)| make_band(&AlignLabels::new(c.labels.clone()).unwrap(), c.lattice.frames(), l, r).unwrap());
        let (lg, _) = loss_forward_backward(&c.lattice, &c.target, plan.as_ref()).unwrap();
        let y = c.target.tokens();
        for t in 0..c.lattice.frames() {
            for u in 0..=y.len() {
                for k in 0..c.lattice.symbols() {
                    let g = lg.grad[c.lattice.index(t, u, k)];
                    if k != 0 && (u == y.len() || y[u] != k) {
                        prop_assert_eq!(g, 0.0);
                    }
                    prop_assert!(g <= 0.0);
                }
            }
        }
    }

    #[test]
    fn packed_matches_dense(c in case(9, 4, 4), left in 0usize..4, right in 0usize..4) {
        let t = c.lattice.frames();
        let plan = make_band(&AlignLabels::new(c.labels.clone()).unwrap(), t, left, right).unwrap();
        let packed = pack(&c.lattice, &plan).unwrap();
        let (dense, dense_ab) = loss_forward_backward(&c.lattice, &c.target, Some(&plan)).unwrap();
        let (sparse, _) = packed_loss_forward_backward(&packed, &c.target).unwrap();
        prop_assert!((dense.loss - sparse.loss).abs() <= 1e-12);
        let u = c.target.len();
        let mut nonzero = 0;
        for tt in 0..t {
            for uu in 0..=u {
                let live = (dense_ab.alpha(tt, uu) + dense_ab.beta(tt, uu)).is_finite();
                nonzero += usize::from(live);
                if !live || packed.cell(tt, uu).is_none() {
                    continue;
                }
                for k in 0..c.lattice.symbols() {
                    let d = dense.grad[c.lattice.index(tt, uu, k)];
                    let s = sparse.grad[packed.index(tt, uu, k).unwrap()];
                    prop_assert!((d - s).abs() <= 1e-12);
                }
            }
        }
        prop_assert_eq!(nonzero, plan.packed_cells());
        prop_assert!(plan.packed_cells() <= plan.cell_bound());
    }

    #[test]
    fn infeasible_exactly_when_no_path(c in case(5, 3, 3), shift in 0usize..4, left in 0usize..2, right in 0usize..2) {
        // Labels may run past the last frame.
        let labels: Vec<usize> = c.labels.iter().map(|a| a + shift).collect();
        let w = Window { labels: labels.clone(), left, right };
        let oracle = path_sum_loss(&c.lattice, &c.target, Some(&w));
        let result = AlignLabels::new(labels)
            .and_then(|l| make_band(&l, c.lattice.frames(), left, right))
            .and_then(|plan| loss_forward_backward(&c.lattice, &c.target, Some(&plan)));
        match result {
            Ok((lg, _)) => prop_assert!((lg.loss - oracle).abs() <= 1e-8),
            Err(e) => {
                prop_assert!(e.is_band_infeasible());
                prop_assert_eq!(oracle, f64::INFINITY);
            }
        }
    }

    #[test]
    fn as2_ends_on_word_end(spans in prop::collection::vec((0usize..6, 0usize..12, 1usize..5), 1..5)) {
        let mut words = Vec::new();
        let mut at = 0;
        for (gap, len, pieces) in spans {
            let s = at + gap;
            words.push(WordSpan::new("w", s, s + len, (1..=pieces).collect()));
            at = s + len;
        }
        let a = WordAlignment::new(words.clone()).unwrap();
        let labels = align_as2(&a).unwrap();
        let mut i = 0;
        for w in &words {
            let n = w.pieces.len();
            let mine = &labels.as_slice()[i..i + n];
            prop_assert_eq!(*mine.last().unwrap(), w.end);
            prop_assert!(mine.iter().all(|&x| (w.start..=w.end).contains(&x)));
            if w.end - w.start >= n {
                prop_assert!(mine.windows(2).all(|p| p[0] < p[1]));
            }
            i += n;
        }
    }

    #[test]
    fn silence_is_transparent(spans in prop::collection::vec((1usize..6, 0usize..12, 1usize..5), 1..5)) {
        let mut plain = Vec::new();
        let mut padded = Vec::new();
        let mut at = 0;
        for (gap, len, pieces) in spans {
            let s = at + gap;
            padded.push(WordSpan::silence(at, s));
            let w = WordSpan::new("w", s, s + len, (1..=pieces).collect());
            plain.push(w.clone());
            padded.push(w);
            at = s + len;
        }
        let (p, q) = (WordAlignment::new(plain).unwrap(), WordAlignment::new(padded).unwrap());
        prop_assert_eq!(align_as1(&p).unwrap(), align_as1(&q).unwrap());
        prop_assert_eq!(align_as2(&p).unwrap(), align_as2(&q).unwrap());
    }

    #[test]
    fn streaming_matches_batch(c in case(8, 3, 4), beam in 1usize..6) {
        let joiner = LatticeJoiner::new(&c.lattice, 0);
        let cfg = DecoderConfig::with_beam(beam);
        let batch = beam_decode(&joiner, joiner.frames(), cfg, true).unwrap();
        let mut stream = BeamDecoder::new(&joiner, cfg, true).unwrap();
        for t in joiner.frames() {
            let prefix = stream.push_frame(&t).to_vec();
            prop_assert_eq!(&prefix, &batch.partials[t]);
        }
        let out = stream.finish().unwrap();
        prop_assert_eq!(&out, &batch);
        prop_assert_eq!(batch.partials.last().unwrap(), &batch.best.tokens);
    }

    #[test]
    fn static_endpoint_monotone(times in prop::collection::vec(0.0f64..5.0, 0..5), end in 0.0f64..6.0, a in 0.0f64..3.0, b in 0.0f64..3.0) {
        let input = EndpointInput {
            id: "p".into(),
            token_times: times,
            audio_seconds: 6.0,
            speech_end: end,
            frame_seconds: 0.04,
            eoq: Vec::new(),
            eos: Vec::new(),
        };
        let (lo, hi) = (a.min(b), a.max(b));
        let (x, y) = (run_static(&input, lo), run_static(&input, hi));
        prop_assert!(x.decision_time.unwrap_or(f64::INFINITY) <= y.decision_time.unwrap_or(f64::INFINITY));
        prop_assert!(!(y.early_cut && !x.early_cut));
    }

    #[test]
    fn dwell_endpoint_monotone(stream in prop::collection::vec(0.0f64..1.0, 1..40), a in 0.0f64..1.0, b in 0.0f64..1.0, d1 in 0.0f64..300.0, d2 in 0.0f64..300.0) {
        let input = EndpointInput {
            id: "p".into(),
            token_times: Vec::new(),
            audio_seconds: stream.len() as f64 * 0.04,
            speech_end: 0.0,
            frame_seconds: 0.04,
            eoq: stream.clone(),
            eos: Vec::new(),
        };
        let at = |alpha: f64, dwell: f64| run_dwell(&input, &stream, alpha, dwell, None).decision_time.unwrap_or(f64::INFINITY);
        let (al, ah) = (a.min(b), a.max(b));
        let (dl, dh) = (d1.min(d2), d1.max(d2));
        prop_assert!(at(al, dl) <= at(ah, dl));
        prop_assert!(at(al, dl) <= at(al, dh));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn saturated_beam_is_exhaustive(c in case(5, 3, 3)) {
        prop_assume!(c.lattice.frames() + c.target.len() <= 8);
        let joiner = LatticeJoiner::new(&c.lattice, 0);
        let cfg = DecoderConfig { beam: usize::MAX, max_symbols_per_frame: usize::MAX };
        let out = beam_decode(&joiner, joiner.frames(), cfg, false).unwrap();
        let oracle = exhaustive_decode(&c.lattice, 0);
        prop_assert!((out.best.log_prob - oracle.log_prob).abs() <= 1e-9);
        prop_assert_eq!(out.best.tokens, oracle.tokens);
        prop_assert_eq!(out.best.frames, oracle.frames);
    }

    #[test]
    fn wider_beam_scores_at_least_as_well(c in case(8, 4, 4)) {
        let joiner = LatticeJoiner::new(&c.lattice, 0);
        let narrow = beam_decode(&joiner, joiner.frames(), DecoderConfig::with_beam(1), false).unwrap();
        let wide = beam_decode(&joiner, joiner.frames(), DecoderConfig::with_beam(64), false).unwrap();
        prop_assert!(wide.best.log_prob >= narrow.best.log_prob - 1e-12);
    }
}
