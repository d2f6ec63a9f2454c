mod support;

use divdec::corpus::{generate_synthetic, CorpusSpec, TokenId, TokenSeq, BOS};
use divdec::cost::{breakeven_tokens, CostParams};
use divdec::decode::{rank_adjust, AdjustMode, DecodeConfig, DivergenceDecoder, Truncation};
use divdec::eval::{read_report, select_best, write_report, EvalReport, MetricPoint, ProbeKind};
use divdec::logits::{softmax, FixedLogits, LogitVector};
use divdec::ngram::{BackoffLM, DEFAULT_LAMBDA};
use divdec::poe::{poe_distribution, ProbVector};
use divdec::service::{format_logit, parse_logit};
use proptest::prelude::*;
use support::{naive_softmax, sort_top_k, NaiveBackoff};

const V: usize = 12;

fn logits(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-8.0..8.0f64, n)
}

fn integer_logits(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-3i32..=3).prop_map(f64::from), n)
}

fn distribution(base: &[f64], forget: &[f64], retain: &[f64], mode: AdjustMode) -> Vec<f64> {
    let (b, p, q) = (FixedLogits(base.to_vec().into()), FixedLogits(forget.to_vec().into()), FixedLogits(retain.to_vec().into()));
    let dec = DivergenceDecoder::new(&b, &p, &q, DecodeConfig::greedy(mode, 1)).unwrap();
    dec.adjusted_distribution(&[BOS]).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn corpus_strategy() -> impl Strategy<Value = Vec<TokenSeq>> {
    prop::collection::vec(prop::collection::vec(1..(V as TokenId - 1), 1..12), 1..20)
        .prop_map(|docs| docs.into_iter().map(|d| TokenSeq::new(std::iter::once(BOS).chain(d).collect())).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn linear_shift_invariance(base in logits(V), forget in logits(V), retain in logits(V),
                               alpha in 0.0..30.0f64, c in -50.0..50.0f64, which in 0usize..3) {
        let mode = AdjustMode::Linear { alpha };
        let reference = distribution(&base, &forget, &retain, mode);
        let shift = |v: &[f64]| v.iter().map(|x| x + c).collect::<Vec<_>>();
        let shifted = match which {
            0 => distribution(&shift(&base), &forget, &retain, mode),
            1 => distribution(&base, &shift(&forget), &retain, mode),
            _ => distribution(&base, &forget, &shift(&retain), mode),
        };
        prop_assert!(max_abs_diff(&reference, &shifted) < 1e-12);
    }

    #[test]
    fn rank_shift_invariance(base in logits(V), forget in integer_logits(V), retain in integer_logits(V),
                             k in 0usize..V, c in -20i32..20) {
        let mode = AdjustMode::Rank { k };
        let shifted: Vec<f64> = forget.iter().map(|x| x + f64::from(c)).collect();
        let retain_shifted: Vec<f64> = retain.iter().map(|x| x + f64::from(c)).collect();
        let reference = distribution(&base, &forget, &retain, mode);
        prop_assert_eq!(&reference, &distribution(&base, &shifted, &retain_shifted, mode));
        let base_shifted: Vec<f64> = base.iter().map(|x| x + f64::from(c)).collect();
        prop_assert!(max_abs_diff(&reference, &distribution(&base_shifted, &forget, &retain, mode)) < 1e-12);
    }

    #[test]
    fn upvoted_tokens_gain_probability(mut base in logits(V), forget in logits(V), retain in logits(V),
                                       alpha in 0.01..30.0f64, v in 0usize..V, w in 0usize..V) {
        prop_assume!(v != w);
        let d = |i: usize| retain[i] - forget[i];
        prop_assume!((d(v) - d(w)).abs() > 1e-3);
        base[w] = base[v];
        let probs = distribution(&base, &forget, &retain, AdjustMode::Linear { alpha });
        prop_assume!(probs[v] > 0.0 || probs[w] > 0.0);
        if d(v) > d(w) {
            prop_assert!(probs[v] > probs[w]);
        } else {
            prop_assert!(probs[w] > probs[v]);
        }
    }

    #[test]
    fn rank_mask_matches_sort_oracle(base in logits(V), forget in integer_logits(V), retain in integer_logits(V), k in 0usize..V) {
        let probs = softmax(&rank_adjust(&base, &forget, &retain, k).unwrap());
        let zeros: Vec<usize> = (0..V).filter(|&i| probs[i] == 0.0).collect();
        prop_assert_eq!(zeros, sort_top_k(&forget, &retain, k));
    }

    #[test]
    fn poe_matches_logit_route(base in logits(V), forget in logits(V), retain in logits(V), alpha in 0.0..30.0f64) {
        let engine = distribution(&base, &forget, &retain, AdjustMode::Linear { alpha });
        let pv = |l: &[f64]| ProbVector::new(naive_softmax(l)).unwrap();
        let oracle = poe_distribution(&pv(&base), &pv(&forget), &pv(&retain), alpha).unwrap();
        prop_assert!(max_abs_diff(&engine, oracle.values()) < 1e-9);
    }

    #[test]
    fn sb_matches_naive_oracle(corpus in corpus_strategy(), order in 1usize..5,
                               ctx in prop::collection::vec(0..V as TokenId, 0..4), w in 0..V as TokenId) {
        let lm = BackoffLM::train(&corpus, order, V, DEFAULT_LAMBDA).unwrap();
        let naive = NaiveBackoff::new(&corpus, order, V, DEFAULT_LAMBDA);
        prop_assert_eq!(lm.sb_score(&ctx, w).to_bits(), naive.score(&ctx, w).to_bits());
        prop_assert!(lm.sb_score(&ctx, w) > 0.0);
    }

    #[test]
    fn count_scaling_leaves_scores_unchanged(corpus in corpus_strategy(), order in 1usize..5, factor in 2u64..50,
                                             ctx in prop::collection::vec(0..V as TokenId, 0..4), w in 0..V as TokenId) {
        let lm = BackoffLM::train(&corpus, order, V, DEFAULT_LAMBDA).unwrap();
        let scaled = BackoffLM::with_floor(lm.counts().scaled(factor), V, DEFAULT_LAMBDA, lm.floor_score()).unwrap();
        let (a, b) = (lm.sb_score(&ctx, w), scaled.sb_score(&ctx, w));
        prop_assert!((a - b).abs() <= 1e-12 * a);
    }

    #[test]
    fn logits_depend_only_on_the_context_window(corpus in corpus_strategy(), order in 1usize..5,
                                                 head_a in prop::collection::vec(0..V as TokenId, 0..5),
                                                 head_b in prop::collection::vec(0..V as TokenId, 0..5),
                                                 tail in prop::collection::vec(0..V as TokenId, 4)) {
        let lm = BackoffLM::train(&corpus, order, V, DEFAULT_LAMBDA).unwrap();
        let window = &tail[4 - (order - 1)..];
        let mut a = vec![BOS];
        a.extend(&head_a);
        a.extend(window);
        let mut b = vec![BOS];
        b.extend(&head_b);
        b.extend(window);
        let (la, lb) = (lm.lm_logits(&a).unwrap(), lm.lm_logits(&b).unwrap());
        prop_assert_eq!(la.values(), lb.values());
        prop_assert!(la.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softmax_of_logits_is_normalized_scores(corpus in corpus_strategy(), order in 1usize..5,
                                               prefix in prop::collection::vec(0..V as TokenId, 0..4)) {
        let lm = BackoffLM::train(&corpus, order, V, DEFAULT_LAMBDA).unwrap();
        let mut full = vec![BOS];
        full.extend(prefix);
        let probs = softmax(&lm.lm_logits(&full).unwrap());
        let ctx = lm.context_for(&full);
        let scores: Vec<f64> = (0..V as TokenId).map(|w| lm.sb_score(&ctx, w)).collect();
        let z: f64 = scores.iter().sum();
        for (p, s) in probs.iter().zip(&scores) {
            prop_assert!((p - s / z).abs() < 1e-12);
        }
    }

    #[test]
    fn selection_ignores_common_rescaling(points in prop::collection::vec((0.0..1.0f64, 1.0..100.0f64), 1..12),
                                          target in (0.1..1.0f64, 1.0..100.0f64), retrain in (0.0..1.0f64, 1.0..100.0f64),
                                          cf in 0.01..100.0f64, cu in 0.01..100.0f64) {
        let mp = |label: String, (f, u): (f64, f64)| MetricPoint {
            config_label: label, probe_kind: ProbeKind::Verbatim, forget_metric: f, utility_metric: u, clip_count: 0,
        };
        let build = |sf: f64, su: f64| EvalReport {
            probe: ProbeKind::Verbatim,
            points: points.iter().enumerate().map(|(i, &(f, u))| mp(format!("c{i:02}"), (f * sf, u * su))).collect(),
            target: mp("target".into(), (target.0 * sf, target.1 * su)),
            retrain: mp("retrain".into(), (retrain.0 * sf, retrain.1 * su)),
            rescale_forget: true,
            rescale_utility: true,
            best: None,
            original: Vec::new(),
        };
        let plain = build(1.0, 1.0);
        let mut d: Vec<f64> = plain.points.iter().map(|p| plain.distance_to_retrain(p)).collect();
        d.sort_by(f64::total_cmp);
        // Skip draws whose two best distances are too close to separate
        // after rounding.
        prop_assume!(d.len() == 1 || d[1] - d[0] > 1e-9);
        prop_assert_eq!(select_best(&plain).unwrap(), select_best(&build(cf, cu)).unwrap());
    }

    #[test]
    fn breakeven_monotonicity(n_l in 1e8..1e11f64, n_s in 1e6..1e10f64, e_l in 0.5..5.0f64, e_s in 0.5..20.0f64,
                              d_r in 1e3..1e9f64, d_f in 1e3..1e9f64, bump in 1.01..3.0f64) {
        let p = CostParams { large_params: n_l, small_params: n_s, large_epochs: e_l, small_epochs: e_s,
                             retain_tokens: d_r, forget_tokens: d_f, inference_tokens: 0.0 };
        let i = |q: CostParams| breakeven_tokens(&q).unwrap();
        let base = i(p);
        let (n_l2, e_l2, n_s2, e_s2, d_r2) = (
            i(CostParams { large_params: n_l * bump, ..p }),
            i(CostParams { large_epochs: e_l * bump, ..p }),
            i(CostParams { small_params: n_s * bump, ..p }),
            i(CostParams { small_epochs: e_s * bump, ..p }),
            i(CostParams { retain_tokens: d_r * bump, ..p }),
        );
        prop_assert!(n_l2 > base);
        prop_assert!(e_l2 > base);
        prop_assert!(n_s2 < base);
        prop_assert!(e_s2 < base);
        prop_assert!(d_r2 < base);
    }

    #[test]
    fn report_round_trips(values in prop::collection::vec((any::<f64>(), any::<f64>(), any::<u64>()), 1..6)) {
        let pts: Vec<MetricPoint> = values.iter().enumerate().map(|(i, &(f, u, c))| MetricPoint {
            config_label: format!("rank:k={i}"), probe_kind: ProbeKind::Verbatim,
            forget_metric: f, utility_metric: u, clip_count: c,
        }).collect();
        prop_assume!(pts.iter().all(|p| !p.forget_metric.is_nan() && !p.utility_metric.is_nan()));
        let r = EvalReport {
            probe: ProbeKind::Verbatim,
            target: MetricPoint { config_label: "target".into(), ..pts[0].clone() },
            retrain: MetricPoint { config_label: "retrain".into(), ..pts[0].clone() },
            points: pts,
            rescale_forget: true,
            rescale_utility: true,
            best: Some("rank:k=0".into()),
            original: Vec::new(),
        };
        let mut buf = Vec::new();
        write_report(&mut buf, &r).unwrap();
        prop_assert_eq!(read_report(buf.as_slice()).unwrap(), r);
    }

    #[test]
    fn wire_logits_round_trip(bits in any::<u64>()) {
        let x = f64::from_bits(bits);
        prop_assume!(x.is_finite());
        prop_assert_eq!(parse_logit(&format_logit(x)).unwrap().to_bits(), x.to_bits());
    }
}

#[test]
fn sampled_generation_is_deterministic() {
    let spec = CorpusSpec { n_retain_facts: 5, n_forget_facts: 5, filler_tokens: 3000, vocab_content_size: 100, seed: 21 };
    let a = generate_synthetic(&spec).unwrap();
    let b = generate_synthetic(&spec).unwrap();
    assert_eq!(a.retain, b.retain);
    assert_eq!(a.forget, b.forget);
    assert_eq!(a.facts, b.facts);
    let v = a.vocab.len();
    let all: Vec<TokenSeq> = a.retain.iter().chain(&a.forget).cloned().collect();
    let base = BackoffLM::train(&all, 5, v, DEFAULT_LAMBDA).unwrap();
    let p = BackoffLM::train(&a.forget, 3, v, DEFAULT_LAMBDA).unwrap();
    let q = BackoffLM::train(&a.retain, 3, v, DEFAULT_LAMBDA).unwrap();
    let config = DecodeConfig {
        mode: AdjustMode::Linear { alpha: 2.0 },
        temperature: 0.8,
        truncation: Truncation::TopP(0.9),
        max_new_tokens: 40,
        seed: 99,
    };
    let dec = DivergenceDecoder::new(&base, &p, &q, config.clone()).unwrap();
    let prompt = [BOS];
    assert_eq!(dec.generate(&prompt).unwrap(), dec.generate(&prompt).unwrap());
    let other = dec.with_config(DecodeConfig { seed: 100, ..config }).unwrap();
    // Different seeds are allowed to agree, but over 40 tokens they should not.
    assert_ne!(dec.generate(&prompt).unwrap().tokens, other.generate(&prompt).unwrap().tokens);
}

#[test]
fn fixed_logits_source_validates_prefix() {
    let src = FixedLogits(LogitVector::new(vec![0.0; 4]));
    let dec = DivergenceDecoder::new(&src, &src, &src, DecodeConfig::greedy(AdjustMode::None, 2)).unwrap();
    assert!(dec.generate(&[2]).is_err());
}
