mod common;

use std::collections::BTreeMap;

use mpdqa::corpus::{assemble, generate_synthetic, Head, Limits, SynthSpec};
use mpdqa::decode::{decode_answer, decode_parse, DecodeConfig, ParsePrediction};
use mpdqa::eval::{dp_scores, qa_scores};
use mpdqa::tensor::{Graph, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, vals: &[f64]) -> Tensor<f64> {
    Tensor::matrix(rows, cols, vals[..rows * cols].to_vec()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one_and_ce_is_nonnegative(
        vals in prop::collection::vec(-30.0f64..30.0, 12),
        masked in prop::collection::vec(any::<bool>(), 4),
        target in 0usize..4,
    ) {
        let mut mask = masked.clone();
        mask[target] = true;
        let mut g = Graph::<f64>::new();
        let x = g.constant(matrix(3, 4, &vals));
        let p = g.softmax_rows(x, Some(&mask)).unwrap();
        for r in 0..3 {
            let row = g.value(p).row(r).to_vec();
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (k, v) in row.iter().enumerate() {
                prop_assert!(mask[k] || *v == 0.0);
            }
        }
        let valid: Vec<bool> = (0..12).map(|k| mask[k % 4]).collect();
        let ce = g.cross_entropy(x, &[target; 3], Some(&valid)).unwrap();
        prop_assert!(g.value(ce).item() >= 0.0);
    }

    #[test]
    fn dropout_in_eval_mode_is_the_identity(vals in prop::collection::vec(-5.0f64..5.0, 6), p in 0.0f64..0.99) {
        let mut g = Graph::<f64>::new();
        let x = g.param(matrix(2, 3, &vals));
        let y = g.dropout(x, p, false).unwrap();
        let same = g.value(x).values().iter().zip(g.value(y).values()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }

    #[test]
    fn doubled_loss_doubles_the_gradient(vals in prop::collection::vec(-2.0f64..2.0, 6)) {
        let grad = |twice: bool| {
            let mut g = Graph::<f64>::new();
            let x = g.param(matrix(2, 3, &vals));
            let h = g.gelu(x).unwrap();
            let f = g.sum(h).unwrap();
            let loss = if twice { g.add(f, f).unwrap() } else { f };
            g.backward(loss).unwrap();
            g.grad(x).unwrap().to_vec()
        };
        let once = grad(false);
        prop_assert_eq!(grad(true), once.iter().map(|v| 2.0 * v).collect::<Vec<_>>());
    }

    #[test]
    fn assembled_examples_respect_their_invariants(seed in 0u64..1000, max_seq in 48usize..200) {
        let corpus = common::small_synth(3, seed);
        let vocab = common::vocab_for(&corpus);
        let limits = Limits { max_seq, max_utterances: 14 };
        for d in &corpus {
            for qa in &d.qas {
                let ex = assemble(d, qa, &vocab, limits).unwrap();
                prop_assert!(ex.len() <= max_seq);
                prop_assert_eq!(ex.sep_positions.len(), d.utterances.len());
                prop_assert!(ex.sep_positions.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(ex.start_label <= ex.end_label);
                prop_assert!(ex.unanswerable == (ex.start_label == 0));
                prop_assert_eq!(ex.head_labels.len(), limits.max_utterances);
                prop_assert!(ex.head_labels[d.utterances.len()..].iter().all(Option::is_none));
            }
        }
    }

    #[test]
    fn gold_saturated_logits_decode_to_the_gold(seed in 0u64..10_000) {
        let corpus = generate_synthetic(&SynthSpec { dialogues: 2, ..Default::default() }, seed).unwrap();
        let vocab = common::vocab_for(&corpus);
        for d in &corpus {
            for qa in &d.qas {
                let ex = assemble(d, qa, &vocab, Limits::default()).unwrap();
                let peak = |at: usize| -> Vec<f64> { (0..ex.len()).map(|k| if k == at { 20.0 } else { -20.0 }).collect() };
                let pred = decode_answer(&ex.qa_id, &peak(ex.start_label), &peak(ex.end_label), &ex.offsets, &ex.context, DecodeConfig::default());
                match ex.gold_answers.first() {
                    Some(gold) if !ex.unanswerable => prop_assert_eq!(&pred.answer_text, gold),
                    _ => prop_assert!(pred.is_unanswerable()),
                }
                let heads = ex.gold_heads();
                let rows: Vec<Vec<f64>> = heads
                    .iter()
                    .enumerate()
                    .map(|(i, h)| (0..=heads.len()).map(|s| if s > i + 1 { f64::NEG_INFINITY } else if s == h.slot() { 9.0 } else { -9.0 }).collect())
                    .collect();
                let parse = decode_parse(&rows, |i, _| {
                    let gold = ex.relation_labels[i].map_or(0, |r| r.class_id());
                    (0..16).map(|c| if c == gold { 5.0 } else { 0.0 }).collect()
                });
                prop_assert_eq!(&parse.heads, &heads);
                prop_assert_eq!(&parse.relations, &ex.relation_labels[..heads.len()].to_vec());
            }
        }
    }

    #[test]
    fn scores_are_order_free_and_bounded(seed in 0u64..10_000) {
        let (preds, mut trees) = common::random_dp_case(seed);
        let a = dp_scores(&preds, &trees).unwrap();
        trees.reverse();
        let b = dp_scores(&preds, &trees).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!(a.relation_f1 <= a.link_f1 && a.link_f1 <= 1.0);
        let (answers, golds) = common::random_qa_case(seed);
        let s = qa_scores(&answers, &golds).unwrap();
        prop_assert!(0.0 <= s.em && s.em <= s.f1 && s.f1 <= 1.0);
    }
}

#[test]
fn perfect_parses_score_one() {
    let corpus = common::small_synth(5, 3);
    let trees = mpdqa::eval::gold_trees(&corpus);
    let preds: BTreeMap<String, ParsePrediction> = trees
        .iter()
        .map(|t| (t.dialogue_id.clone(), ParsePrediction { heads: t.heads.clone(), relations: t.relations.clone() }))
        .collect();
    let s = dp_scores(&preds, &trees).unwrap();
    assert_eq!((s.link_f1, s.relation_f1), (1.0, 1.0));
    assert!(trees.iter().all(|t| t.heads[0] == Head::Root));
}
