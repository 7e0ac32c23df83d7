//! Helpers shared by the integration tests: fixtures, independent scalar
//! oracles and the gradient-check drivers.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use mpdqa::corpus::{
    assemble, build_vocab, generate_synthetic, load_corpus, parse_corpus, Dialogue, EncodedExample, Head, Limits,
    RelationType, SynthSpec, Vocabulary,
};
use mpdqa::decode::ParsePrediction;
use mpdqa::eval::{GoldQuestion, GoldTree};
use mpdqa::model::{gold_relation_pairs, EncoderConfig, JointModel, ModelConfig, Paths};
use mpdqa::objective::ObjectiveConfig;
use mpdqa::params::Bound;
use mpdqa::tensor::{finite_difference_check_many, Graph, Tensor, Var};
use mpdqa::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// The seven-utterance Ubuntu excerpt with its three questions.
pub fn ubuntu() -> Dialogue {
    load_corpus(fixture("ubuntu.json")).unwrap().remove(0)
}

/// A dialogue with `n` utterances where utterance `i > 0` answers `i - 1`,
/// except for the arcs in `planted` (dependent, head).
pub fn chain_dialogue(id: &str, n: usize, planted: &[(usize, usize)]) -> Dialogue {
    let speakers = ["ann", "ben", "cid"];
    let edus: Vec<String> = (0..n)
        .map(|i| format!(r#"{{"speaker": "{}", "text": "line {i} about the disk"}}"#, speakers[i % 3]))
        .collect();
    let rels: Vec<String> = (1..n)
        .map(|y| {
            let x = planted.iter().find(|p| p.0 == y).map_or(y - 1, |p| p.1);
            format!(r#"{{"x": {x}, "y": {y}, "type": "Comment"}}"#)
        })
        .collect();
    let doc = format!(
        r#"{{"data": [{{"id": "{id}", "edus": [{}], "relations": [{}],
            "qas": [{{"id": "{id}-q", "question": "what is line 0 about ?", "is_impossible": false,
                      "answers": [{{"text": "the disk", "answer_start": {}}}]}}]}}]}}"#,
        edus.join(","),
        rels.join(","),
        // "ann: line 0 about " precedes the answer
        "ann: line 0 about ".len()
    );
    parse_corpus(&doc, id).unwrap().remove(0)
}

pub fn tiny_encoder(vocab: usize, hidden: usize, layers: usize, heads: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size: vocab,
        hidden_size: hidden,
        num_layers: layers,
        num_attention_heads: heads,
        feedforward_size: 2 * hidden,
        max_positions: 512,
        ..Default::default()
    }
}

pub fn small_synth(dialogues: usize, seed: u64) -> Vec<Dialogue> {
    let spec = SynthSpec {
        dialogues,
        min_utterances: 3,
        max_utterances: 5,
        ..Default::default()
    };
    generate_synthetic(&spec, seed).unwrap()
}

/// Softmax cross-entropy of one row, ignoring `-inf` entries.
pub fn oracle_ce(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().copied().filter(|x| x.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().filter(|x| x.is_finite()).map(|x| (x - m).exp()).sum();
    -(logits[target] - m - z.ln())
}

/// Span, link and relation losses of one example from plain logit rows.
pub struct OracleLosses {
    pub qa: f64,
    pub link: f64,
    pub relation: f64,
}

pub fn oracle_losses(
    start: &[f64],
    end: &[f64],
    span: (usize, usize),
    link_rows: &[Vec<f64>],
    heads: &[Head],
    relation_rows: &[Vec<f64>],
    labels: &[RelationType],
) -> OracleLosses {
    let qa = 0.5 * (oracle_ce(start, span.0) + oracle_ce(end, span.1));
    let link = link_rows
        .iter()
        .zip(heads)
        .map(|(row, h)| {
            let target = match h {
                Head::Root => 0,
                Head::Utterance(j) => j + 1,
            };
            oracle_ce(row, target)
        })
        .sum::<f64>()
        / heads.len() as f64;
    let relation = if labels.is_empty() {
        0.0
    } else {
        relation_rows
            .iter()
            .zip(labels)
            .map(|(row, l)| oracle_ce(row, l.class_id()))
            .sum::<f64>()
            / labels.len() as f64
    };
    OracleLosses { qa, link, relation }
}

fn rows_of(g: &Graph<f64>, v: Var) -> Vec<Vec<f64>> {
    let t = g.value(v);
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Model logits for `ex` in evaluation mode, fed through the scalar oracle.
pub fn oracle_for_model(model: &JointModel<f64>, ex: &EncodedExample) -> OracleLosses {
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let out = model.forward(&mut g, &p, ex, Paths::BOTH, false).unwrap();
    let (s, e) = out.span.unwrap();
    let start = g.value(s).values().to_vec();
    let end = g.value(e).values().to_vec();
    let link = rows_of(&g, out.link.unwrap());
    let (pairs, labels) = gold_relation_pairs(ex);
    let rel = if pairs.is_empty() {
        vec![]
    } else {
        let v = model.heads().relation_logits(&mut g, &p, out.pairs.as_ref().unwrap(), &pairs).unwrap();
        rows_of(&g, v)
    };
    oracle_losses(&start, &end, (ex.start_label, ex.end_label), &link, &ex.gold_heads(), &rel, &labels)
}

// ---- gradient checks ----

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// `sum(w ⊙ y)` for a fixed random `w`, so that gradients are not trivially uniform.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.value(y).dims2()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = g.constant(uniform(&mut rng, r, c));
    let prod = g.mul(y, w)?;
    g.sum(prod)
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// Every differentiable op as (name, inputs, scalar loss builder).
pub fn op_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = |r, c| uniform(&mut rng, r, c);
    let s = seed;
    let cases: Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> = vec![
        ("matmul", vec![m(3, 4), m(4, 2)], Box::new(move |g, x| {
            let y = g.matmul(x[0], x[1])?;
            weighted_sum(g, y, s)
        })),
        ("transpose", vec![m(3, 5)], Box::new(move |g, x| {
            let y = g.transpose(x[0])?;
            weighted_sum(g, y, s)
        })),
        ("add", vec![m(2, 3), m(2, 3)], Box::new(move |g, x| {
            let y = g.add(x[0], x[1])?;
            weighted_sum(g, y, s)
        })),
        ("sub", vec![m(2, 3), m(2, 3)], Box::new(move |g, x| {
            let y = g.sub(x[0], x[1])?;
            weighted_sum(g, y, s)
        })),
        ("mul", vec![m(2, 3), m(2, 3)], Box::new(move |g, x| {
            let y = g.mul(x[0], x[1])?;
            weighted_sum(g, y, s)
        })),
        ("scale", vec![m(2, 3)], Box::new(move |g, x| {
            let y = g.scale(x[0], -1.7)?;
            weighted_sum(g, y, s)
        })),
        ("add_row", vec![m(4, 3), m(1, 3)], Box::new(move |g, x| {
            let y = g.add_row(x[0], x[1])?;
            weighted_sum(g, y, s)
        })),
        ("gelu", vec![m(3, 3)], Box::new(move |g, x| {
            let y = g.gelu(x[0])?;
            weighted_sum(g, y, s)
        })),
        ("relu", vec![m(3, 3)], Box::new(move |g, x| {
            let y = g.relu(x[0])?;
            weighted_sum(g, y, s)
        })),
        ("layer_norm", vec![m(3, 5), m(1, 5), m(1, 5)], Box::new(move |g, x| {
            let y = g.layer_norm(x[0], x[1], x[2], 1e-12)?;
            weighted_sum(g, y, s)
        })),
        ("concat_cols", vec![m(2, 2), m(2, 3)], Box::new(move |g, x| {
            let y = g.concat_cols(&[x[0], x[1], x[0]])?;
            weighted_sum(g, y, s)
        })),
        ("concat_rows", vec![m(1, 3), m(2, 3)], Box::new(move |g, x| {
            let y = g.concat_rows(&[x[0], x[1]])?;
            weighted_sum(g, y, s)
        })),
        ("slice_cols", vec![m(3, 6)], Box::new(move |g, x| {
            let y = g.slice_cols(x[0], 2, 3)?;
            weighted_sum(g, y, s)
        })),
        ("slice_rows", vec![m(5, 2)], Box::new(move |g, x| {
            let y = g.slice_rows(x[0], 1, 3)?;
            weighted_sum(g, y, s)
        })),
        ("gather_rows", vec![m(4, 3)], Box::new(move |g, x| {
            let y = g.gather_rows(x[0], &[2, 0, 2, 3])?;
            weighted_sum(g, y, s)
        })),
        ("scatter", vec![m(1, 3)], Box::new(move |g, x| {
            // the -inf fill is consumed by a softmax, as in the heads
            let y = g.scatter(x[0], 1, 5, &[0, 2, 4], f64::NEG_INFINITY)?;
            let p = g.softmax_rows(y, None)?;
            let p = g.slice_cols(p, 2, 1)?;
            g.sum(p)
        })),
        ("reshape", vec![m(2, 6)], Box::new(move |g, x| {
            let y = g.reshape(x[0], &[3, 4])?;
            weighted_sum(g, y, s)
        })),
        ("dropout", vec![m(4, 4)], Box::new(move |g, x| {
            let y = g.dropout(x[0], 0.3, true)?;
            weighted_sum(g, y, s)
        })),
        ("softmax_rows", vec![m(3, 4)], Box::new(move |g, x| {
            let y = g.softmax_rows(x[0], Some(&[true, false, true, true]))?;
            weighted_sum(g, y, s)
        })),
        ("cross_entropy", vec![m(3, 5)], Box::new(move |g, x| {
            let valid: Vec<bool> = (0..15).map(|k| k % 5 != 2).collect();
            g.cross_entropy(x[0], &[1, 4, 0], Some(&valid))
        })),
        ("sum", vec![m(2, 2)], Box::new(|g, x| {
            let y = g.mul(x[0], x[0])?;
            g.sum(y)
        })),
    ];
    cases
}

/// Max relative finite-difference error of every op at `seed`.
pub fn op_errors(seed: u64) -> Vec<(&'static str, f64)> {
    op_cases(seed)
        .into_iter()
        .map(|(name, xs, f)| (name, finite_difference_check_many(|g, v| f(g, v), &xs, 1e-6, None).unwrap()))
        .collect()
}

/// A 2-layer, h=16, 2-head model with a wider init, and one example.
pub fn gradient_fixture(seed: u64) -> (JointModel<f64>, EncodedExample) {
    let corpus = small_synth(1, 100 + seed);
    let vocab = build_vocab(&corpus, 1);
    let mut encoder = tiny_encoder(vocab.len(), 16, 2, 2);
    encoder.init_std = 0.3;
    let config = ModelConfig { encoder, dp_dropout: 0.4 };
    let model = JointModel::new(config, seed).unwrap();
    let d = &corpus[0];
    let ex = assemble(d, &d.qas[0], &vocab, Limits::default()).unwrap();
    (model, ex)
}

/// Finite-difference check of the full joint loss, in training mode so
/// that every dropout site is exercised with its fixed mask. Checks a few
/// coordinates per parameter block; embedding tables are probed on rows
/// the example uses.
pub fn joint_loss_error(seed: u64) -> f64 {
    let (model, ex) = gradient_fixture(seed);
    let objective = ObjectiveConfig::default();
    let params = model.params();
    let xs: Vec<Tensor<f64>> = params.tensors().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::new();
    for (k, (name, t)) in params.iter().enumerate() {
        let cols = t.cols();
        for _ in 0..3 {
            let row = if name.ends_with("token_embedding") {
                ex.token_ids[rng.random_range(0..ex.len())]
            } else if name.ends_with("position_embedding") {
                rng.random_range(0..ex.len())
            } else {
                rng.random_range(0..t.rows())
            };
            coords.push((k, row * cols + rng.random_range(0..cols)));
        }
    }
    finite_difference_check_many(
        |g, vars| {
            let p = Bound::from_vars(vars.to_vec());
            model.example_loss(g, &p, &ex, &objective, true).map(|(l, _)| l)
        },
        &xs,
        1e-6,
        Some(&coords),
    )
    .unwrap()
}

// ---- metric oracles ----

fn oracle_tokens(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in s.chars().flat_map(char::to_lowercase).chain(std::iter::once(' ')) {
        if ch.is_whitespace() {
            if !word.is_empty() && word != "a" && word != "an" && word != "the" {
                out.push(word.clone());
            }
            word.clear();
        } else if ch.is_alphanumeric() {
            word.push(ch);
        }
    }
    out
}

fn oracle_f1(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return f64::from(u8::from(pred.is_empty() && gold.is_empty()));
    }
    let mut used = vec![false; gold.len()];
    let mut overlap = 0usize;
    for p in pred {
        if let Some(k) = (0..gold.len()).find(|&k| !used[k] && gold[k] == *p) {
            used[k] = true;
            overlap += 1;
        }
    }
    if overlap == 0 {
        0.0
    } else {
        2.0 * overlap as f64 / (pred.len() + gold.len()) as f64
    }
}

/// Brute-force (f1, em): mean over golds of the best score over answers;
/// an unanswerable gold is matched only by an empty prediction.
pub fn oracle_qa(pred: &BTreeMap<String, String>, golds: &[GoldQuestion]) -> (f64, f64) {
    let (mut f1, mut em) = (0.0, 0.0);
    for g in golds {
        let p = oracle_tokens(&pred[&g.id]);
        if g.answers.is_empty() {
            let ok = f64::from(u8::from(p.is_empty()));
            f1 += ok;
            em += ok;
            continue;
        }
        let mut best_f1 = 0.0f64;
        let mut any_em = false;
        for a in &g.answers {
            let t = oracle_tokens(a);
            any_em |= t == p;
            best_f1 = best_f1.max(oracle_f1(&p, &t));
        }
        f1 += best_f1;
        em += f64::from(u8::from(any_em));
    }
    (f1 / golds.len() as f64, em / golds.len() as f64)
}

/// Brute-force pooled (link F1, link+relation F1) from explicit arc sets.
pub fn oracle_dp(pred: &BTreeMap<String, ParsePrediction>, golds: &[GoldTree]) -> (f64, f64) {
    let mut gold_arcs = Vec::new();
    let mut pred_arcs = Vec::new();
    for g in golds {
        for (dep, h) in g.heads.iter().enumerate() {
            if let Head::Utterance(x) = h {
                gold_arcs.push((g.dialogue_id.clone(), dep, *x, g.relations[dep]));
            }
        }
        let p = &pred[&g.dialogue_id];
        for (dep, h) in p.heads.iter().enumerate() {
            if let Head::Utterance(x) = h {
                pred_arcs.push((g.dialogue_id.clone(), dep, *x, p.relations[dep]));
            }
        }
    }
    let total = gold_arcs.len() + pred_arcs.len();
    if total == 0 {
        return (1.0, 1.0);
    }
    let link_tp = pred_arcs
        .iter()
        .filter(|p| gold_arcs.iter().any(|g| g.0 == p.0 && g.1 == p.1 && g.2 == p.2))
        .count();
    let rel_tp = pred_arcs.iter().filter(|p| gold_arcs.contains(p)).count();
    (2.0 * link_tp as f64 / total as f64, 2.0 * rel_tp as f64 / total as f64)
}

const WORDS: &[&str] = &[
    "the", "a", "an", "usb", "Wireless", "accesspoint", "kernel", "driver", "it", "does", "n't", "support", "my",
    "internet", ",", ".", "Grub", "grub!", "disk",
];

fn phrase(rng: &mut ChaCha8Rng, max: usize) -> String {
    let n = rng.random_range(0..=max);
    (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

/// Random golds (some unanswerable, some with two answers) and predictions
/// drawn partly from the gold answers.
pub fn random_qa_case(seed: u64) -> (BTreeMap<String, String>, Vec<GoldQuestion>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..12);
    let mut golds = Vec::new();
    let mut preds = BTreeMap::new();
    for i in 0..n {
        let answers: Vec<String> = match rng.random_range(0..4) {
            0 => vec![],
            1 => vec![phrase(&mut rng, 5), phrase(&mut rng, 5)],
            _ => vec![phrase(&mut rng, 6)],
        };
        let pred = match (rng.random_range(0..4), answers.first()) {
            (0, Some(a)) => a.to_uppercase(),
            (1, Some(a)) => format!("the {a} ."),
            (2, _) => String::new(),
            _ => phrase(&mut rng, 6),
        };
        let id = format!("q{i}");
        preds.insert(id.clone(), pred);
        golds.push(GoldQuestion {
            id,
            question: String::new(),
            answers,
        });
    }
    (preds, golds)
}

pub fn random_tree(rng: &mut ChaCha8Rng, n: usize) -> (Vec<Head>, Vec<Option<RelationType>>) {
    let mut heads = vec![Head::Root];
    let mut rels = vec![None];
    for i in 1..n {
        if rng.random_bool(0.15) {
            heads.push(Head::Root);
            rels.push(None);
        } else {
            heads.push(Head::Utterance(rng.random_range(0..i)));
            rels.push(RelationType::from_class_id(rng.random_range(0..4)));
        }
    }
    (heads, rels)
}

/// Random gold trees and predictions that copy, perturb or replace them.
pub fn random_dp_case(seed: u64) -> (BTreeMap<String, ParsePrediction>, Vec<GoldTree>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut golds = Vec::new();
    let mut preds = BTreeMap::new();
    for d in 0..rng.random_range(1..6) {
        let n = rng.random_range(1..10);
        let (heads, relations) = random_tree(&mut rng, n);
        let id = format!("d{d}");
        let (mut ph, mut pr) = (heads.clone(), relations.clone());
        for i in 1..n {
            if rng.random_bool(0.3) {
                let (h, r) = random_tree(&mut rng, n);
                ph[i] = h[i];
                pr[i] = r[i];
            }
        }
        preds.insert(id.clone(), ParsePrediction { heads: ph, relations: pr });
        golds.push(GoldTree {
            dialogue_id: id,
            heads,
            relations,
        });
    }
    (preds, golds)
}

pub fn vocab_for(corpus: &[Dialogue]) -> Vocabulary {
    build_vocab(corpus, 1)
}
