//! Answer and parse scoring plus the breakdowns by dialogue length,
//! arc adjacency and question type.
//!
//! Answers are compared after SQuAD-style normalization. Arc scores are
//! micro-averaged over all dialogues; root attachments are not arcs and
//! are excluded on both sides.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{assemble, relations_to_tree, Dialogue, Head, Limits, RelationType, Vocabulary};
use crate::decode::ParsePrediction;
use crate::error::{Error, Result};

/// Lowercase, drop punctuation and the articles a/an/the, split on whitespace.
pub fn normalize_answer(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    cleaned
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

pub fn exact_match(pred: &str, gold: &str) -> bool {
    normalize_answer(pred) == normalize_answer(gold)
}

/// Bag-of-tokens F1. Two empty answers agree fully; one empty scores 0.
pub fn token_f1(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, isize> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    2.0 * overlap as f64 / (p.len() + g.len()) as f64
}

/// Gold side of one question. An unanswerable question has no answers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldQuestion {
    pub id: String,
    pub question: String,
    pub answers: Vec<String>,
}

impl GoldQuestion {
    pub fn is_impossible(&self) -> bool {
        self.answers.is_empty()
    }

    /// EM and F1 of `pred`, each maximized over gold answers.
    pub fn score(&self, pred: &str) -> (f64, f64) {
        if self.answers.is_empty() {
            let ok = normalize_answer(pred).is_empty();
            return (f64::from(u8::from(ok)), f64::from(u8::from(ok)));
        }
        let em = self.answers.iter().any(|g| exact_match(pred, g));
        let f1 = self.answers.iter().map(|g| token_f1(pred, g)).fold(0.0, f64::max);
        (f64::from(u8::from(em)), f1)
    }
}

pub fn gold_questions(corpus: &[Dialogue]) -> Vec<GoldQuestion> {
    corpus
        .iter()
        .flat_map(|d| &d.qas)
        .map(|q| GoldQuestion {
            id: q.id.clone(),
            question: q.question.clone(),
            answers: if q.is_impossible {
                vec![]
            } else {
                q.answers.iter().map(|a| a.text.clone()).collect()
            },
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QaScores {
    pub f1: f64,
    pub em: f64,
    pub answerable_f1: f64,
    pub unanswerable_accuracy: f64,
    pub n: usize,
}

/// Mean EM and F1 over `golds`. Every gold id needs a prediction.
pub fn qa_scores(predictions: &BTreeMap<String, String>, golds: &[GoldQuestion]) -> Result<QaScores> {
    let mut s = QaScores {
        n: golds.len(),
        ..Default::default()
    };
    let (mut answerable, mut impossible) = (0usize, 0usize);
    for g in golds {
        let pred = predictions.get(&g.id).ok_or_else(|| Error::MissingPrediction(g.id.clone()))?;
        let (em, f1) = g.score(pred);
        s.em += em;
        s.f1 += f1;
        if g.is_impossible() {
            impossible += 1;
            s.unanswerable_accuracy += em;
        } else {
            answerable += 1;
            s.answerable_f1 += f1;
        }
    }
    let div = |x: f64, n: usize| if n == 0 { 0.0 } else { x / n as f64 };
    s.em = div(s.em, golds.len());
    s.f1 = div(s.f1, golds.len());
    s.answerable_f1 = div(s.answerable_f1, answerable);
    s.unanswerable_accuracy = div(s.unanswerable_accuracy, impossible);
    Ok(s)
}

/// Gold tree of one dialogue after reducing its arcs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldTree {
    pub dialogue_id: String,
    pub heads: Vec<Head>,
    pub relations: Vec<Option<RelationType>>,
}

pub fn gold_trees(corpus: &[Dialogue]) -> Vec<GoldTree> {
    corpus
        .iter()
        .map(|d| {
            let (heads, relations) = relations_to_tree(d);
            GoldTree {
                dialogue_id: d.id.clone(),
                heads,
                relations,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DpScores {
    pub link_f1: f64,
    pub relation_f1: f64,
    pub link_precision: f64,
    pub link_recall: f64,
    pub n_arcs: usize,
}

/// Micro F1 over pooled non-root arcs, and over `(arc, type)` triples.
pub fn dp_scores(predictions: &BTreeMap<String, ParsePrediction>, golds: &[GoldTree]) -> Result<DpScores> {
    dp_scores_where(predictions, golds, |_, _| true)
}

/// [`dp_scores`] restricted to dependents for which `keep(tree, dep)`
/// holds, on both the gold and the predicted side.
pub fn dp_scores_where<F>(predictions: &BTreeMap<String, ParsePrediction>, golds: &[GoldTree], keep: F) -> Result<DpScores>
where
    F: Fn(&GoldTree, usize) -> bool,
{
    let known: BTreeSet<&str> = golds.iter().map(|g| g.dialogue_id.as_str()).collect();
    if let Some(id) = predictions.keys().find(|k| !known.contains(k.as_str())) {
        return Err(Error::UnknownDialogue(id.clone()));
    }
    let (mut n_pred, mut n_gold, mut tp_link, mut tp_rel) = (0usize, 0usize, 0usize, 0usize);
    for g in golds {
        let p = predictions
            .get(&g.dialogue_id)
            .ok_or_else(|| Error::MissingPrediction(g.dialogue_id.clone()))?;
        let gold: BTreeMap<usize, (usize, Option<RelationType>)> = arcs(&g.heads, &g.relations)
            .filter(|(dep, _, _)| keep(g, *dep))
            .map(|(d, h, r)| (d, (h, r)))
            .collect();
        for (dep, head, rel) in arcs(&p.heads, &p.relations).filter(|(dep, _, _)| keep(g, *dep)) {
            n_pred += 1;
            if let Some(&(gh, gr)) = gold.get(&dep) {
                if gh == head {
                    tp_link += 1;
                    if gr == rel {
                        tp_rel += 1;
                    }
                }
            }
        }
        n_gold += gold.len();
    }
    let f1 = |tp: usize| {
        if n_pred + n_gold == 0 {
            1.0
        } else {
            2.0 * tp as f64 / (n_pred + n_gold) as f64
        }
    };
    let ratio = |tp: usize, n: usize| if n == 0 { 0.0 } else { tp as f64 / n as f64 };
    Ok(DpScores {
        link_f1: f1(tp_link),
        relation_f1: f1(tp_rel),
        link_precision: ratio(tp_link, n_pred),
        link_recall: ratio(tp_link, n_gold),
        n_arcs: n_gold,
    })
}

fn arcs<'a>(heads: &'a [Head], relations: &'a [Option<RelationType>]) -> impl Iterator<Item = (usize, usize, Option<RelationType>)> + 'a {
    heads
        .iter()
        .enumerate()
        .filter_map(move |(dep, h)| h.utterance().map(|head| (dep, head, relations.get(dep).copied().flatten())))
}

/// A gold arc is nonadjacent when its head is not the previous utterance.
pub fn is_nonadjacent(tree: &GoldTree, dep: usize) -> bool {
    matches!(tree.heads.get(dep), Some(Head::Utterance(h)) if h + 1 != dep)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LengthBucket {
    #[serde(rename = "<=7")]
    UpTo7,
    #[serde(rename = "8-9")]
    EightToNine,
    #[serde(rename = ">=10")]
    TenPlus,
}

impl LengthBucket {
    pub const ALL: [LengthBucket; 3] = [LengthBucket::UpTo7, LengthBucket::EightToNine, LengthBucket::TenPlus];

    pub fn of(utterances: usize) -> Self {
        match utterances {
            0..=7 => LengthBucket::UpTo7,
            8 | 9 => LengthBucket::EightToNine,
            _ => LengthBucket::TenPlus,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LengthBucket::UpTo7 => "<=7",
            LengthBucket::EightToNine => "8-9",
            LengthBucket::TenPlus => ">=10",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QuestionType {
    What,
    Where,
    When,
    Who,
    Why,
    How,
    Others,
}

impl QuestionType {
    pub const ALL: [QuestionType; 7] = [
        QuestionType::What,
        QuestionType::Where,
        QuestionType::When,
        QuestionType::Who,
        QuestionType::Why,
        QuestionType::How,
        QuestionType::Others,
    ];

    /// Classifies by the first normalized token.
    pub fn of(question: &str) -> Self {
        match normalize_answer(question).first().map(String::as_str) {
            Some("what") => QuestionType::What,
            Some("where") => QuestionType::Where,
            Some("when") => QuestionType::When,
            Some("who") => QuestionType::Who,
            Some("why") => QuestionType::Why,
            Some("how") => QuestionType::How,
            _ => QuestionType::Others,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub bucket: LengthBucket,
    pub dialogues: usize,
    pub qa: Option<QaScores>,
    pub dp: Option<DpScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionTypeReport {
    pub kind: QuestionType,
    pub count: usize,
    pub qa: Option<QaScores>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub qa: Option<QaScores>,
    pub dp: Option<DpScores>,
    pub buckets: Vec<BucketReport>,
    pub nonadjacent: Option<DpScores>,
    pub question_types: Vec<QuestionTypeReport>,
    /// Questions whose gold answer is lost to input truncation.
    pub truncation_flags: usize,
}

/// Scores whatever predictions are given against `corpus` and fills
/// every breakdown they allow.
pub fn evaluate(
    corpus: &[Dialogue],
    answers: Option<&BTreeMap<String, String>>,
    parses: Option<&BTreeMap<String, ParsePrediction>>,
) -> Result<EvalReport> {
    let mut report = analysis_reports(corpus, answers, parses)?;
    if let Some(a) = answers {
        report.qa = Some(qa_scores(a, &gold_questions(corpus))?);
    }
    if let Some(p) = parses {
        report.dp = Some(dp_scores(p, &gold_trees(corpus))?);
    }
    report.truncation_flags = truncation_flags(corpus, Limits::default());
    Ok(report)
}

/// Length buckets, the nonadjacent arc subset and question types.
pub fn analysis_reports(
    corpus: &[Dialogue],
    answers: Option<&BTreeMap<String, String>>,
    parses: Option<&BTreeMap<String, ParsePrediction>>,
) -> Result<EvalReport> {
    let mut buckets = Vec::new();
    for bucket in LengthBucket::ALL {
        let part: Vec<Dialogue> = corpus
            .iter()
            .filter(|d| LengthBucket::of(d.utterances.len()) == bucket)
            .cloned()
            .collect();
        let qa = answers.map(|a| qa_scores(a, &gold_questions(&part))).transpose()?;
        let dp = parses
            .map(|p| {
                let sub: BTreeMap<String, ParsePrediction> = part
                    .iter()
                    .filter_map(|d| p.get(&d.id).map(|x| (d.id.clone(), x.clone())))
                    .collect();
                dp_scores(&sub, &gold_trees(&part))
            })
            .transpose()?;
        buckets.push(BucketReport {
            bucket,
            dialogues: part.len(),
            qa,
            dp,
        });
    }
    let nonadjacent = parses
        .map(|p| dp_scores_where(p, &gold_trees(corpus), is_nonadjacent))
        .transpose()?;
    let golds = gold_questions(corpus);
    let mut question_types = Vec::new();
    for kind in QuestionType::ALL {
        let part: Vec<GoldQuestion> = golds.iter().filter(|g| QuestionType::of(&g.question) == kind).cloned().collect();
        let qa = answers.map(|a| qa_scores(a, &part)).transpose()?;
        question_types.push(QuestionTypeReport {
            kind,
            count: part.len(),
            qa,
        });
    }
    Ok(EvalReport {
        buckets,
        nonadjacent,
        question_types,
        ..Default::default()
    })
}

/// Counts answerable questions whose answer does not survive assembly
/// under `limits`. Token ids play no part in truncation, so an empty
/// vocabulary suffices.
pub fn truncation_flags(corpus: &[Dialogue], limits: Limits) -> usize {
    let vocab = Vocabulary::from_tokens(std::iter::empty());
    corpus
        .iter()
        .flat_map(|d| d.qas.iter().map(move |q| (d, q)))
        .filter(|(d, q)| assemble(d, q, &vocab, limits).is_ok_and(|ex| ex.answer_truncated))
        .count()
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned plain-text rendering.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let pct = |x: f64| format!("{:6.2}", 100.0 * x);
        if let Some(q) = &self.qa {
            let _ = writeln!(out, "{:<24}{:>8}{:>8}{:>12}{:>12}{:>8}", "qa", "F1", "EM", "ans-F1", "unans-acc", "n");
            let _ = writeln!(
                out,
                "{:<24}{:>8}{:>8}{:>12}{:>12}{:>8}",
                "all",
                pct(q.f1),
                pct(q.em),
                pct(q.answerable_f1),
                pct(q.unanswerable_accuracy),
                q.n
            );
        }
        let dp_line = |out: &mut String, name: &str, d: &DpScores| {
            let _ = writeln!(out, "{:<24}{:>8}{:>10}{:>8}", name, pct(d.link_f1), pct(d.relation_f1), d.n_arcs);
        };
        if self.dp.is_some() || self.nonadjacent.is_some() {
            let _ = writeln!(out, "{:<24}{:>8}{:>10}{:>8}", "dp", "link", "link+rel", "arcs");
            if let Some(d) = &self.dp {
                dp_line(&mut out, "all", d);
            }
            if let Some(d) = &self.nonadjacent {
                dp_line(&mut out, "nonadjacent", d);
            }
        }
        let _ = writeln!(
            out,
            "{:<24}{:>8}{:>8}{:>8}{:>8}{:>10}",
            "utterances", "dlgs", "qa-F1", "qa-EM", "link", "link+rel"
        );
        for b in &self.buckets {
            let empty = b.dialogues == 0;
            let qa = b.qa.filter(|_| !empty).map_or(("-".into(), "-".into()), |q| (pct(q.f1), pct(q.em)));
            let dp = b.dp.filter(|_| !empty).map_or(("-".into(), "-".into()), |d| (pct(d.link_f1), pct(d.relation_f1)));
            let _ = writeln!(
                out,
                "{:<24}{:>8}{:>8}{:>8}{:>8}{:>10}",
                b.bucket.label(),
                b.dialogues,
                qa.0,
                qa.1,
                dp.0,
                dp.1
            );
        }
        let _ = writeln!(out, "{:<24}{:>8}{:>8}{:>8}", "question type", "n", "F1", "EM");
        for t in &self.question_types {
            let (f1, em) = t.qa.filter(|_| t.count > 0).map_or(("-".into(), "-".into()), |q| (pct(q.f1), pct(q.em)));
            let _ = writeln!(out, "{:<24}{:>8}{:>8}{:>8}", format!("{:?}", t.kind), t.count, f1, em);
        }
        let _ = writeln!(out, "{:<24}{:>8}", "truncated answers", self.truncation_flags);
        out
    }
}
