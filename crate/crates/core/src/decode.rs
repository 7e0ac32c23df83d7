//! Answer spans and discourse trees from logits.

use serde::{Deserialize, Serialize};

use crate::corpus::{Head, RelationType};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Predict no answer when `null_score - span_score > tau`.
    pub tau: f64,
    pub max_answer_tokens: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            tau: 0.0,
            max_answer_tokens: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QAPrediction {
    pub qa_id: String,
    /// Empty when the question is judged unanswerable.
    pub answer_text: String,
    pub start_token: usize,
    pub end_token: usize,
    pub span_score: f64,
    pub null_score: f64,
    /// Set when no admissible span existed and the prediction was forced empty.
    pub no_valid_span: bool,
}

impl QAPrediction {
    pub fn is_unanswerable(&self) -> bool {
        self.answer_text.is_empty()
    }
}

/// Best span `start ≤ end < start + max_answer_tokens` by `start + end`
/// logit, over tokens that all carry an offset (so spans never cross a
/// separator or touch the question). Index 0 is the null position.
///
/// Ties resolve to the smallest start, then the smallest end.
pub fn best_span(start: &[f64], end: &[f64], offsets: &[Option<(usize, usize)>], max_answer_tokens: usize) -> Option<(usize, usize, f64)> {
    let n = start.len().min(end.len()).min(offsets.len());
    let mut best: Option<(usize, usize, f64)> = None;
    for s in 1..n {
        if offsets[s].is_none() || !start[s].is_finite() {
            continue;
        }
        for e in s..n.min(s + max_answer_tokens) {
            if offsets[e].is_none() {
                break;
            }
            if !end[e].is_finite() {
                continue;
            }
            let score = start[s] + end[e];
            if best.is_none_or(|(_, _, b)| score > b) {
                best = Some((s, e, score));
            }
        }
    }
    best
}

/// Decodes one answer. `context` is the string `offsets` index into (in
/// characters).
pub fn decode_answer(
    qa_id: &str,
    start: &[f64],
    end: &[f64],
    offsets: &[Option<(usize, usize)>],
    context: &str,
    config: DecodeConfig,
) -> QAPrediction {
    let null_score = start[0] + end[0];
    let unanswerable = |no_valid_span: bool, span_score: f64| QAPrediction {
        qa_id: qa_id.to_string(),
        answer_text: String::new(),
        start_token: 0,
        end_token: 0,
        span_score,
        null_score,
        no_valid_span,
    };
    let Some((s, e, span_score)) = best_span(start, end, offsets, config.max_answer_tokens) else {
        return unanswerable(true, f64::NEG_INFINITY);
    };
    if null_score - span_score > config.tau {
        return unanswerable(false, span_score);
    }
    let (cs, _) = offsets[s].expect("span tokens carry offsets");
    let (_, ce) = offsets[e].expect("span tokens carry offsets");
    QAPrediction {
        qa_id: qa_id.to_string(),
        answer_text: context.chars().skip(cs).take(ce - cs).collect(),
        start_token: s,
        end_token: e,
        span_score,
        null_score,
        no_valid_span: false,
    }
}

/// Predicted tree of one dialogue. `relations[i]` is `None` exactly when
/// `heads[i]` is the root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsePrediction {
    pub heads: Vec<Head>,
    pub relations: Vec<Option<RelationType>>,
}

impl ParsePrediction {
    /// Checks `head(i) < i` and that relations are present exactly off-root.
    pub fn is_well_formed(&self) -> bool {
        self.heads.len() == self.relations.len()
            && self.heads.iter().zip(&self.relations).enumerate().all(|(i, (h, r))| match h {
                Head::Root => r.is_none(),
                Head::Utterance(j) => *j < i && r.is_some(),
            })
    }
}

/// Index of the largest finite entry of `row[..limit]`, first on ties.
pub fn argmax(row: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in row.iter().enumerate() {
        if v.is_nan() || v == f64::NEG_INFINITY {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Heads by argmax over each row's valid candidates (`root` then
/// `0..i`), then relations by argmax of `relation_logits(i, head)` for
/// every utterance with a real head.
///
/// `link_logits[i]` holds at least `i + 1` entries in slot order.
pub fn decode_parse<F>(link_logits: &[Vec<f64>], mut relation_logits: F) -> ParsePrediction
where
    F: FnMut(usize, usize) -> Vec<f64>,
{
    let mut heads = Vec::with_capacity(link_logits.len());
    let mut relations = Vec::with_capacity(link_logits.len());
    for (i, row) in link_logits.iter().enumerate() {
        let valid = &row[..(i + 1).min(row.len())];
        let head = argmax(valid).map_or(Head::Root, Head::from_slot);
        let rel = head.utterance().map(|j| {
            let logits = relation_logits(i, j);
            let class = argmax(&logits).unwrap_or(0);
            RelationType::from_class_id(class).expect("relation logits have 16 entries")
        });
        heads.push(head);
        relations.push(rel);
    }
    ParsePrediction { heads, relations }
}
