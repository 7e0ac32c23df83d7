use serde::{Deserialize, Serialize};

use super::{relations_to_tree, tokenize, Dialogue, Head, QAPair, RelationType, Token, Vocabulary, CLS_ID, PAD_ID, SEP_ID};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    pub max_seq: usize,
    pub max_utterances: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_seq: 512,
            max_utterances: 14,
        }
    }
}

/// One model input: `[CLS] question [SEP] u0-line [SEP] u1-line [SEP] ...`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedExample {
    pub qa_id: String,
    pub dialogue_id: String,
    pub context: String,
    pub tokens: Vec<String>,
    pub token_ids: Vec<usize>,
    /// 0 for `[CLS]`, the question and its `[SEP]`; 1 for the dialogue region.
    pub segment_ids: Vec<usize>,
    pub attention_mask: Vec<bool>,
    /// Character span in `context` for dialogue tokens; `None` elsewhere.
    pub offsets: Vec<Option<(usize, usize)>>,
    /// `sep_positions[i]` is the separator following utterance `i`.
    pub sep_positions: Vec<usize>,
    pub utterance_count: usize,
    pub start_label: usize,
    pub end_label: usize,
    /// Padded to the utterance limit; `None` marks ignored slots.
    pub head_labels: Vec<Option<Head>>,
    /// `None` for root-attached and padded slots.
    pub relation_labels: Vec<Option<RelationType>>,
    pub gold_answers: Vec<String>,
    /// True when the label is unanswerable (gold or after truncation).
    pub unanswerable: bool,
    pub truncated: bool,
    /// The gold answer was cut by truncation and the label flipped to unanswerable.
    pub answer_truncated: bool,
}

impl EncodedExample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Positions an answer may start or end at: `[CLS]` and real dialogue
    /// tokens other than separators.
    pub fn span_mask(&self) -> Vec<bool> {
        (0..self.len())
            .map(|i| {
                i == 0
                    || (self.attention_mask[i] && self.segment_ids[i] == 1 && self.token_ids[i] != SEP_ID)
            })
            .collect()
    }

    /// Gold heads of the real utterances.
    pub fn gold_heads(&self) -> Vec<Head> {
        self.head_labels[..self.utterance_count].iter().map(|h| h.unwrap_or(Head::Root)).collect()
    }

    /// Context substring covered by tokens `start..=end`, or `None` when
    /// either end lies outside the dialogue region.
    pub fn span_text(&self, start: usize, end: usize) -> Option<String> {
        let (s, _) = (*self.offsets.get(start)?)?;
        let (_, e) = (*self.offsets.get(end)?)?;
        if e < s {
            return None;
        }
        Some(self.context.chars().skip(s).take(e - s).collect())
    }

    /// Right-pads to `len` with masked `[PAD]` tokens.
    pub fn padded(&self, len: usize) -> Self {
        let mut out = self.clone();
        while out.token_ids.len() < len {
            out.tokens.push("[PAD]".into());
            out.token_ids.push(PAD_ID);
            out.segment_ids.push(1);
            out.attention_mask.push(false);
            out.offsets.push(None);
        }
        out
    }
}

/// Kept-token counts after proportional tail trimming to fit `budget`.
fn trim_counts(lengths: &[usize], budget: usize) -> Vec<usize> {
    let total: usize = lengths.iter().sum();
    if total <= budget {
        return lengths.to_vec();
    }
    let mut kept: Vec<usize> = lengths.iter().map(|&n| n * budget / total).collect();
    let mut spare = budget - kept.iter().sum::<usize>();
    for (k, &n) in kept.iter_mut().zip(lengths) {
        if spare == 0 {
            break;
        }
        if *k < n {
            *k += 1;
            spare -= 1;
        }
    }
    kept
}

pub fn assemble(dialogue: &Dialogue, qa: &QAPair, vocab: &Vocabulary, limits: Limits) -> Result<EncodedExample> {
    let count = dialogue.utterances.len();
    if count > limits.max_utterances {
        return Err(Error::TooManyUtterances {
            dialogue: dialogue.id.clone(),
            count,
            limit: limits.max_utterances,
        });
    }
    if count == 0 {
        return Err(Error::invalid("assemble", format!("dialogue {} has no utterances", dialogue.id)));
    }
    let question = tokenize(&qa.question);
    let fixed = question.len() + 2 + count;
    if fixed > limits.max_seq {
        return Err(Error::QuestionTooLong {
            qa_id: qa.id.clone(),
            needed: fixed,
            budget: limits.max_seq,
        });
    }

    let line_offsets = dialogue.line_offsets();
    let lines: Vec<Vec<Token>> = dialogue
        .utterances
        .iter()
        .zip(&line_offsets)
        .map(|(u, &off)| {
            tokenize(&u.line())
                .into_iter()
                .map(|t| Token {
                    start: t.start + off,
                    end: t.end + off,
                    ..t
                })
                .collect()
        })
        .collect();
    let lengths: Vec<usize> = lines.iter().map(Vec::len).collect();
    let kept = trim_counts(&lengths, limits.max_seq - fixed);
    let truncated = kept != lengths;

    let mut ex = EncodedExample {
        qa_id: qa.id.clone(),
        dialogue_id: dialogue.id.clone(),
        context: dialogue.context(),
        tokens: Vec::new(),
        token_ids: Vec::new(),
        segment_ids: Vec::new(),
        attention_mask: Vec::new(),
        offsets: Vec::new(),
        sep_positions: Vec::with_capacity(count),
        utterance_count: count,
        start_label: 0,
        end_label: 0,
        head_labels: vec![None; limits.max_utterances],
        relation_labels: vec![None; limits.max_utterances],
        gold_answers: qa.answers.iter().map(|a| a.text.clone()).collect(),
        unanswerable: true,
        truncated,
        answer_truncated: false,
    };
    let push = |ex: &mut EncodedExample, text: &str, id: usize, seg: usize, off: Option<(usize, usize)>| {
        ex.tokens.push(text.to_string());
        ex.token_ids.push(id);
        ex.segment_ids.push(seg);
        ex.attention_mask.push(true);
        ex.offsets.push(off);
    };

    push(&mut ex, "[CLS]", CLS_ID, 0, None);
    for t in &question {
        push(&mut ex, &t.text, vocab.id(&t.text), 0, None);
    }
    push(&mut ex, "[SEP]", SEP_ID, 0, None);

    // (utterance, token-in-line) -> sequence position, for kept tokens
    let mut position: Vec<Vec<Option<usize>>> = Vec::with_capacity(count);
    for (line, &keep) in lines.iter().zip(&kept) {
        let mut pos = vec![None; line.len()];
        for (k, t) in line.iter().take(keep).enumerate() {
            pos[k] = Some(ex.len());
            push(&mut ex, &t.text, vocab.id(&t.text), 1, Some((t.start, t.end)));
        }
        ex.sep_positions.push(ex.len());
        push(&mut ex, "[SEP]", SEP_ID, 1, None);
        position.push(pos);
    }

    if !qa.is_impossible {
        if let Some(answer) = qa.answers.first() {
            let (a, b) = (answer.start, answer.start + answer.text.chars().count());
            let covered: Vec<Option<usize>> = lines
                .iter()
                .zip(&position)
                .flat_map(|(line, pos)| {
                    line.iter().zip(pos).filter(|(t, _)| t.end > a && t.start < b).map(|(_, p)| *p)
                })
                .collect();
            match (covered.first(), covered.last()) {
                (Some(_), _) if covered.iter().any(Option::is_none) => ex.answer_truncated = true,
                (Some(Some(s)), Some(Some(e))) => {
                    ex.start_label = *s;
                    ex.end_label = *e;
                    ex.unanswerable = false;
                }
                _ => {}
            }
        }
    }

    let (heads, relations) = relations_to_tree(dialogue);
    for i in 0..count {
        ex.head_labels[i] = Some(heads[i]);
        ex.relation_labels[i] = relations[i];
    }
    Ok(ex)
}
