//! Corpus-level encoding and prediction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{assemble, Dialogue, EncodedExample, Limits, QAPair, Vocabulary};
use crate::decode::{DecodeConfig, ParsePrediction, QAPrediction};
use crate::error::Result;
use crate::model::JointModel;
use crate::scalar::Scalar;

/// Assembles every question of every dialogue, in corpus order.
pub fn encode_corpus(corpus: &[Dialogue], vocab: &Vocabulary, limits: Limits) -> Result<Vec<EncodedExample>> {
    let mut out = Vec::new();
    for d in corpus {
        for qa in &d.qas {
            out.push(assemble(d, qa, vocab, limits)?);
        }
    }
    Ok(out)
}

/// The input a dialogue's tree is predicted from: its first question, or
/// an empty one when it has none.
pub fn parse_example(dialogue: &Dialogue, vocab: &Vocabulary, limits: Limits) -> Result<EncodedExample> {
    let empty = QAPair {
        id: format!("{}#parse", dialogue.id),
        question: String::new(),
        answers: vec![],
        is_impossible: true,
    };
    assemble(dialogue, dialogue.qas.first().unwrap_or(&empty), vocab, limits)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    /// Question id to answer text (empty for no answer).
    pub answers: BTreeMap<String, String>,
    /// Dialogue id to predicted tree.
    pub parses: BTreeMap<String, ParsePrediction>,
    pub details: Vec<QAPrediction>,
}

pub fn predict_corpus<T: Scalar>(
    model: &JointModel<T>,
    vocab: &Vocabulary,
    corpus: &[Dialogue],
    limits: Limits,
    decode: DecodeConfig,
) -> Result<Predictions> {
    let mut out = Predictions::default();
    for d in corpus {
        if d.qas.is_empty() {
            let ex = parse_example(d, vocab, limits)?;
            let (_, parse) = model.predict(&ex, decode)?;
            out.parses.insert(d.id.clone(), parse);
        }
        for (k, qa) in d.qas.iter().enumerate() {
            let ex = assemble(d, qa, vocab, limits)?;
            let (answer, parse) = model.predict(&ex, decode)?;
            if k == 0 {
                out.parses.insert(d.id.clone(), parse);
            }
            out.answers.insert(qa.id.clone(), answer.answer_text.clone());
            out.details.push(answer);
        }
    }
    Ok(out)
}
