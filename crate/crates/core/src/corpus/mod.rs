//! Dialogue corpus: data model, JSON I/O, tokenization, vocabulary,
//! input assembly and the synthetic generator.
//!
//! Corpus files follow a SQuAD-v2-like layout:
//!
//! ```json
//! {"data": [{"id": "d0",
//!            "edus": [{"speaker": "sipher", "text": "..."}],
//!            "relations": [{"x": 0, "y": 1, "type": "Comment"}],
//!            "qas": [{"id": "q0", "question": "...", "is_impossible": false,
//!                     "answers": [{"text": "...", "answer_start": 12}]}]}]}
//! ```
//!
//! `answer_start` is a character offset into the dialogue context, the
//! `"speaker: text"` lines joined by single spaces.

mod assemble;
mod relation;
mod synth;
mod tokenize;
mod tree;
mod vocab;

pub use assemble::{assemble, EncodedExample, Limits};
pub use relation::{RelationType, NUM_RELATIONS};
pub use synth::{generate_synthetic, SynthSpec};
pub use tokenize::{tokenize, Token};
pub use tree::{relations_to_tree, Head};
pub use vocab::{build_vocab, Vocabulary, CLS_ID, PAD_ID, SEP_ID, UNK_ID};

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: String,
    pub text: String,
    pub index: usize,
}

impl Utterance {
    /// The utterance as it appears in the context string.
    pub fn line(&self) -> String {
        format!("{}: {}", self.speaker, self.text)
    }
}

/// Directed arc from `head` (x) to `dependent` (y), with x < y.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscourseRelation {
    pub head: usize,
    pub dependent: usize,
    pub kind: RelationType,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    /// Character offset into [`Dialogue::context`].
    pub start: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub id: String,
    pub question: String,
    pub answers: Vec<Answer>,
    pub is_impossible: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub utterances: Vec<Utterance>,
    pub relations: Vec<DiscourseRelation>,
    pub qas: Vec<QAPair>,
}

impl Dialogue {
    pub fn context(&self) -> String {
        self.utterances.iter().map(Utterance::line).collect::<Vec<_>>().join(" ")
    }

    /// Character offset of each utterance line inside [`Dialogue::context`].
    pub fn line_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.utterances.len());
        let mut at = 0;
        for u in &self.utterances {
            offsets.push(at);
            at += u.line().chars().count() + 1;
        }
        offsets
    }

    /// Checks relation indices and answer offsets.
    pub fn validate(&self) -> Result<()> {
        let n = self.utterances.len();
        for (i, u) in self.utterances.iter().enumerate() {
            if u.index != i {
                return Err(Error::Schema {
                    path: format!("{}.edus[{i}]", self.id),
                    field: "index".into(),
                });
            }
        }
        for r in &self.relations {
            let reason = if r.head >= r.dependent {
                Some("head must precede dependent")
            } else if r.dependent >= n {
                Some("index out of range")
            } else {
                None
            };
            if let Some(reason) = reason {
                return Err(Error::InvalidRelation {
                    dialogue: self.id.clone(),
                    x: r.head,
                    y: r.dependent,
                    reason,
                });
            }
        }
        let context: Vec<char> = self.context().chars().collect();
        for qa in &self.qas {
            if qa.is_impossible {
                continue;
            }
            if qa.answers.is_empty() {
                return Err(Error::Schema {
                    path: format!("{}.qas[{}]", self.id, qa.id),
                    field: "answers (answerable question without answers)".into(),
                });
            }
            for a in &qa.answers {
                let len = a.text.chars().count();
                let found: String = context.iter().skip(a.start).take(len).collect();
                if found != a.text {
                    return Err(Error::AnswerMismatch {
                        qa_id: qa.id.clone(),
                        start: a.start,
                        expected: a.text.clone(),
                        found,
                    });
                }
            }
        }
        Ok(())
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Dialogue>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, &path.display().to_string())
}

pub fn save_corpus(path: impl AsRef<Path>, dialogues: &[Dialogue]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, corpus_to_json(dialogues)?).map_err(|e| Error::io(path, e))
}

/// Parses and validates a corpus document. `origin` only labels errors.
pub fn parse_corpus(text: &str, origin: &str) -> Result<Vec<Dialogue>> {
    let root: Value = serde_json::from_str(text)?;
    let cx = Cursor { origin, path: String::new() };
    let data = cx.field(&root, "data")?.as_array().ok_or_else(|| cx.schema("data (expected a list)"))?;
    let mut out = Vec::with_capacity(data.len());
    for (i, d) in data.iter().enumerate() {
        let dialogue = parse_dialogue(d, &cx.at(format!("data[{i}]")))?;
        dialogue.validate()?;
        out.push(dialogue);
    }
    Ok(out)
}

struct Cursor<'a> {
    origin: &'a str,
    path: String,
}

impl Cursor<'_> {
    fn at(&self, path: String) -> Cursor<'_> {
        Cursor { origin: self.origin, path }
    }

    fn schema(&self, field: &str) -> Error {
        let path = if self.path.is_empty() {
            self.origin.to_string()
        } else {
            format!("{}:{}", self.origin, self.path)
        };
        Error::Schema {
            path,
            field: field.to_string(),
        }
    }

    fn field<'v>(&self, v: &'v Value, name: &str) -> Result<&'v Value> {
        v.get(name).ok_or_else(|| self.schema(name))
    }

    fn str(&self, v: &Value, name: &str) -> Result<String> {
        self.field(v, name)?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| self.schema(&format!("{name} (expected a string)")))
    }

    fn usize(&self, v: &Value, name: &str) -> Result<usize> {
        self.field(v, name)?
            .as_u64()
            .map(|n| n as usize)
            .ok_or_else(|| self.schema(&format!("{name} (expected a non-negative integer)")))
    }

    fn list<'v>(&self, v: &'v Value, name: &str) -> Result<&'v Vec<Value>> {
        self.field(v, name)?
            .as_array()
            .ok_or_else(|| self.schema(&format!("{name} (expected a list)")))
    }
}

fn parse_dialogue(v: &Value, cx: &Cursor<'_>) -> Result<Dialogue> {
    let id = match cx.field(v, "id")? {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        _ => return Err(cx.schema("id (expected a string)")),
    };
    let mut utterances = Vec::new();
    for (i, e) in cx.list(v, "edus")?.iter().enumerate() {
        let ecx = cx.at(format!("{}.edus[{i}]", cx.path));
        utterances.push(Utterance {
            speaker: ecx.str(e, "speaker")?,
            text: ecx.str(e, "text")?,
            index: i,
        });
    }
    let mut relations = Vec::new();
    if let Some(rels) = v.get("relations") {
        let rels = rels.as_array().ok_or_else(|| cx.schema("relations (expected a list)"))?;
        for (i, r) in rels.iter().enumerate() {
            let rcx = cx.at(format!("{}.relations[{i}]", cx.path));
            relations.push(DiscourseRelation {
                head: rcx.usize(r, "x")?,
                dependent: rcx.usize(r, "y")?,
                kind: rcx.str(r, "type")?.parse()?,
            });
        }
    }
    let mut qas = Vec::new();
    if let Some(list) = v.get("qas") {
        let list = list.as_array().ok_or_else(|| cx.schema("qas (expected a list)"))?;
        for (i, q) in list.iter().enumerate() {
            let qcx = cx.at(format!("{}.qas[{i}]", cx.path));
            let mut answers = Vec::new();
            for (j, a) in qcx.list(q, "answers")?.iter().enumerate() {
                let acx = qcx.at(format!("{}.answers[{j}]", qcx.path));
                answers.push(Answer {
                    text: acx.str(a, "text")?,
                    start: acx.usize(a, "answer_start")?,
                });
            }
            let is_impossible = match q.get("is_impossible") {
                None => answers.is_empty(),
                Some(Value::Bool(b)) => *b,
                Some(_) => return Err(qcx.schema("is_impossible (expected a boolean)")),
            };
            qas.push(QAPair {
                id: qcx.str(q, "id")?,
                question: qcx.str(q, "question")?,
                answers,
                is_impossible,
            });
        }
    }
    Ok(Dialogue {
        id,
        utterances,
        relations,
        qas,
    })
}

fn dialogue_to_value(d: &Dialogue) -> Value {
    let edus: Vec<Value> = d
        .utterances
        .iter()
        .map(|u| json!({"speaker": u.speaker, "text": u.text}))
        .collect();
    let relations: Vec<Value> = d
        .relations
        .iter()
        .map(|r| json!({"x": r.head, "y": r.dependent, "type": r.kind.name()}))
        .collect();
    let qas: Vec<Value> = d
        .qas
        .iter()
        .map(|q| {
            let answers: Vec<Value> = q
                .answers
                .iter()
                .map(|a| json!({"text": a.text, "answer_start": a.start}))
                .collect();
            json!({"id": q.id, "question": q.question, "answers": answers, "is_impossible": q.is_impossible})
        })
        .collect();
    let mut m = Map::new();
    m.insert("id".into(), Value::String(d.id.clone()));
    m.insert("edus".into(), Value::Array(edus));
    m.insert("relations".into(), Value::Array(relations));
    m.insert("qas".into(), Value::Array(qas));
    Value::Object(m)
}

pub fn corpus_to_json(dialogues: &[Dialogue]) -> Result<String> {
    let data: Vec<Value> = dialogues.iter().map(dialogue_to_value).collect();
    Ok(serde_json::to_string_pretty(&json!({ "data": data }))?)
}


#[cfg(test)]
mod tests {
    use super::fixtures::ubuntu_dialogue;
    use super::*;

    #[test]
    fn ubuntu_dialogue_round_trips() {
        let d = ubuntu_dialogue();
        d.validate().unwrap();
        let json = corpus_to_json(std::slice::from_ref(&d)).unwrap();
        let back = parse_corpus(&json, "mem").unwrap();
        assert_eq!(back, vec![d]);
        assert_eq!(corpus_to_json(&back).unwrap(), json);
    }

    #[test]
    fn empty_data_is_empty_corpus() {
        assert!(parse_corpus(r#"{"data": []}"#, "mem").unwrap().is_empty());
    }

    #[test]
    fn backward_relation_rejected() {
        let doc = r#"{"data": [{"id": "d", "edus": [{"speaker": "a", "text": "x"}, {"speaker": "b", "text": "y"}],
                     "relations": [{"x": 1, "y": 1, "type": "Comment"}], "qas": []}]}"#;
        assert!(matches!(parse_corpus(doc, "mem"), Err(Error::InvalidRelation { .. })));
        let doc = doc.replace(r#""x": 1, "y": 1"#, r#""x": 1, "y": 0"#);
        assert!(matches!(parse_corpus(&doc, "mem"), Err(Error::InvalidRelation { .. })));
    }

    #[test]
    fn distinct_error_kinds() {
        let missing = r#"{"data": [{"id": "d", "edus": [{"text": "x"}]}]}"#;
        match parse_corpus(missing, "f.json") {
            Err(Error::Schema { path, field }) => {
                assert_eq!(path, "f.json:data[0].edus[0]");
                assert_eq!(field, "speaker");
            }
            other => panic!("{other:?}"),
        }
        let unknown = r#"{"data": [{"id": "d", "edus": [{"speaker": "a", "text": "x"}, {"speaker": "b", "text": "y"}],
                        "relations": [{"x": 0, "y": 1, "type": "Sarcasm"}]}]}"#;
        assert!(matches!(parse_corpus(unknown, "f"), Err(Error::UnknownRelation(_))));
        let offset = r#"{"data": [{"id": "d", "edus": [{"speaker": "a", "text": "hello there"}],
                       "qas": [{"id": "q", "question": "?", "is_impossible": false,
                                "answers": [{"text": "there", "answer_start": 2}]}]}]}"#;
        assert!(matches!(parse_corpus(offset, "f"), Err(Error::AnswerMismatch { .. })));
    }
}
