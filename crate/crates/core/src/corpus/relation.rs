use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// The sixteen discourse relation types, in class-id order 0..=15.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RelationType {
    Comment,
    ClarificationQuestion,
    Qap,
    Continuation,
    Acknowledgement,
    QuestionElaboration,
    Result,
    Elaboration,
    Explanation,
    Correction,
    Contrast,
    Conditional,
    Background,
    Narration,
    Alternation,
    Parallel,
}

pub const NUM_RELATIONS: usize = 16;

impl RelationType {
    pub const ALL: [RelationType; NUM_RELATIONS] = [
        RelationType::Comment,
        RelationType::ClarificationQuestion,
        RelationType::Qap,
        RelationType::Continuation,
        RelationType::Acknowledgement,
        RelationType::QuestionElaboration,
        RelationType::Result,
        RelationType::Elaboration,
        RelationType::Explanation,
        RelationType::Correction,
        RelationType::Contrast,
        RelationType::Conditional,
        RelationType::Background,
        RelationType::Narration,
        RelationType::Alternation,
        RelationType::Parallel,
    ];

    pub fn class_id(self) -> usize {
        self as usize
    }

    pub fn from_class_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            RelationType::Comment => "Comment",
            RelationType::ClarificationQuestion => "Clarification question",
            RelationType::Qap => "QAP",
            RelationType::Continuation => "Continuation",
            RelationType::Acknowledgement => "Acknowledgement",
            RelationType::QuestionElaboration => "Question-elaboration",
            RelationType::Result => "Result",
            RelationType::Elaboration => "Elaboration",
            RelationType::Explanation => "Explanation",
            RelationType::Correction => "Correction",
            RelationType::Contrast => "Contrast",
            RelationType::Conditional => "Conditional",
            RelationType::Background => "Background",
            RelationType::Narration => "Narration",
            RelationType::Alternation => "Alternation",
            RelationType::Parallel => "Parallel",
        }
    }

    /// Share of each type among annotated relations in the Molweni corpus, in percent.
    pub fn corpus_ratio(self) -> f64 {
        const RATIOS: [f64; NUM_RELATIONS] = [
            31.7, 24.0, 20.1, 6.7, 3.2, 3.0, 2.6, 2.2, 1.6, 1.2, 1.2, 1.0, 0.4, 0.3, 0.2, 0.2,
        ];
        RATIOS[self.class_id()]
    }
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RelationType {
    type Err = Error;

    /// Accepts the canonical names plus the spellings used in the public
    /// Molweni release (`Clarification_question`, `Question-answer_pair`, `Q-Elab`).
    fn from_str(s: &str) -> Result<Self, Error> {
        let key: String = s
            .chars()
            .filter(|c| c.is_alphanumeric())
            .flat_map(char::to_lowercase)
            .collect();
        let found = match key.as_str() {
            "comment" => RelationType::Comment,
            "clarificationquestion" => RelationType::ClarificationQuestion,
            "qap" | "questionanswerpair" => RelationType::Qap,
            "continuation" => RelationType::Continuation,
            "acknowledgement" | "acknowledgment" => RelationType::Acknowledgement,
            "questionelaboration" | "qelab" => RelationType::QuestionElaboration,
            "result" => RelationType::Result,
            "elaboration" => RelationType::Elaboration,
            "explanation" => RelationType::Explanation,
            "correction" => RelationType::Correction,
            "contrast" => RelationType::Contrast,
            "conditional" => RelationType::Conditional,
            "background" => RelationType::Background,
            "narration" => RelationType::Narration,
            "alternation" => RelationType::Alternation,
            "parallel" => RelationType::Parallel,
            _ => return Err(Error::UnknownRelation(s.to_string())),
        };
        Ok(found)
    }
}

impl Serialize for RelationType {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for RelationType {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
