use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{Dialogue, RelationType};

/// Head of an utterance in a discourse dependency tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Head {
    Root,
    Utterance(usize),
}

impl Head {
    /// Candidate slot in link logits: the root is slot 0, utterance `j` is slot `j + 1`.
    pub fn slot(self) -> usize {
        match self {
            Head::Root => 0,
            Head::Utterance(j) => j + 1,
        }
    }

    pub fn from_slot(slot: usize) -> Self {
        match slot {
            0 => Head::Root,
            s => Head::Utterance(s - 1),
        }
    }

    pub fn utterance(self) -> Option<usize> {
        match self {
            Head::Root => None,
            Head::Utterance(j) => Some(j),
        }
    }
}

/// Serialized as `null` for the root and the utterance index otherwise.
impl Serialize for Head {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.utterance().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Head {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(Option::<usize>::deserialize(d)?.map_or(Head::Root, Head::Utterance))
    }
}

/// Reduces the annotated arcs to one head per utterance.
///
/// Among several incoming arcs the nearest preceding head wins (first
/// annotated type on exact duplicates). Utterances with no incoming arc,
/// and always utterance 0, attach to the root with no relation.
pub fn relations_to_tree(dialogue: &Dialogue) -> (Vec<Head>, Vec<Option<RelationType>>) {
    let n = dialogue.utterances.len();
    let mut heads = vec![Head::Root; n];
    let mut labels = vec![None; n];
    for r in &dialogue.relations {
        if r.dependent >= n || r.head >= r.dependent {
            continue;
        }
        let better = match heads[r.dependent] {
            Head::Root => true,
            Head::Utterance(cur) => r.head > cur,
        };
        if better {
            heads[r.dependent] = Head::Utterance(r.head);
            labels[r.dependent] = Some(r.kind);
        }
    }
    (heads, labels)
}
