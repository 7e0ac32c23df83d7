//! Seeded synthetic corpora with planted, learnable structure.
//!
//! Each non-root utterance opens with the name of the speaker it replies to
//! and a marker phrase chosen by its relation type, so links and relation
//! labels are recoverable from the text. Answerable questions name the
//! topic of a head utterance and the speaker of its dependent; the answer is
//! a literal phrase inside that dependent. Unanswerable questions ask about
//! a topic that never occurs in the dialogue.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use super::{Answer, Dialogue, DiscourseRelation, QAPair, RelationType, Utterance, NUM_RELATIONS};
use crate::error::{Error, Result};

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub dialogues: usize,
    pub min_utterances: usize,
    pub max_utterances: usize,
    pub min_questions: usize,
    pub max_questions: usize,
    /// Relative weight per relation class id; defaults to the Molweni shares.
    pub relation_weights: Vec<f64>,
    pub unanswerable_fraction: f64,
    /// Chance that a later utterance starts a new thread (attaches to the root).
    pub root_probability: f64,
    pub speakers: Vec<String>,
    pub topics: Vec<String>,
    pub actions: Vec<String>,
    pub answers: Vec<String>,
    /// One marker phrase per relation class id.
    pub markers: Vec<String>,
    pub id_prefix: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            dialogues: 64,
            min_utterances: 3,
            max_utterances: 8,
            min_questions: 1,
            max_questions: 2,
            relation_weights: RelationType::ALL.iter().map(|r| r.corpus_ratio()).collect(),
            unanswerable_fraction: 0.1426,
            root_probability: 0.05,
            speakers: strings(&[
                "alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi", "ivan", "judy", "mallory", "oscar",
                "peggy", "trent", "victor", "walter",
            ]),
            topics: strings(&[
                "kernel", "driver", "router", "grub", "mirror", "wifi", "desktop", "panel", "printer", "monitor", "sound",
                "firewall", "partition", "swap", "terminal", "browser", "compiler", "keyring", "bootloader", "webcam",
                "touchpad", "bluetooth", "cron", "locale",
            ]),
            actions: strings(&[
                "fix", "update", "install", "remove", "configure", "restart", "mount", "reset", "enable", "disable",
            ]),
            answers: strings(&[
                "a wireless accesspoint",
                "the live cd",
                "an older release",
                "the recovery mode",
                "a usb stick",
                "the alternate installer",
                "a static address",
                "the proprietary blob",
                "a fresh profile",
                "the backports repo",
                "a bigger pagefile",
                "the nano editor",
            ]),
            markers: strings(&[
                "i think",
                "do you mean",
                "you could try",
                "also",
                "thanks for",
                "i mean",
                "so now",
                "in fact",
                "because",
                "no actually",
                "but",
                "if so",
                "btw",
                "then",
                "or maybe",
                "likewise",
            ]),
            id_prefix: "synth".into(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InfeasibleSpec(m.to_string()));
        if !(0.0..=1.0).contains(&self.unanswerable_fraction) {
            return fail("unanswerable_fraction must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.root_probability) {
            return fail("root_probability must lie in [0, 1)");
        }
        if self.min_utterances < 2 || self.min_utterances > self.max_utterances || self.max_utterances > 14 {
            return fail("utterance range must satisfy 2 <= min <= max <= 14");
        }
        if self.min_questions > self.max_questions {
            return fail("min_questions exceeds max_questions");
        }
        if self.relation_weights.len() != NUM_RELATIONS
            || self.relation_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || self.relation_weights.iter().sum::<f64>() <= 0.0
        {
            return fail("relation_weights needs 16 non-negative weights with a positive sum");
        }
        if self.markers.len() != NUM_RELATIONS {
            return fail("markers needs one phrase per relation type");
        }
        if self.speakers.len() < 2 {
            return fail("at least two speakers are required");
        }
        if self.topics.len() < self.max_utterances + self.max_questions {
            return fail("topics must outnumber max_utterances + max_questions");
        }
        if self.actions.is_empty() || self.answers.is_empty() {
            return fail("actions and answers must be non-empty");
        }
        Ok(())
    }
}

struct Plan {
    speakers: Vec<usize>,
    heads: Vec<Option<usize>>,
    kinds: Vec<Option<RelationType>>,
}

fn plan_dialogue(spec: &SynthSpec, rng: &mut ChaCha8Rng, relation_dist: &WeightedIndex<f64>) -> Plan {
    let n = rng.random_range(spec.min_utterances..=spec.max_utterances);
    let cast_size = rng.random_range(2..=4usize.min(spec.speakers.len()));
    let cast: Vec<usize> = rand::seq::index::sample(rng, spec.speakers.len(), cast_size).into_vec();

    let mut speakers = Vec::with_capacity(n);
    let mut heads = Vec::with_capacity(n);
    let mut kinds = Vec::with_capacity(n);
    for i in 0..n {
        let others: Vec<usize> = cast.iter().copied().filter(|s| speakers.last() != Some(s)).collect();
        let speaker = *others.choose(rng).unwrap();
        speakers.push(speaker);
        if i == 0 || rng.random_bool(spec.root_probability) {
            heads.push(None);
            kinds.push(None);
            continue;
        }
        // Replies address the latest turn of some other speaker.
        let mut candidates: Vec<usize> = Vec::new();
        for j in (0..i).rev() {
            let s = speakers[j];
            if s != speaker && !candidates.iter().any(|&c| speakers[c] == s) {
                candidates.push(j);
            }
        }
        let head = if candidates.is_empty() {
            i - 1
        } else if candidates.len() == 1 || rng.random_bool(0.5) {
            candidates[0]
        } else {
            *candidates[1..].choose(rng).unwrap()
        };
        heads.push(Some(head));
        kinds.push(Some(RelationType::ALL[relation_dist.sample(rng)]));
    }
    Plan { speakers, heads, kinds }
}

fn render(spec: &SynthSpec, plan: &Plan, d: usize, rng: &mut ChaCha8Rng, questions: usize, unanswerable: &[bool]) -> Dialogue {
    let n = plan.speakers.len();
    let topic_ids = rand::seq::index::sample(rng, spec.topics.len(), n + questions).into_vec();
    let topic = |i: usize| spec.topics[topic_ids[i]].as_str();
    let name = |i: usize| spec.speakers[plan.speakers[i]].as_str();

    // Dependents that will carry an answer, preferring QAP arcs.
    let mut arcs: Vec<usize> = (0..n).filter(|&i| plan.heads[i].is_some()).collect();
    arcs.shuffle(rng);
    arcs.sort_by_key(|&i| plan.kinds[i] != Some(RelationType::Qap));
    let answerable_needed = unanswerable.iter().filter(|u| !**u).count();
    let carriers: Vec<usize> = arcs.into_iter().take(answerable_needed).collect();
    let answer_phrase: Vec<Option<&str>> = (0..n)
        .map(|i| carriers.contains(&i).then(|| spec.answers.choose(rng).unwrap().as_str()))
        .collect();

    let mut utterances = Vec::with_capacity(n);
    let mut answer_prefix = vec![0usize; n];
    for i in 0..n {
        let action = spec.actions.choose(rng).unwrap();
        let text = match plan.heads[i] {
            None => format!("how do i {action} the {} ?", topic(i)),
            Some(h) => {
                let prefix = format!("{} {} ", name(h), spec.markers[plan.kinds[i].unwrap().class_id()]);
                answer_prefix[i] = prefix.chars().count();
                match answer_phrase[i] {
                    Some(ans) => format!("{prefix}{ans} for the {}", topic(i)),
                    None => format!("{prefix}{action} the {}", topic(i)),
                }
            }
        };
        utterances.push(Utterance {
            speaker: name(i).to_string(),
            text,
            index: i,
        });
    }
    let mut dialogue = Dialogue {
        id: format!("{}-{d:04}", spec.id_prefix),
        utterances,
        relations: (0..n)
            .filter_map(|i| {
                plan.heads[i].map(|h| DiscourseRelation {
                    head: h,
                    dependent: i,
                    kind: plan.kinds[i].unwrap(),
                })
            })
            .collect(),
        qas: Vec::new(),
    };

    let offsets = dialogue.line_offsets();
    let mut carrier_iter = carriers.iter();
    for (k, &unans) in unanswerable.iter().enumerate() {
        let id = format!("{}-q{k}", dialogue.id);
        let carrier = if unans { None } else { carrier_iter.next().copied() };
        let qa = match carrier {
            Some(y) => {
                let x = plan.heads[y].unwrap();
                let start = offsets[y] + name(y).chars().count() + 2 + answer_prefix[y];
                QAPair {
                    id,
                    question: format!("what does {} suggest for the {} ?", name(y), topic(x)),
                    answers: vec![Answer {
                        text: answer_phrase[y].unwrap().to_string(),
                        start,
                    }],
                    is_impossible: false,
                }
            }
            None => {
                let asker = name(rng.random_range(0..n));
                QAPair {
                    id,
                    question: format!("what does {asker} suggest for the {} ?", topic(n + k)),
                    answers: vec![],
                    is_impossible: true,
                }
            }
        };
        dialogue.qas.push(qa);
    }
    dialogue
}

/// Deterministic corpus for `(spec, seed)`.
pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<Vec<Dialogue>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let relation_dist =
        WeightedIndex::new(&spec.relation_weights).map_err(|e| Error::InfeasibleSpec(e.to_string()))?;

    let plans: Vec<Plan> = (0..spec.dialogues).map(|_| plan_dialogue(spec, &mut rng, &relation_dist)).collect();
    let counts: Vec<usize> = plans
        .iter()
        .map(|p| {
            let arcs = p.heads.iter().flatten().count();
            rng.random_range(spec.min_questions..=spec.max_questions).min(arcs.max(1))
        })
        .collect();

    // Exact share of unanswerable questions, spread by a seeded shuffle.
    let total: usize = counts.iter().sum();
    let n_unans = (total as f64 * spec.unanswerable_fraction).round() as usize;
    let mut flags: Vec<bool> = (0..total).map(|i| i < n_unans).collect();
    flags.shuffle(&mut rng);
    // A dialogue without arcs cannot host an answerable question.
    let has_arcs: Vec<bool> = plans
        .iter()
        .zip(&counts)
        .flat_map(|(p, &c)| std::iter::repeat_n(p.heads.iter().any(Option::is_some), c))
        .collect();
    for i in 0..total {
        if !has_arcs[i] && !flags[i] {
            if let Some(j) = (0..total).find(|&j| has_arcs[j] && flags[j]) {
                flags[j] = false;
            }
            flags[i] = true;
        }
    }

    let mut out = Vec::with_capacity(plans.len());
    let mut at = 0;
    for (d, (plan, &c)) in plans.iter().zip(&counts).enumerate() {
        out.push(render(spec, plan, d, &mut rng, c, &flags[at..at + c]));
        at += c;
    }
    Ok(out)
}
