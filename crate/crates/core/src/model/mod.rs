//! The joint model: a transformer encoder shared by the span-extraction
//! heads and the discourse-parsing heads.

pub mod encoder;
pub mod heads;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedExample, Head, RelationType};
use crate::decode::{decode_answer, decode_parse, DecodeConfig, ParsePrediction, QAPrediction};
use crate::error::{Error, Result};
use crate::objective::{self, LinkTarget, LossBreakdown, ObjectiveConfig, RelationTarget, SpanTarget};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

pub use encoder::{Encoder, EncoderConfig, SequenceRepresentation};
pub use heads::{cascade, Heads, PairTable, HEAD_PREFIX};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Dropout on pair features.
    pub dp_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            dp_dropout: 0.4,
        }
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub sequence: SequenceRepresentation,
    /// `1×L` start and end logits, when the QA path was built.
    pub span: Option<(Var, Var)>,
    pub pairs: Option<PairTable>,
    /// `T×(T+1)` link logits, when the DP path was built.
    pub link: Option<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Paths {
    pub qa: bool,
    pub dp: bool,
}

impl Paths {
    pub const BOTH: Paths = Paths { qa: true, dp: true };
}

#[derive(Clone, Debug)]
pub struct JointModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    encoder: Encoder,
    heads: Heads,
}

impl<T: Scalar> JointModel<T> {
    /// Fresh model with every random block drawn from a generator seeded by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(config.encoder.clone(), &mut params, &mut rng)?;
        let heads = Heads::new(
            config.encoder.hidden_size,
            config.dp_dropout,
            config.encoder.init_std,
            &mut params,
            &mut rng,
        )?;
        Ok(Self {
            config,
            params,
            encoder,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn heads(&self) -> &Heads {
        &self.heads
    }

    /// Sets every head parameter to zero, making all head distributions
    /// uniform over their valid supports.
    pub fn zero_heads(&mut self) {
        encoder::fill_prefix(&mut self.params, HEAD_PREFIX, 0.0);
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, ex: &EncodedExample, paths: Paths, train: bool) -> Result<ForwardOutput> {
        let sequence = self
            .encoder
            .forward(g, p, &ex.token_ids, &ex.segment_ids, &ex.attention_mask, train)?;
        let span = if paths.qa {
            Some(self.heads.qa_logits(g, p, sequence.states, &ex.span_mask())?)
        } else {
            None
        };
        // The DP path comes second so its dropout never shifts the QA path's.
        let (pairs, link) = if paths.dp {
            let seps = self.heads.separator_vectors(g, sequence.states, &ex.sep_positions)?;
            let table = self.heads.pair_features(g, p, seps, train)?;
            let link = self.heads.link_logits(g, p, &table)?;
            (Some(table), Some(link))
        } else {
            (None, None)
        };
        Ok(ForwardOutput {
            sequence,
            span,
            pairs,
            link,
        })
    }

    /// Loss of one example under `objective`, plus its components.
    pub fn example_loss(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        ex: &EncodedExample,
        objective: &ObjectiveConfig,
        train: bool,
    ) -> Result<(Var, LossBreakdown)> {
        objective.validate()?;
        let paths = Paths {
            qa: objective.uses_qa(),
            dp: objective.uses_dp(),
        };
        let out = self.forward(g, p, ex, paths, train)?;
        let qa = match out.span {
            Some((start_logits, end_logits)) => Some(objective::qa_loss(
                g,
                &[SpanTarget {
                    start_logits,
                    end_logits,
                    start: ex.start_label,
                    end: ex.end_label,
                }],
            )?),
            None => None,
        };
        let dp = match (&out.pairs, out.link) {
            (Some(table), Some(logits)) => {
                let heads = ex.gold_heads();
                let link = objective::link_loss(g, &[LinkTarget { logits, heads: &heads }], objective.averaging)?;
                let (pairs, labels) = gold_relation_pairs(ex);
                let logits = if pairs.is_empty() {
                    None
                } else {
                    Some(self.heads.relation_logits(g, p, table, &pairs)?)
                };
                let rel = objective::relation_loss(g, &[RelationTarget { logits, labels: &labels }], objective.averaging)?;
                Some((link, rel))
            }
            _ => None,
        };
        let (qa_weight, lambda) = objective.weights();
        let total = objective::combine(g, qa, dp, qa_weight, lambda)?;
        let item = |g: &Graph<T>, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item().to_f64_lossy());
        let mut breakdown = objective::weighted_total(
            item(g, qa),
            item(g, dp.map(|d| d.0)),
            item(g, dp.map(|d| d.1)),
            qa_weight,
            lambda,
        )?;
        breakdown.total = g.value(total).item().to_f64_lossy();
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite(format!("loss of example {}", ex.qa_id)));
        }
        Ok((total, breakdown))
    }

    /// Evaluation-mode answer and tree for one example.
    pub fn predict(&self, ex: &EncodedExample, decode: DecodeConfig) -> Result<(QAPrediction, ParsePrediction)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let out = self.forward(&mut g, &p, ex, Paths::BOTH, false)?;
        let (s, e) = out.span.expect("QA path built");
        let start = to_f64(g.value(s).values());
        let end = to_f64(g.value(e).values());
        let answer = decode_answer(&ex.qa_id, &start, &end, &ex.offsets, &ex.context, decode);

        let table = out.pairs.expect("DP path built");
        let t = table.count;
        let link = g.value(out.link.expect("DP path built"));
        let rows: Vec<Vec<f64>> = (0..t).map(|i| to_f64(link.row(i))).collect();
        let candidates: Vec<(usize, Head)> = (1..t).flat_map(|i| (0..i).map(move |j| (i, Head::Utterance(j)))).collect();
        let rel = if candidates.is_empty() {
            None
        } else {
            let v = self.heads.relation_logits(&mut g, &p, &table, &candidates)?;
            Some(g.value(v).clone())
        };
        let parse = decode_parse(&rows, |i, j| {
            let r = rel.as_ref().expect("a real head implies at least two utterances");
            // candidates are ordered by dependent, then head
            to_f64(r.row(i * (i - 1) / 2 + j))
        });
        Ok((answer, parse))
    }
}

/// Gold `(dependent, head)` pairs with a real head, and their labels.
pub fn gold_relation_pairs(ex: &EncodedExample) -> (Vec<(usize, Head)>, Vec<RelationType>) {
    let mut pairs = Vec::new();
    let mut labels = Vec::new();
    for i in 0..ex.utterance_count {
        if let (Some(head @ Head::Utterance(_)), Some(rel)) = (ex.head_labels[i], ex.relation_labels[i]) {
            pairs.push((i, head));
            labels.push(rel);
        }
    }
    (pairs, labels)
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}
