//! Cross-entropy losses for span extraction, link prediction and relation
//! classification, and their weighted combination.
//!
//! Every function takes per-example logits already recorded in a graph and
//! returns a scalar [`Var`], so the combined loss can be differentiated in
//! one backward pass.

use serde::{Deserialize, Serialize};

use crate::corpus::{Head, RelationType};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// How link and relation losses are normalized within a dialogue.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Divide by the dialogue's own count (real utterances for links,
    /// contributing utterances for relations).
    #[default]
    PerDialogue,
    /// Divide both sums by a fixed utterance limit.
    Constant(usize),
}

/// Which terms of the objective are built and trained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Joint,
    QaOnly,
    DpOnly,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Mode::Joint),
            "qa-only" | "qa_only" => Ok(Mode::QaOnly),
            "dp-only" | "dp_only" => Ok(Mode::DpOnly),
            other => Err(Error::Config(format!("unknown mode {other:?} (joint, qa-only, dp-only)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub qa_weight: f64,
    pub mode: Mode,
    pub averaging: Averaging,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            qa_weight: 1.0,
            mode: Mode::Joint,
            averaging: Averaging::PerDialogue,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be a non-negative number, got {}", self.lambda)));
        }
        if !self.qa_weight.is_finite() || self.qa_weight < 0.0 {
            return Err(Error::Config(format!("qa weight must be a non-negative number, got {}", self.qa_weight)));
        }
        if self.averaging == Averaging::Constant(0) {
            return Err(Error::Config("constant averaging needs a positive divisor".into()));
        }
        Ok(())
    }

    pub fn uses_qa(&self) -> bool {
        self.mode != Mode::DpOnly
    }

    pub fn uses_dp(&self) -> bool {
        self.mode != Mode::QaOnly
    }

    /// Weights actually applied to the QA and DP terms under the mode.
    pub fn weights(&self) -> (f64, f64) {
        match self.mode {
            Mode::Joint => (self.qa_weight, self.lambda),
            Mode::QaOnly => (self.qa_weight, 0.0),
            Mode::DpOnly => (0.0, self.lambda),
        }
    }
}

/// Loss components for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub qa: f64,
    pub link: f64,
    pub relation: f64,
    pub dp: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Combines component losses into `qa + lambda * (link + relation)`.
pub fn total_loss(qa: f64, link: f64, relation: f64, lambda: f64) -> Result<LossBreakdown> {
    weighted_total(qa, link, relation, 1.0, lambda)
}

/// [`total_loss`] with an explicit weight on the QA term.
pub fn weighted_total(qa: f64, link: f64, relation: f64, qa_weight: f64, lambda: f64) -> Result<LossBreakdown> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    let dp = link + relation;
    Ok(LossBreakdown {
        qa,
        link,
        relation,
        dp,
        total: qa_weight * qa + lambda * dp,
        lambda,
    })
}

/// Span inputs of one example: `1×L` start and end logits and the gold
/// token positions.
#[derive(Clone, Copy, Debug)]
pub struct SpanTarget {
    pub start_logits: Var,
    pub end_logits: Var,
    pub start: usize,
    pub end: usize,
}

/// Mean over the batch of `(CE(start) + CE(end)) / 2`.
pub fn qa_loss<T: Scalar>(g: &mut Graph<T>, batch: &[SpanTarget]) -> Result<Var> {
    let mut terms = Vec::with_capacity(batch.len());
    for ex in batch {
        let s = g.cross_entropy(ex.start_logits, &[ex.start], None)?;
        let e = g.cross_entropy(ex.end_logits, &[ex.end], None)?;
        let both = g.add(s, e)?;
        terms.push(g.scale(both, T::from_f64_lossy(0.5))?);
    }
    mean(g, &terms, batch.len())
}

/// Link inputs of one dialogue: `T×(T+1)` logits and the gold head of
/// every real utterance.
#[derive(Clone, Copy, Debug)]
pub struct LinkTarget<'a> {
    pub logits: Var,
    pub heads: &'a [Head],
}

/// Per-dialogue link cross-entropy, normalized per [`Averaging`], then
/// averaged over the batch.
pub fn link_loss<T: Scalar>(g: &mut Graph<T>, batch: &[LinkTarget<'_>], averaging: Averaging) -> Result<Var> {
    let mut terms = Vec::with_capacity(batch.len());
    for d in batch {
        let (rows, _) = g.value(d.logits).dims2()?;
        if rows != d.heads.len() {
            return Err(Error::ShapeMismatch {
                op: "link_loss",
                left: vec![rows],
                right: vec![d.heads.len()],
            });
        }
        let targets: Vec<usize> = d.heads.iter().map(|h| h.slot()).collect();
        let ce = g.cross_entropy(d.logits, &targets, None)?;
        terms.push(rescale(g, ce, rows, averaging)?);
    }
    mean(g, &terms, batch.len())
}

/// Relation inputs of one dialogue: `R×16` logits for the utterances with
/// a real gold head and their labels. `None` when no utterance has one.
#[derive(Clone, Copy, Debug)]
pub struct RelationTarget<'a> {
    pub logits: Option<Var>,
    pub labels: &'a [RelationType],
}

/// Per-dialogue relation cross-entropy over contributing utterances,
/// averaged over the batch. Dialogues without any contribute zero but still
/// count towards the batch size.
pub fn relation_loss<T: Scalar>(g: &mut Graph<T>, batch: &[RelationTarget<'_>], averaging: Averaging) -> Result<Var> {
    let mut terms = Vec::with_capacity(batch.len());
    for d in batch {
        let Some(logits) = d.logits else {
            if !d.labels.is_empty() {
                return Err(Error::invalid("relation_loss", "labels given without logits"));
            }
            continue;
        };
        let targets: Vec<usize> = d.labels.iter().map(|r| r.class_id()).collect();
        let ce = g.cross_entropy(logits, &targets, None)?;
        terms.push(rescale(g, ce, targets.len(), averaging)?);
    }
    mean(g, &terms, batch.len())
}

/// Turns a row mean over `rows` into the sum divided by the constant
/// divisor when averaging is constant.
fn rescale<T: Scalar>(g: &mut Graph<T>, row_mean: Var, rows: usize, averaging: Averaging) -> Result<Var> {
    match averaging {
        Averaging::PerDialogue => Ok(row_mean),
        Averaging::Constant(n) => g.scale(row_mean, T::from_f64_lossy(rows as f64 / n as f64)),
    }
}

/// `sum(terms) / n`, or a zero constant when `terms` is empty.
fn mean<T: Scalar>(g: &mut Graph<T>, terms: &[Var], n: usize) -> Result<Var> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    };
    let mut acc = first;
    for &t in rest {
        acc = g.add(acc, t)?;
    }
    if n == 1 {
        return Ok(acc);
    }
    g.scale(acc, T::from_f64_lossy(1.0 / n as f64))
}

/// Records `qa_weight * qa + lambda * (link + relation)` in the graph.
/// Terms given as `None` are skipped rather than multiplied by zero.
pub fn combine<T: Scalar>(
    g: &mut Graph<T>,
    qa: Option<Var>,
    dp: Option<(Var, Var)>,
    qa_weight: f64,
    lambda: f64,
) -> Result<Var> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    let mut parts = Vec::new();
    if let Some(q) = qa {
        parts.push(if qa_weight == 1.0 { q } else { g.scale(q, T::from_f64_lossy(qa_weight))? });
    }
    if let Some((l, r)) = dp {
        let d = g.add(l, r)?;
        parts.push(if lambda == 1.0 { d } else { g.scale(d, T::from_f64_lossy(lambda))? });
    }
    match parts.as_slice() {
        [] => Err(Error::invalid("combine", "no loss terms")),
        [one] => Ok(*one),
        [a, b] => g.add(*a, *b),
        _ => unreachable!("at most two parts"),
    }
}
