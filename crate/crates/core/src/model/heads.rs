use rand::Rng;

use crate::corpus::{Head, NUM_RELATIONS};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Output layers on top of the encoder: span start/end projections, the
/// shared pairwise link scorer with its learned root vector, and the
/// relation classifier.
#[derive(Clone, Debug)]
pub struct Heads {
    hidden: usize,
    dp_dropout: f64,
    pub(crate) w_start: ParamId,
    pub(crate) w_end: ParamId,
    pub(crate) w_link: ParamId,
    pub(crate) b_link: ParamId,
    pub(crate) e_root: ParamId,
    pub(crate) w_rel: ParamId,
    pub(crate) b_rel: ParamId,
}

/// Cascade features `F[i, j]` for every dependent `i` and candidate
/// `j ∈ {root, 0, .., i-1}`, stored row-wise in the order given by
/// [`PairTable::row`].
#[derive(Clone, Debug)]
pub struct PairTable {
    pub features: Var,
    pub count: usize,
}

impl PairTable {
    pub fn rows(&self) -> usize {
        self.count * (self.count + 1) / 2
    }

    /// Row of `F[dependent, head]`; `None` unless `head` precedes `dependent`.
    pub fn row(&self, dependent: usize, head: Head) -> Option<usize> {
        if dependent >= self.count || head.slot() > dependent {
            return None;
        }
        Some(dependent * (dependent + 1) / 2 + head.slot())
    }
}

/// Names of all head parameters start with this prefix.
pub const HEAD_PREFIX: &str = "heads.";

impl Heads {
    pub fn new<T: Scalar, R: Rng>(
        hidden: usize,
        dp_dropout: f64,
        init_std: f64,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("hidden size must be positive".into()));
        }
        if !(0.0..1.0).contains(&dp_dropout) {
            return Err(Error::Config(format!("dp_dropout {dp_dropout} outside [0, 1)")));
        }
        let heads = Self {
            hidden,
            dp_dropout,
            w_start: store.add_normal("heads.start.weight", hidden, 1, init_std, rng),
            w_end: store.add_normal("heads.end.weight", hidden, 1, init_std, rng),
            w_link: store.add_normal("heads.link.weight", 4 * hidden, 1, init_std, rng),
            b_link: store.add_full("heads.link.bias", 1, 1, 0.0),
            e_root: store.add_normal("heads.root_embedding", 1, hidden, init_std, rng),
            w_rel: store.add_normal("heads.relation.weight", 4 * hidden, NUM_RELATIONS, init_std, rng),
            b_rel: store.add_full("heads.relation.bias", 1, NUM_RELATIONS, 0.0),
        };
        heads.check_shapes(store)?;
        Ok(heads)
    }

    /// Verifies every head block against the `(h, 4h)` layout.
    pub fn check_shapes<T: Scalar>(&self, store: &ParamStore<T>) -> Result<()> {
        let h = self.hidden;
        let expected = [
            (self.w_start, [h, 1]),
            (self.w_end, [h, 1]),
            (self.w_link, [4 * h, 1]),
            (self.b_link, [1, 1]),
            (self.e_root, [1, h]),
            (self.w_rel, [4 * h, NUM_RELATIONS]),
            (self.b_rel, [1, NUM_RELATIONS]),
        ];
        for (id, shape) in expected {
            let got = store.get(id).shape();
            if got != shape {
                return Err(Error::ShapeMismatch {
                    op: "heads",
                    left: shape.to_vec(),
                    right: got.to_vec(),
                });
            }
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn dp_dropout(&self) -> f64 {
        self.dp_dropout
    }

    /// Start and end logits as `1×L` rows, with `-inf` wherever
    /// `span_mask` is false.
    pub fn qa_logits<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, states: Var, span_mask: &[bool]) -> Result<(Var, Var)> {
        let (len, _) = g.value(states).dims2()?;
        if span_mask.len() != len {
            return Err(Error::ShapeMismatch {
                op: "qa_logits",
                left: vec![len],
                right: vec![span_mask.len()],
            });
        }
        let valid: Vec<usize> = (0..len).filter(|&i| span_mask[i]).collect();
        if valid.is_empty() {
            return Err(Error::AllMasked { row: 0 });
        }
        let rows = g.gather_rows(states, &valid)?;
        let mut out = [states; 2];
        for (slot, w) in out.iter_mut().zip([self.w_start, self.w_end]) {
            let scores = g.matmul(rows, p.var(w))?;
            *slot = g.scatter(scores, 1, len, &valid, T::neg_infinity())?;
        }
        Ok((out[0], out[1]))
    }

    /// Separator vectors `E` (T×h) read from the encoder states.
    pub fn separator_vectors<T: Scalar>(&self, g: &mut Graph<T>, states: Var, sep_positions: &[usize]) -> Result<Var> {
        if sep_positions.is_empty() {
            return Err(Error::invalid("separator_vectors", "dialogue has no utterances"));
        }
        g.gather_rows(states, sep_positions)
    }

    /// Builds the pair table from separator vectors `seps` (T×h), with the
    /// learned root vector standing in for candidate `root`. DP dropout is
    /// applied to the features when `train` is set.
    pub fn pair_features<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, seps: Var, train: bool) -> Result<PairTable> {
        let (count, h) = g.value(seps).dims2()?;
        if h != self.hidden {
            return Err(Error::ShapeMismatch {
                op: "pair_features",
                left: vec![count, self.hidden],
                right: vec![count, h],
            });
        }
        // Row 0 is the root, row j + 1 utterance j.
        let nodes = g.concat_rows(&[p.var(self.e_root), seps])?;
        let mut deps = Vec::with_capacity(count * (count + 1) / 2);
        let mut cands = Vec::with_capacity(deps.capacity());
        for i in 0..count {
            for slot in 0..=i {
                deps.push(i + 1);
                cands.push(slot);
            }
        }
        let ei = g.gather_rows(nodes, &deps)?;
        let ej = g.gather_rows(nodes, &cands)?;
        let f = cascade(g, ei, ej)?;
        let features = g.dropout(f, self.dp_dropout, train)?;
        Ok(PairTable { features, count })
    }

    /// Link logits as a `T×(T+1)` matrix: row `i`, column `head.slot()`.
    /// Candidates at or after the dependent hold `-inf`.
    pub fn link_logits<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, table: &PairTable) -> Result<Var> {
        let scores = g.matmul(table.features, p.var(self.w_link))?;
        let scores = g.add_row(scores, p.var(self.b_link))?;
        let t = table.count;
        let positions: Vec<usize> = (0..t).flat_map(|i| (0..=i).map(move |slot| i * (t + 1) + slot)).collect();
        g.scatter(scores, t, t + 1, &positions, T::neg_infinity())
    }

    /// Relation logits (R×16) for the given `(dependent, head)` pairs.
    pub fn relation_logits<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        table: &PairTable,
        pairs: &[(usize, Head)],
    ) -> Result<Var> {
        let mut rows = Vec::with_capacity(pairs.len());
        for &(dep, head) in pairs {
            if head == Head::Root {
                return Err(Error::RootRelation);
            }
            rows.push(table.row(dep, head).ok_or_else(|| {
                Error::invalid("relation_logits", format!("head {head:?} does not precede utterance {dep}"))
            })?);
        }
        if rows.is_empty() {
            return Err(Error::invalid("relation_logits", "no pairs given"));
        }
        let f = g.gather_rows(table.features, &rows)?;
        let y = g.matmul(f, p.var(self.w_rel))?;
        g.add_row(y, p.var(self.b_rel))
    }
}

/// Row-wise `[a, b, a - b, a ⊙ b]`.
pub fn cascade<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let diff = g.sub(a, b)?;
    let prod = g.mul(a, b)?;
    g.concat_cols(&[a, b, diff, prod])
}
