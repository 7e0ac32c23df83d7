use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Activation, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_attention_heads: usize,
    pub feedforward_size: usize,
    pub max_positions: usize,
    pub type_vocab_size: usize,
    pub attention_dropout: f64,
    pub residual_dropout: f64,
    pub activation: Activation,
    pub layer_norm_eps: f64,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            hidden_size: 64,
            num_layers: 2,
            num_attention_heads: 4,
            feedforward_size: 256,
            max_positions: 512,
            type_vocab_size: 2,
            attention_dropout: 0.1,
            residual_dropout: 0.1,
            activation: Activation::Gelu,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden_size", self.hidden_size),
            ("num_attention_heads", self.num_attention_heads),
            ("feedforward_size", self.feedforward_size),
            ("max_positions", self.max_positions),
            ("type_vocab_size", self.type_vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.hidden_size.is_multiple_of(self.num_attention_heads) {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by num_attention_heads {}",
                self.hidden_size, self.num_attention_heads
            )));
        }
        for (name, p) in [
            ("attention_dropout", self.attention_dropout),
            ("residual_dropout", self.residual_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1)")));
            }
        }
        if self.layer_norm_eps.is_nan() || self.layer_norm_eps <= 0.0 || self.init_std.is_nan() || self.init_std <= 0.0 {
            return Err(Error::Config("layer_norm_eps and init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_attention_heads
    }
}

#[derive(Clone, Debug)]
struct Layer {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// Encoder output `S` (L×h) plus the attention probabilities of every
/// layer and head, layer-major.
#[derive(Clone, Debug)]
pub struct SequenceRepresentation {
    pub states: Var,
    pub attention_mask: Vec<bool>,
    pub attention: Vec<Var>,
}

/// Post-norm transformer encoder with learned absolute positions.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    token_emb: ParamId,
    position_emb: ParamId,
    segment_emb: ParamId,
    emb_ln_g: ParamId,
    emb_ln_b: ParamId,
    layers: Vec<Layer>,
}

impl Encoder {
    /// Registers all encoder parameters in `store`, drawing weights from
    /// N(0, init_std²); biases start at zero and layer-norm gains at one.
    pub fn new<T: Scalar, R: Rng>(config: EncoderConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (h, ff, std) = (config.hidden_size, config.feedforward_size, config.init_std);
        let token_emb = store.add_normal("encoder.token_embedding", config.vocab_size, h, std, rng);
        let position_emb = store.add_normal("encoder.position_embedding", config.max_positions, h, std, rng);
        let segment_emb = store.add_normal("encoder.segment_embedding", config.type_vocab_size, h, std, rng);
        let emb_ln_g = store.add_full("encoder.embedding_norm.gain", 1, h, 1.0);
        let emb_ln_b = store.add_full("encoder.embedding_norm.bias", 1, h, 0.0);
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = |s: &str| format!("encoder.layer{l}.{s}");
            layers.push(Layer {
                wq: store.add_normal(p("query.weight"), h, h, std, rng),
                bq: store.add_full(p("query.bias"), 1, h, 0.0),
                wk: store.add_normal(p("key.weight"), h, h, std, rng),
                bk: store.add_full(p("key.bias"), 1, h, 0.0),
                wv: store.add_normal(p("value.weight"), h, h, std, rng),
                bv: store.add_full(p("value.bias"), 1, h, 0.0),
                wo: store.add_normal(p("output.weight"), h, h, std, rng),
                bo: store.add_full(p("output.bias"), 1, h, 0.0),
                ln1_g: store.add_full(p("attention_norm.gain"), 1, h, 1.0),
                ln1_b: store.add_full(p("attention_norm.bias"), 1, h, 0.0),
                w1: store.add_normal(p("ff_in.weight"), h, ff, std, rng),
                b1: store.add_full(p("ff_in.bias"), 1, ff, 0.0),
                w2: store.add_normal(p("ff_out.weight"), ff, h, std, rng),
                b2: store.add_full(p("ff_out.bias"), 1, h, 0.0),
                ln2_g: store.add_full(p("ff_norm.gain"), 1, h, 1.0),
                ln2_b: store.add_full(p("ff_norm.bias"), 1, h, 0.0),
            });
        }
        Ok(Self {
            config,
            token_emb,
            position_emb,
            segment_emb,
            emb_ln_g,
            emb_ln_b,
            layers,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Token + position + segment embeddings, layer-normalized, then dropout.
    pub fn embed<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        token_ids: &[usize],
        segment_ids: &[usize],
        positions: &[usize],
        train: bool,
    ) -> Result<Var> {
        if token_ids.is_empty() || segment_ids.len() != token_ids.len() || positions.len() != token_ids.len() {
            return Err(Error::invalid(
                "embed",
                format!(
                    "token/segment/position lengths {}/{}/{} must be equal and non-zero",
                    token_ids.len(),
                    segment_ids.len(),
                    positions.len()
                ),
            ));
        }
        let c = &self.config;
        for (table, ids, size) in [
            ("token embedding", token_ids, c.vocab_size),
            ("segment embedding", segment_ids, c.type_vocab_size),
            ("position embedding", positions, c.max_positions),
        ] {
            if let Some(&id) = ids.iter().find(|&&id| id >= size) {
                return Err(Error::IdOutOfRange { table, id, size });
            }
        }
        let tok = g.gather_rows(p.var(self.token_emb), token_ids)?;
        let pos = g.gather_rows(p.var(self.position_emb), positions)?;
        let seg = g.gather_rows(p.var(self.segment_emb), segment_ids)?;
        let sum = g.add(tok, pos)?;
        let sum = g.add(sum, seg)?;
        let eps = T::from_f64_lossy(c.layer_norm_eps);
        let x = g.layer_norm(sum, p.var(self.emb_ln_g), p.var(self.emb_ln_b), eps)?;
        g.dropout(x, c.residual_dropout, train)
    }

    /// Runs every block over `embedded` (L×h). Keys with `attention_mask`
    /// false are excluded from every softmax.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        embedded: Var,
        attention_mask: &[bool],
        train: bool,
    ) -> Result<SequenceRepresentation> {
        let c = &self.config;
        let (len, h) = g.value(embedded).dims2()?;
        if h != c.hidden_size || attention_mask.len() != len {
            return Err(Error::ShapeMismatch {
                op: "encode",
                left: vec![len, h],
                right: vec![attention_mask.len(), c.hidden_size],
            });
        }
        let eps = T::from_f64_lossy(c.layer_norm_eps);
        let d = c.head_dim();
        let inv_sqrt_d = T::from_f64_lossy(1.0 / (d as f64).sqrt());
        let mut x = embedded;
        let mut attention = Vec::with_capacity(c.num_layers * c.num_attention_heads);
        for (l, w) in self.layers.iter().enumerate() {
            let q = affine(g, p, x, w.wq, w.bq)?;
            let k = affine(g, p, x, w.wk, w.bk)?;
            let v = affine(g, p, x, w.wv, w.bv)?;
            let mut heads = Vec::with_capacity(c.num_attention_heads);
            for a in 0..c.num_attention_heads {
                let qa = g.slice_cols(q, a * d, d)?;
                let ka = g.slice_cols(k, a * d, d)?;
                let va = g.slice_cols(v, a * d, d)?;
                let kt = g.transpose(ka)?;
                let scores = g.matmul(qa, kt)?;
                let scores = g.scale(scores, inv_sqrt_d)?;
                let probs = g.softmax_rows(scores, Some(attention_mask))?;
                attention.push(probs);
                let probs = g.dropout(probs, c.attention_dropout, train)?;
                heads.push(g.matmul(probs, va)?);
            }
            let ctx = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
            let attn_out = affine(g, p, ctx, w.wo, w.bo)?;
            let attn_out = g.dropout(attn_out, c.residual_dropout, train)?;
            let res = g.add(x, attn_out)?;
            let x1 = g.layer_norm(res, p.var(w.ln1_g), p.var(w.ln1_b), eps)?;

            let hidden = affine(g, p, x1, w.w1, w.b1)?;
            let hidden = g.activation(hidden, c.activation)?;
            let ff_out = affine(g, p, hidden, w.w2, w.b2)?;
            let ff_out = g.dropout(ff_out, c.residual_dropout, train)?;
            let res = g.add(x1, ff_out)?;
            x = g.layer_norm(res, p.var(w.ln2_g), p.var(w.ln2_b), eps)?;
            if !g.value(x).is_finite() {
                return Err(Error::NonFinite(format!("encoder layer {l} output")));
            }
        }
        Ok(SequenceRepresentation {
            states: x,
            attention_mask: attention_mask.to_vec(),
            attention,
        })
    }

    /// `embed` followed by `encode` with positions `0..L`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        token_ids: &[usize],
        segment_ids: &[usize],
        attention_mask: &[bool],
        train: bool,
    ) -> Result<SequenceRepresentation> {
        let positions: Vec<usize> = (0..token_ids.len()).collect();
        let x = self.embed(g, p, token_ids, segment_ids, &positions, train)?;
        self.encode(g, p, x, attention_mask, train)
    }
}

fn affine<T: Scalar>(g: &mut Graph<T>, p: &Bound, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let y = g.matmul(x, p.var(w))?;
    g.add_row(y, p.var(b))
}

/// Sets every parameter of `store` whose name starts with `prefix` to `value`.
pub fn fill_prefix<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, value: f64) {
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.name(id).starts_with(prefix)).collect();
    for id in ids {
        let t = store.get_mut(id);
        let shape = t.shape().to_vec();
        *t = Tensor::full(&shape, T::from_f64_lossy(value));
    }
}
