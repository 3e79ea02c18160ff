//! Small post-norm transformer encoder built on the autodiff graph.

use rand::Rng;

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
struct Layer {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

/// Token and position embeddings followed by self-attention blocks.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub token_embedding: ParamId,
    position_embedding: ParamId,
    layers: Vec<Layer>,
    heads: usize,
    d_model: usize,
    vocab_size: usize,
    max_seq_len: usize,
}

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        vocab_size: usize,
        d_model: usize,
        heads: usize,
        layers: usize,
        d_ff: usize,
        max_seq_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {d_model} must be divisible by heads {heads}"
            )));
        }
        let d = d_model;
        let token_embedding = store.add_uniform(
            format!("{prefix}.token_embedding"),
            &[vocab_size, d],
            0.5,
            rng,
        )?;
        let position_embedding = store.add_uniform(
            format!("{prefix}.position_embedding"),
            &[max_seq_len, d],
            0.1,
            rng,
        )?;
        let mut blocks = Vec::with_capacity(layers);
        for l in 0..layers {
            let p = |n: &str| format!("{prefix}.layer{l}.{n}");
            let ones = Tensor::filled(&[d], 1.0);
            let zeros = Tensor::zeros(&[d]);
            blocks.push(Layer {
                wq: store.add_uniform(p("wq"), &[d, d], glorot(d, d), rng)?,
                wk: store.add_uniform(p("wk"), &[d, d], glorot(d, d), rng)?,
                wv: store.add_uniform(p("wv"), &[d, d], glorot(d, d), rng)?,
                wo: store.add_uniform(p("wo"), &[d, d], glorot(d, d), rng)?,
                ln1_gain: store.add(p("ln1_gain"), ones.clone())?,
                ln1_bias: store.add(p("ln1_bias"), zeros.clone())?,
                ff1_w: store.add_uniform(p("ff1_w"), &[d, d_ff], glorot(d, d_ff), rng)?,
                ff1_b: store.add(p("ff1_b"), Tensor::zeros(&[d_ff]))?,
                ff2_w: store.add_uniform(p("ff2_w"), &[d_ff, d], glorot(d_ff, d), rng)?,
                ff2_b: store.add(p("ff2_b"), zeros.clone())?,
                ln2_gain: store.add(p("ln2_gain"), ones)?,
                ln2_bias: store.add(p("ln2_bias"), zeros)?,
            });
        }
        Ok(Self {
            token_embedding,
            position_embedding,
            layers: blocks,
            heads,
            d_model,
            vocab_size,
            max_seq_len,
        })
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if tokens.len() > self.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence of {} tokens exceeds max length {}",
                tokens.len(),
                self.max_seq_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {t} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Token embeddings `[L, d]` for `tokens`.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, tokens: &[usize]) -> Result<NodeId> {
        self.check_tokens(tokens)?;
        let table = g.param(store, self.token_embedding);
        g.embedding(table, tokens)
    }

    /// Runs the encoder over already-embedded (possibly masked) inputs `[L, d]`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, inputs: NodeId) -> Result<NodeId> {
        let (len, d) = g.value(inputs).dims2();
        if d != self.d_model {
            return Err(Error::Shape {
                op: "encoder-input",
                lhs: vec![len, d],
                rhs: vec![len, self.d_model],
            });
        }
        if len > self.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence of {len} tokens exceeds max length {}",
                self.max_seq_len
            )));
        }
        let pos_table = g.param(store, self.position_embedding);
        let positions: Vec<usize> = (0..len).collect();
        let pos = g.embedding(pos_table, &positions)?;
        let mut x = g.add(inputs, pos)?;
        for layer in &self.layers {
            x = self.block(g, store, layer, x)?;
        }
        Ok(x)
    }

    fn block(&self, g: &mut Graph, store: &ParamStore, l: &Layer, x: NodeId) -> Result<NodeId> {
        let wq = g.param(store, l.wq);
        let wk = g.param(store, l.wk);
        let wv = g.param(store, l.wv);
        let wo = g.param(store, l.wo);
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let dh = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice(q, 1, s, e)?,
                    g.slice(k, 1, s, e)?,
                    g.slice(v, 1, s, e)?,
                )
            };
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax(scores)?;
            heads.push(g.matmul(attn, vh)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat(&heads, 1)?
        };
        let attn_out = g.matmul(merged, wo)?;
        let res = g.add(x, attn_out)?;
        let (g1, b1) = (g.param(store, l.ln1_gain), g.param(store, l.ln1_bias));
        let h = g.layer_norm(res, g1, b1, LN_EPS)?;

        let (w1, c1) = (g.param(store, l.ff1_w), g.param(store, l.ff1_b));
        let (w2, c2) = (g.param(store, l.ff2_w), g.param(store, l.ff2_b));
        let f = g.matmul(h, w1)?;
        let f = g.add(f, c1)?;
        let f = g.relu(f)?;
        let f = g.matmul(f, w2)?;
        let f = g.add(f, c2)?;
        let res = g.add(h, f)?;
        let (g2, b2) = (g.param(store, l.ln2_gain), g.param(store, l.ln2_bias));
        g.layer_norm(res, g2, b2, LN_EPS)
    }
}

/// Linear map `[L, d] -> [L, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add_uniform(
                format!("{prefix}.weight"),
                &[d_in, d_out],
                glorot(d_in, d_out),
                rng,
            )?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d_out]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}
