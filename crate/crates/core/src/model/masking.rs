//! Mask generation and the two ways of applying a mask to input embeddings.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::Granularity;
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Source of the Gumbel(0, 1) perturbation added to extractor logits.
pub enum GumbelNoise<'a> {
    /// No perturbation; used for evaluation and gradient checks.
    Zero,
    /// Pre-drawn pairs, one per position.
    Fixed(&'a [[f64; 2]]),
    Sample(&'a mut ChaCha8Rng),
}

impl GumbelNoise<'_> {
    /// Flat `[L * 2]` noise, or `None` for zero noise.
    fn draw(&mut self, len: usize) -> Result<Option<Vec<f64>>> {
        match self {
            GumbelNoise::Zero => Ok(None),
            GumbelNoise::Fixed(pairs) => {
                if pairs.len() != len {
                    return Err(Error::invalid(format!(
                        "fixed noise has {} positions, logits have {len}",
                        pairs.len()
                    )));
                }
                Ok(Some(pairs.iter().flat_map(|p| *p).collect()))
            }
            GumbelNoise::Sample(rng) => {
                Ok(Some((0..2 * len).map(|_| sample_gumbel(rng)).collect()))
            }
        }
    }
}

/// One draw from Gumbel(0, 1).
pub fn sample_gumbel<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Graph nodes for a per-token mask, each `[L, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct MaskNodes {
    /// Soft mask value α̂ (positive-class probability).
    pub soft: NodeId,
    /// `ln α̂`, computed stably from logits.
    pub log_pos: NodeId,
    /// `ln (1 - α̂)`.
    pub log_neg: NodeId,
}

/// `c_i = softmax((z_i + G_i) / τ)`, `α̂_i = c_i¹` for logits `z` of shape `[L, 2]`.
pub fn gumbel_mask(
    g: &mut Graph,
    logits: NodeId,
    temperature: f64,
    mut noise: GumbelNoise<'_>,
) -> Result<MaskNodes> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!(
            "Gumbel temperature must be positive, got {temperature}"
        )));
    }
    let (len, two) = g.value(logits).dims2();
    if two != 2 {
        return Err(Error::Shape {
            op: "gumbel-mask",
            lhs: g.shape(logits).to_vec(),
            rhs: vec![len, 2],
        });
    }
    let mut y = logits;
    if let Some(n) = noise.draw(len)? {
        let n = g.constant(Tensor::matrix(len, 2, n)?);
        y = g.add(y, n)?;
    }
    if temperature != 1.0 {
        y = g.scale(y, 1.0 / temperature)?;
    }
    let c = g.softmax(y)?;
    let ls = g.log_softmax(y)?;
    Ok(MaskNodes {
        soft: g.slice(c, 1, 1, 2)?,
        log_pos: g.slice(ls, 1, 1, 2)?,
        log_neg: g.slice(ls, 1, 0, 1)?,
    })
}

/// Replaces each token's logits by the mean over its sentence.
pub fn aggregate_sentences(
    g: &mut Graph,
    logits: NodeId,
    sentence_ids: &[usize],
) -> Result<NodeId> {
    let len = sentence_ids.len();
    if g.value(logits).dims2().0 != len {
        return Err(Error::Shape {
            op: "aggregate-sentences",
            lhs: g.shape(logits).to_vec(),
            rhs: vec![len],
        });
    }
    let avg = Tensor::matrix(len, len, sentence_average_matrix(sentence_ids))?;
    let avg = g.constant(avg);
    g.matmul(avg, logits)
}

fn sentence_average_matrix(sentence_ids: &[usize]) -> Vec<f64> {
    let len = sentence_ids.len();
    let mut m = vec![0.0; len * len];
    for i in 0..len {
        let members: Vec<usize> = (0..len)
            .filter(|&j| sentence_ids[j] == sentence_ids[i])
            .collect();
        let w = 1.0 / members.len() as f64;
        for j in members {
            m[i * len + j] = w;
        }
    }
    m
}

/// Sets forced positions to exactly 1. No gradient reaches the soft mask there.
pub fn enforce_special(g: &mut Graph, soft: NodeId, forced: &[bool]) -> Result<NodeId> {
    if !forced.iter().any(|&f| f) {
        return Ok(soft);
    }
    let keep = g.constant(Tensor::column(
        forced.iter().map(|&f| if f { 0.0 } else { 1.0 }).collect(),
    ));
    let set = g.constant(Tensor::column(
        forced.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect(),
    ));
    let kept = g.mul(soft, keep)?;
    g.add(kept, set)
}

/// Straight-through: forward value is the 0.5-thresholded mask, gradient is the soft one.
pub fn straight_through(g: &mut Graph, soft: NodeId) -> Result<NodeId> {
    let offset: Vec<f64> = g
        .value(soft)
        .data()
        .iter()
        .map(|&s| if s >= 0.5 { 1.0 - s } else { -s })
        .collect();
    let offset = g.constant(Tensor::column(offset));
    g.add(soft, offset)
}

fn check_mask(g: &Graph, emb: NodeId, mask: NodeId, op: &'static str) -> Result<()> {
    let (len, _) = g.value(emb).dims2();
    if g.value(mask).len() != len {
        return Err(Error::Shape {
            op,
            lhs: g.shape(emb).to_vec(),
            rhs: g.shape(mask).to_vec(),
        });
    }
    const TOL: f64 = 1e-9;
    if let Some(v) = g
        .value(mask)
        .data()
        .iter()
        .find(|v| !(-TOL..=1.0 + TOL).contains(*v))
    {
        return Err(Error::invalid(format!(
            "{op}: mask value {v} outside [0, 1]"
        )));
    }
    Ok(())
}

/// `α̂_i · e_i + (1 − α̂_i) · e_[MASK]`.
pub fn mask_substitute(
    g: &mut Graph,
    emb: NodeId,
    mask: NodeId,
    mask_embedding: NodeId,
) -> Result<NodeId> {
    check_mask(g, emb, mask, "mask-substitute")?;
    let kept = g.mul(emb, mask)?;
    let inv = g.affine(mask, -1.0, 1.0)?;
    let fill = g.matmul(inv, mask_embedding)?;
    g.add(kept, fill)
}

/// `e_i + (1 − α̂_i) · e_non-rationale + α̂_i · e_rationale`.
pub fn mask_importance(
    g: &mut Graph,
    emb: NodeId,
    mask: NodeId,
    rationale_tag: NodeId,
    non_rationale_tag: NodeId,
) -> Result<NodeId> {
    check_mask(g, emb, mask, "mask-importance")?;
    let inv = g.affine(mask, -1.0, 1.0)?;
    let non = g.matmul(inv, non_rationale_tag)?;
    let rat = g.matmul(mask, rationale_tag)?;
    let out = g.add(emb, non)?;
    g.add(out, rat)
}

/// A materialised per-token mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RationaleMask {
    pub soft: Vec<f64>,
    pub hard: Vec<u8>,
    pub granularity: Granularity,
}

impl RationaleMask {
    pub fn from_soft(soft: Vec<f64>, granularity: Granularity) -> Self {
        let hard = soft.iter().map(|&s| u8::from(s >= 0.5)).collect();
        Self {
            soft,
            hard,
            granularity,
        }
    }

    pub fn from_node(g: &Graph, node: NodeId, granularity: Granularity) -> Self {
        Self::from_soft(g.value(node).data().to_vec(), granularity)
    }

    pub fn len(&self) -> usize {
        self.soft.len()
    }

    pub fn is_empty(&self) -> bool {
        self.soft.is_empty()
    }

    pub fn enforce_special(&mut self, special_positions: &[usize], query_span: Range<usize>) {
        for p in special_positions.iter().copied().chain(query_span) {
            self.soft[p] = 1.0;
            self.hard[p] = 1;
        }
    }
}
