use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::model::MaskNodes;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Label loss plus a sparsity penalty on the mask.
    Unsupervised,
    /// Label loss plus (optionally class-weighted, optionally selective) rationale supervision.
    #[default]
    Supervised,
}

/// Where the selective-supervision gate comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateSource {
    /// Recomputed each batch with the current predictor.
    #[default]
    PerBatch,
    /// Computed once from the predictor at the start of joint training.
    FrozenOracle,
}

/// How the gate enters the loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateReading {
    /// 1 when the predictor is correct on the human-rationale input, else 0.
    #[default]
    Indicator,
    /// Predicted probability of the true class on the human-rationale input.
    Weight,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub mode: LossMode,
    pub lambda_sp: f64,
    pub lambda_su: f64,
    /// Extra weight on rationale tokens: each gold token counts `1 + lambda_su1` times.
    pub lambda_su1: f64,
    pub selective: bool,
    pub gate_source: GateSource,
    pub gate_reading: GateReading,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::Supervised,
            lambda_sp: 0.25,
            lambda_su: 1.0,
            lambda_su1: 0.0,
            selective: false,
            gate_source: GateSource::PerBatch,
            gate_reading: GateReading::Indicator,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_sp", self.lambda_sp),
            ("lambda_su", self.lambda_su),
            ("lambda_su1", self.lambda_su1),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.mode == LossMode::Unsupervised && self.selective {
            return Err(Error::Config(
                "selective supervision needs supervised mode".into(),
            ));
        }
        Ok(())
    }
}

fn check_len(g: &Graph, node: NodeId, len: usize, op: &'static str) -> Result<()> {
    if g.value(node).len() != len {
        return Err(Error::Shape {
            op,
            lhs: g.shape(node).to_vec(),
            rhs: vec![len],
        });
    }
    Ok(())
}

/// `CE(y, ŷ) + λ_sp · mean_{non-forced} α̂`.
pub fn loss_unsupervised(
    g: &mut Graph,
    logits: NodeId,
    label: usize,
    soft: NodeId,
    forced: &[bool],
    lambda_sp: f64,
) -> Result<NodeId> {
    check_len(g, soft, forced.len(), "loss-unsupervised")?;
    let ce = g.cross_entropy(logits, label)?;
    let free = forced.iter().filter(|&&f| !f).count();
    if lambda_sp == 0.0 || free == 0 {
        return Ok(ce);
    }
    let w = 1.0 / free as f64;
    let weights = g.constant(Tensor::column(
        forced.iter().map(|&f| if f { 0.0 } else { w }).collect(),
    ));
    let masked = g.mul(soft, weights)?;
    let mean = g.sum(masked)?;
    let term = g.scale(mean, lambda_sp)?;
    g.add(ce, term)
}

/// Rationale term `(λ_su / L') · Σ (1 + λ_su¹ α_i) · BCE(α_i, α̂_i)` over non-forced positions,
/// scaled by `gate`. Returns `None` when the term is identically zero.
pub fn rationale_term(
    g: &mut Graph,
    mask: &MaskNodes,
    gold: &[u8],
    forced: &[bool],
    lambda_su: f64,
    lambda_su1: f64,
    gate: f64,
) -> Result<Option<NodeId>> {
    if gold.len() != forced.len() {
        return Err(Error::Shape {
            op: "rationale-loss",
            lhs: vec![gold.len()],
            rhs: vec![forced.len()],
        });
    }
    check_len(g, mask.log_pos, gold.len(), "rationale-loss")?;
    let free = forced.iter().filter(|&&f| !f).count();
    let coef = gate * lambda_su;
    if coef == 0.0 || free == 0 {
        return Ok(None);
    }
    let coef = coef / free as f64;
    let mut pos = Vec::with_capacity(gold.len());
    let mut neg = Vec::with_capacity(gold.len());
    for (&a, &f) in gold.iter().zip(forced) {
        if f {
            pos.push(0.0);
            neg.push(0.0);
            continue;
        }
        let a = f64::from(a);
        let w = (1.0 + lambda_su1 * a) * coef;
        pos.push(-a * w);
        neg.push(-(1.0 - a) * w);
    }
    let pos = g.constant(Tensor::column(pos));
    let neg = g.constant(Tensor::column(neg));
    let a = g.mul(mask.log_pos, pos)?;
    let b = g.mul(mask.log_neg, neg)?;
    let both = g.add(a, b)?;
    Ok(Some(g.sum(both)?))
}

/// `CE(y, ŷ) + gate · rationale_term`; `gate` is 1 unless selective supervision is on.
#[allow(clippy::too_many_arguments)]
pub fn loss_supervised(
    g: &mut Graph,
    logits: NodeId,
    label: usize,
    mask: &MaskNodes,
    gold: &[u8],
    forced: &[bool],
    cfg: &LossConfig,
    gate: Option<f64>,
) -> Result<NodeId> {
    let gate = match (cfg.selective, gate) {
        (true, Some(v)) => v,
        (false, None) => 1.0,
        (true, None) => return Err(Error::invalid("selective supervision needs a gate value")),
        (false, Some(_)) => {
            return Err(Error::invalid(
                "gate value given without selective supervision",
            ))
        }
    };
    let ce = g.cross_entropy(logits, label)?;
    match rationale_term(g, mask, gold, forced, cfg.lambda_su, cfg.lambda_su1, gate)? {
        Some(term) => g.add(ce, term),
        None => Ok(ce),
    }
}
