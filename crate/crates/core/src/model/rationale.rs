//! Extractor `g` and predictor `f` sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Granularity, MaskingMode, ModelConfig};
use super::encoder::{Encoder, Linear};
use super::masking::{
    aggregate_sentences, enforce_special, gumbel_mask, mask_importance, mask_substitute,
    straight_through, GumbelNoise, MaskNodes,
};
use crate::autodiff::{Checkpoint, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::data::{TokenizedInstance, MASK};
use crate::error::{Error, Result};

/// How redacted tokens are hidden from the predictor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Probe {
    /// Delete redacted tokens, producing a shorter sequence.
    Removal,
    /// Keep the length and apply the model's masking function with a hard mask.
    #[default]
    Substitution,
}

impl Probe {
    pub fn name(self) -> &'static str {
        match self {
            Probe::Removal => "removal",
            Probe::Substitution => "substitution",
        }
    }
}

/// Everything a checkpoint needs to rebuild the model skeleton.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub num_classes: usize,
}

/// Output of one joint forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// Predictor logits `[1, K]`.
    pub logits: NodeId,
    /// Soft mask after special-token enforcement, plus log terms for the rationale loss.
    pub mask: MaskNodes,
}

#[derive(Clone, Debug)]
pub struct RationaleModel {
    pub meta: ModelMeta,
    pub store: ParamStore,
    extractor: Encoder,
    extractor_head: Linear,
    predictor: Encoder,
    predictor_head: Linear,
    importance_rationale: ParamId,
    importance_non_rationale: ParamId,
}

impl RationaleModel {
    pub fn new(config: ModelConfig, vocab_size: usize, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        if vocab_size <= MASK {
            return Err(Error::invalid("vocabulary lacks reserved tokens"));
        }
        if !(config.temperature > 0.0) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {}",
                config.temperature
            )));
        }
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.init_seed);
        let mut store = ParamStore::new();
        let extractor = Encoder::new(
            &mut store,
            "extractor",
            vocab_size,
            c.d_model,
            c.heads,
            c.layers,
            c.d_ff,
            c.max_seq_len,
            &mut rng,
        )?;
        let extractor_head = Linear::new(&mut store, "extractor.head", c.d_model, 2, &mut rng)?;
        let predictor = Encoder::new(
            &mut store,
            "predictor",
            vocab_size,
            c.d_model,
            c.heads,
            c.layers,
            c.d_ff,
            c.max_seq_len,
            &mut rng,
        )?;
        let predictor_head = Linear::new(
            &mut store,
            "predictor.head",
            c.d_model,
            num_classes,
            &mut rng,
        )?;
        let importance_rationale =
            store.add_uniform("importance.rationale", &[1, c.d_model], 0.1, &mut rng)?;
        let importance_non_rationale =
            store.add_uniform("importance.non_rationale", &[1, c.d_model], 0.1, &mut rng)?;
        Ok(Self {
            meta: ModelMeta {
                config,
                vocab_size,
                num_classes,
            },
            store,
            extractor,
            extractor_head,
            predictor,
            predictor_head,
            importance_rationale,
            importance_non_rationale,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.meta.config
    }

    pub fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    pub fn extractor_head(&self) -> &Linear {
        &self.extractor_head
    }

    pub fn predictor_head(&self) -> &Linear {
        &self.predictor_head
    }

    /// Parameters belonging to the predictor side (encoder, head, importance tags).
    pub fn predictor_params(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, name, _)| {
                name.starts_with("predictor.") || name.starts_with("importance.")
            })
            .map(|(id, _, _)| id)
            .collect()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_store(&self.store);
        ck.model_config = Some(serde_json::to_value(&self.meta)?);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: ModelMeta = match &ck.model_config {
            Some(v) => serde_json::from_value(v.clone())?,
            None => return Err(Error::Config("checkpoint has no model config".into())),
        };
        let mut model = Self::new(meta.config, meta.vocab_size, meta.num_classes)?;
        ck.load_into(&mut model.store)?;
        Ok(model)
    }

    /// Per-token logit pairs `[L, 2]` from the extractor.
    pub fn extract_logits(&self, g: &mut Graph, tokens: &[usize]) -> Result<NodeId> {
        let e = self.extractor.embed(g, &self.store, tokens)?;
        let h = self.extractor.encode(g, &self.store, e)?;
        self.extractor_head.forward(g, &self.store, h)
    }

    /// Extractor logits, sentence-averaged when the model works at sentence level.
    pub fn mask_logits(&self, g: &mut Graph, inst: &TokenizedInstance) -> Result<NodeId> {
        let z = self.extract_logits(g, &inst.tokens)?;
        match self.meta.config.granularity {
            Granularity::Token => Ok(z),
            Granularity::Sentence => aggregate_sentences(g, z, &inst.sentence_ids),
        }
    }

    /// Extractor → Gumbel mask → enforcement → masked predictor.
    pub fn forward(
        &self,
        g: &mut Graph,
        inst: &TokenizedInstance,
        noise: GumbelNoise<'_>,
    ) -> Result<Forward> {
        let z = self.mask_logits(g, inst)?;
        let m = gumbel_mask(g, z, self.meta.config.temperature, noise)?;
        let soft = enforce_special(g, m.soft, &inst.forced())?;
        let fed = if self.meta.config.straight_through {
            straight_through(g, soft)?
        } else {
            soft
        };
        let logits = self.predict_logits(g, &inst.tokens, Some(fed))?;
        Ok(Forward {
            logits,
            mask: MaskNodes { soft, ..m },
        })
    }

    /// Predictor logits `[1, K]` read at the `[CLS]` position. `mask` is an `[L, 1]` node;
    /// `None` means the full, untouched input.
    pub fn predict_logits(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        mask: Option<NodeId>,
    ) -> Result<NodeId> {
        let e = self.predictor.embed(g, &self.store, tokens)?;
        let inputs = match mask {
            None => e,
            Some(mask) => match self.meta.config.masking {
                MaskingMode::Substitute => {
                    let table = g.param(&self.store, self.predictor.token_embedding);
                    let e_mask = g.embedding(table, &[MASK])?;
                    mask_substitute(g, e, mask, e_mask)?
                }
                MaskingMode::Importance => {
                    let rat = g.param(&self.store, self.importance_rationale);
                    let non = g.param(&self.store, self.importance_non_rationale);
                    mask_importance(g, e, mask, rat, non)?
                }
            },
        };
        let h = self.predictor.encode(g, &self.store, inputs)?;
        let cls = g.slice(h, 0, 0, 1)?;
        self.predictor_head.forward(g, &self.store, cls)
    }

    /// Predictor logits for a fixed keep-mask under the given probe.
    pub fn predict_redacted(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        keep: &[u8],
        probe: Probe,
    ) -> Result<NodeId> {
        if keep.len() != tokens.len() {
            return Err(Error::Shape {
                op: "predict-redacted",
                lhs: vec![tokens.len()],
                rhs: vec![keep.len()],
            });
        }
        match probe {
            Probe::Substitution => {
                if keep.iter().all(|&k| k == 1)
                    && self.meta.config.masking == MaskingMode::Substitute
                {
                    return self.predict_logits(g, tokens, None);
                }
                let m = g.constant(Tensor::column(keep.iter().map(|&k| f64::from(k)).collect()));
                self.predict_logits(g, tokens, Some(m))
            }
            Probe::Removal => {
                let kept: Vec<usize> = tokens
                    .iter()
                    .zip(keep)
                    .filter(|(_, &k)| k == 1)
                    .map(|(&t, _)| t)
                    .collect();
                match self.meta.config.masking {
                    MaskingMode::Substitute => self.predict_logits(g, &kept, None),
                    MaskingMode::Importance => {
                        let ones = g.constant(Tensor::column(vec![1.0; kept.len()]));
                        self.predict_logits(g, &kept, Some(ones))
                    }
                }
            }
        }
    }

    /// Class probabilities on a redacted input.
    pub fn predict_proba(&self, tokens: &[usize], keep: &[u8], probe: Probe) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let logits = self.predict_redacted(&mut g, tokens, keep, probe)?;
        let p = g.softmax(logits)?;
        Ok(g.value(p).data().to_vec())
    }

    pub fn predict_label(&self, tokens: &[usize], keep: &[u8], probe: Probe) -> Result<usize> {
        Ok(argmax(&self.predict_proba(tokens, keep, probe)?))
    }

    /// Deterministic evaluation pass: zero Gumbel noise, returns (soft mask, probabilities).
    pub fn infer(&self, inst: &TokenizedInstance) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, inst, GumbelNoise::Zero)?;
        let p = g.softmax(fwd.logits)?;
        Ok((
            g.value(fwd.mask.soft).data().to_vec(),
            g.value(p).data().to_vec(),
        ))
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
