use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{
    loss_supervised, loss_unsupervised, GateReading, GateSource, LossConfig, LossMode,
};
use crate::autodiff::{Adam, AdamConfig, Graph, NodeId};
use crate::data::{Dataset, TokenizedInstance};
use crate::error::{Error, Result};
use crate::evaluation::{rationale_prf, Prf};
use crate::model::{argmax, GumbelNoise, Probe, RationaleModel};

const ORDER_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;
const PREDICTOR_STREAM: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Settings for training the predictor on its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorTraining {
    pub epochs: usize,
    /// Probability of presenting an example through its human-rationale mask.
    pub mix_ratio: f64,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for PredictorTraining {
    fn default() -> Self {
        Self {
            epochs: 3,
            mix_ratio: 0.0,
            batch_size: 16,
            optimizer: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Predictor-only trainer state shared across epochs.
struct PredictorEpochs<'a> {
    cfg: &'a PredictorTraining,
    adam: Adam,
    rng: ChaCha8Rng,
    order: Vec<usize>,
}

impl<'a> PredictorEpochs<'a> {
    fn new(
        model: &RationaleModel,
        train: &[TokenizedInstance],
        cfg: &'a PredictorTraining,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.mix_ratio) {
            return Err(Error::Config(format!(
                "mix ratio {} outside [0, 1]",
                cfg.mix_ratio
            )));
        }
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if train.is_empty() {
            return Err(Error::Data("empty training split".into()));
        }
        Ok(Self {
            cfg,
            adam: Adam::new(cfg.optimizer, &model.store)?,
            rng: stream(cfg.seed, PREDICTOR_STREAM),
            order: (0..train.len()).collect(),
        })
    }

    /// One pass over `train`; returns the mean loss.
    fn epoch(&mut self, model: &mut RationaleModel, train: &[TokenizedInstance]) -> Result<f64> {
        self.order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for batch in self.order.chunks(self.cfg.batch_size) {
            let mut g = Graph::new();
            let mut terms = Vec::with_capacity(batch.len());
            for &i in batch {
                let inst = &train[i];
                let masked = self.rng.gen::<f64>() < self.cfg.mix_ratio;
                let removal = self.rng.gen::<bool>();
                let logits = if masked {
                    let probe = if removal {
                        Probe::Removal
                    } else {
                        Probe::Substitution
                    };
                    model.predict_redacted(&mut g, &inst.tokens, &inst.human_keep_mask(), probe)?
                } else {
                    model.predict_logits(&mut g, &inst.tokens, None)?
                };
                terms.push(g.cross_entropy(logits, inst.label)?);
            }
            let loss = batch_mean(&mut g, &terms)?;
            total += g.scalar(loss) * batch.len() as f64;
            let grads = g.backward(loss)?;
            self.adam.accumulate(&mut model.store, &grads)?;
        }
        Ok(total / train.len() as f64)
    }
}

/// Trains the predictor with cross-entropy. Each example is shown in full with probability
/// `1 - mix_ratio`, otherwise redacted to its human rationale, by removal or substitution
/// with equal odds. Returns the mean training loss of each epoch.
pub fn train_predictor(
    model: &mut RationaleModel,
    train: &[TokenizedInstance],
    cfg: &PredictorTraining,
) -> Result<Vec<f64>> {
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    let mut trainer = PredictorEpochs::new(model, train, cfg)?;
    (0..cfg.epochs)
        .map(|_| trainer.epoch(model, train))
        .collect()
}

/// Full-input pre-training of the predictor.
pub fn pretrain_predictor(
    model: &mut RationaleModel,
    train: &[TokenizedInstance],
    cfg: &PredictorTraining,
) -> Result<Vec<f64>> {
    train_predictor(
        model,
        train,
        &PredictorTraining {
            mix_ratio: 0.0,
            ..cfg.clone()
        },
    )
}

/// Calibrates the predictor on a mixture of full and human-rationalized inputs.
pub fn train_adapted_predictor(
    model: &mut RationaleModel,
    train: &[TokenizedInstance],
    cfg: &PredictorTraining,
) -> Result<Vec<f64>> {
    if !(cfg.mix_ratio > 0.0 && cfg.mix_ratio < 1.0) {
        return Err(Error::Config(format!(
            "adapted training needs a mix ratio in (0, 1), got {}",
            cfg.mix_ratio
        )));
    }
    train_predictor(model, train, cfg)
}

/// Mean of per-instance losses.
pub fn batch_mean(g: &mut Graph, terms: &[NodeId]) -> Result<NodeId> {
    let stacked = g.concat(terms, 0)?;
    g.mean(stacked)
}

/// HSA indicator: whether the predictor is right on the human-rationale input.
pub fn compute_hsa_indicator(
    model: &RationaleModel,
    inst: &TokenizedInstance,
    probe: Probe,
) -> Result<bool> {
    Ok(model.predict_label(&inst.tokens, &inst.human_keep_mask(), probe)? == inst.label)
}

fn gate_value(
    model: &RationaleModel,
    inst: &TokenizedInstance,
    reading: GateReading,
) -> Result<f64> {
    let p = model.predict_proba(&inst.tokens, &inst.human_keep_mask(), Probe::Substitution)?;
    Ok(match reading {
        GateReading::Indicator => f64::from(u8::from(argmax(&p) == inst.label)),
        GateReading::Weight => p[inst.label],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub evals_per_epoch: usize,
    pub patience: usize,
    /// Predictor-only epochs before joint training.
    pub pretrain_epochs: usize,
    /// Mix ratio used during those epochs; 0 is plain full-input pre-training.
    pub pretrain_mix_ratio: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            optimizer: AdamConfig::default(),
            batch_size: 16,
            max_epochs: 10,
            evals_per_epoch: 5,
            patience: 3,
            pretrain_epochs: 1,
            pretrain_mix_ratio: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 || self.evals_per_epoch == 0 || self.patience == 0 {
            return Err(Error::Config(
                "batch_size, evals_per_epoch and patience must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.pretrain_mix_ratio) {
            return Err(Error::Config(format!(
                "pretrain mix ratio {} outside [0, 1)",
                self.pretrain_mix_ratio
            )));
        }
        Ok(())
    }

    pub fn predictor_phase(&self) -> PredictorTraining {
        PredictorTraining {
            epochs: self.pretrain_epochs,
            mix_ratio: self.pretrain_mix_ratio,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            seed: self.seed,
        }
    }
}

/// One validation pass during joint training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch_fraction: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub rat_p: f64,
    pub rat_r: f64,
    pub rat_f1: f64,
    pub mean_mask: f64,
}

pub fn write_log<W: Write>(records: &[LogRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")
            .map_err(|e| Error::Data(format!("log: {e}")))?;
    }
    Ok(())
}

pub fn save_log(records: &[LogRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_log(records, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Patience-based stopping on a loss that should decrease.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub bad: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> Verdict {
        if loss < self.best {
            self.best = loss;
            self.bad = 0;
            Verdict::Improved
        } else {
            self.bad += 1;
            if self.bad >= self.patience {
                Verdict::Stop
            } else {
                Verdict::Continue
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the evaluation with the lowest validation loss.
    pub model: RationaleModel,
    pub log: Vec<LogRecord>,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub steps: u64,
}

/// Loss of one instance inside `g`, with the given Gumbel noise and selective-supervision gate.
pub fn instance_loss(
    g: &mut Graph,
    model: &RationaleModel,
    inst: &TokenizedInstance,
    loss: &LossConfig,
    noise: GumbelNoise<'_>,
    gate: Option<f64>,
) -> Result<(NodeId, crate::model::Forward)> {
    let fwd = model.forward(g, inst, noise)?;
    let forced = inst.forced();
    let node = match loss.mode {
        LossMode::Unsupervised => loss_unsupervised(
            g,
            fwd.logits,
            inst.label,
            fwd.mask.soft,
            &forced,
            loss.lambda_sp,
        )?,
        LossMode::Supervised => loss_supervised(
            g,
            fwd.logits,
            inst.label,
            &fwd.mask,
            &inst.rationale,
            &forced,
            loss,
            gate,
        )?,
    };
    Ok((node, fwd))
}

struct ValPoint {
    loss: f64,
    correct: bool,
    hard: Vec<u8>,
    forced: Vec<bool>,
    mean_mask: f64,
}

fn validate_point(
    model: &RationaleModel,
    inst: &TokenizedInstance,
    loss: &LossConfig,
    frozen_gate: Option<f64>,
) -> Result<ValPoint> {
    let gate = if loss.selective {
        Some(match frozen_gate {
            Some(v) => v,
            None => gate_value(model, inst, loss.gate_reading)?,
        })
    } else {
        None
    };
    let mut g = Graph::new();
    let (l, fwd) = instance_loss(&mut g, model, inst, loss, GumbelNoise::Zero, gate)?;
    let forced = inst.forced();
    let soft = g.value(fwd.mask.soft).data();
    let hard = soft
        .iter()
        .zip(&forced)
        .map(|(&s, &f)| u8::from(!f && s >= 0.5))
        .collect();
    let free: Vec<f64> = soft
        .iter()
        .zip(&forced)
        .filter(|(_, f)| !**f)
        .map(|(s, _)| *s)
        .collect();
    let mean_mask = if free.is_empty() {
        0.0
    } else {
        free.iter().sum::<f64>() / free.len() as f64
    };
    Ok(ValPoint {
        loss: g.scalar(l),
        correct: argmax(g.value(fwd.logits).data()) == inst.label,
        hard,
        forced,
        mean_mask,
    })
}

fn validation_record(
    model: &RationaleModel,
    val: &[TokenizedInstance],
    loss: &LossConfig,
    frozen: Option<&[f64]>,
    step: u64,
    epoch_fraction: f64,
) -> Result<LogRecord> {
    let points: Vec<ValPoint> = val
        .par_iter()
        .enumerate()
        .map(|(i, inst)| validate_point(model, inst, loss, frozen.map(|f| f[i])))
        .collect::<Result<_>>()?;
    let n = points.len() as f64;
    let prf: Prf = rationale_prf(points.iter().zip(val).map(|(p, inst)| {
        (
            p.hard.as_slice(),
            inst.rationale.as_slice(),
            p.forced.as_slice(),
        )
    }))?;
    Ok(LogRecord {
        step,
        epoch_fraction,
        val_loss: points.iter().map(|p| p.loss).sum::<f64>() / n,
        val_acc: points.iter().filter(|p| p.correct).count() as f64 / n,
        rat_p: prf.precision,
        rat_r: prf.recall,
        rat_f1: prf.f1,
        mean_mask: points.iter().map(|p| p.mean_mask).sum::<f64>() / n,
    })
}

/// Predictor pre-training (if configured) followed by joint extractor-predictor training
/// with early stopping on validation loss.
pub fn train(mut model: RationaleModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Data(
            "training needs non-empty train and validation splits".into(),
        ));
    }
    train_predictor(&mut model, &data.train, &cfg.predictor_phase())?;

    let frozen =
        |split: &[TokenizedInstance], model: &RationaleModel| -> Result<Option<Vec<f64>>> {
            if cfg.loss.selective && cfg.loss.gate_source == GateSource::FrozenOracle {
                split
                    .par_iter()
                    .map(|inst| gate_value(model, inst, cfg.loss.gate_reading))
                    .collect::<Result<Vec<f64>>>()
                    .map(Some)
            } else {
                Ok(None)
            }
        };
    let frozen_train = frozen(&data.train, &model)?;
    let frozen_val = frozen(&data.val, &model)?;

    let mut adam = Adam::new(cfg.optimizer, &model.store)?;
    let mut order_rng = stream(cfg.seed, ORDER_STREAM);
    let mut noise_rng = stream(cfg.seed, NOISE_STREAM);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let n_batches = data.train.len().div_ceil(cfg.batch_size);
    let evals = cfg.evals_per_epoch.min(n_batches);

    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut log = Vec::new();
    let mut stopped_early = false;

    'epochs: for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut order_rng);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let gates: Option<Vec<f64>> = if cfg.loss.selective {
                Some(match &frozen_train {
                    Some(f) => batch.iter().map(|&i| f[i]).collect(),
                    None => batch
                        .par_iter()
                        .map(|&i| gate_value(&model, &data.train[i], cfg.loss.gate_reading))
                        .collect::<Result<_>>()?,
                })
            } else {
                None
            };
            let mut g = Graph::new();
            let mut terms = Vec::with_capacity(batch.len());
            for (k, &i) in batch.iter().enumerate() {
                let gate = gates.as_ref().map(|v| v[k]);
                let noise = GumbelNoise::Sample(&mut noise_rng);
                let (l, _) = instance_loss(&mut g, &model, &data.train[i], &cfg.loss, noise, gate)?;
                terms.push(l);
            }
            let loss = batch_mean(&mut g, &terms)?;
            let grads = g.backward(loss)?;
            adam.accumulate(&mut model.store, &grads)?;

            let due = (b + 1) * evals / n_batches > b * evals / n_batches;
            if due {
                let record = validation_record(
                    &model,
                    &data.val,
                    &cfg.loss,
                    frozen_val.as_deref(),
                    adam.step_count(),
                    epoch as f64 + (b + 1) as f64 / n_batches as f64,
                )?;
                let verdict = stopper.observe(record.val_loss);
                log.push(record);
                match verdict {
                    Verdict::Improved => best = model.clone(),
                    Verdict::Continue => {}
                    Verdict::Stop => {
                        stopped_early = true;
                        break 'epochs;
                    }
                }
            }
        }
    }
    Ok(TrainOutcome {
        model: best,
        log,
        best_val_loss: stopper.best,
        stopped_early,
        steps: adam.step_count(),
    })
}

fn predictor_val_loss(
    model: &RationaleModel,
    inst: &TokenizedInstance,
    mix_ratio: f64,
) -> Result<(f64, bool)> {
    let mut g = Graph::new();
    let full = model.predict_logits(&mut g, &inst.tokens, None)?;
    let ce = g.cross_entropy(full, inst.label)?;
    let mut loss = g.scalar(ce);
    if mix_ratio > 0.0 {
        let keep = inst.human_keep_mask();
        let masked = model.predict_redacted(&mut g, &inst.tokens, &keep, Probe::Substitution)?;
        let ce_m = g.cross_entropy(masked, inst.label)?;
        loss = (1.0 - mix_ratio) * loss + mix_ratio * g.scalar(ce_m);
    }
    Ok((loss, argmax(g.value(full).data()) == inst.label))
}

/// Predictor-only training with per-epoch validation and early stopping. With
/// `mix_ratio = 0` this is the plain full-input baseline; with a positive ratio it is the
/// adapted (calibrated) predictor, validated on the same mixture.
pub fn train_full_input(
    mut model: RationaleModel,
    data: &Dataset,
    cfg: &TrainConfig,
    mix_ratio: f64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Data(
            "training needs non-empty train and validation splits".into(),
        ));
    }
    let phase = PredictorTraining {
        epochs: cfg.max_epochs,
        mix_ratio,
        ..cfg.predictor_phase()
    };
    let mut trainer = PredictorEpochs::new(&model, &data.train, &phase)?;
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut log = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        trainer.epoch(&mut model, &data.train)?;
        let points: Vec<(f64, bool)> = data
            .val
            .par_iter()
            .map(|inst| predictor_val_loss(&model, inst, mix_ratio))
            .collect::<Result<_>>()?;
        let n = points.len() as f64;
        let record = LogRecord {
            step: trainer.adam.step_count(),
            epoch_fraction: (epoch + 1) as f64,
            val_loss: points.iter().map(|p| p.0).sum::<f64>() / n,
            val_acc: points.iter().filter(|p| p.1).count() as f64 / n,
            rat_p: 0.0,
            rat_r: 0.0,
            rat_f1: 0.0,
            mean_mask: 1.0,
        };
        let verdict = stopper.observe(record.val_loss);
        log.push(record);
        match verdict {
            Verdict::Improved => best = model.clone(),
            Verdict::Continue => {}
            Verdict::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best,
        log,
        best_val_loss: stopper.best,
        stopped_early,
        steps: trainer.adam.step_count(),
    })
}
