use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TokenizedInstance;
use crate::error::{Error, Result};
use crate::model::{argmax, Probe, RationaleModel};

/// Token-level confusion counts and the derived rates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1: f1(precision, recall),
        }
    }
}

/// Macro (per-instance averaged) rates, reported next to the micro counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MacroPrf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn instance_counts(pred: &[u8], gold: &[u8], excluded: &[bool]) -> Result<(usize, usize, usize)> {
    if pred.len() != gold.len() || gold.len() != excluded.len() {
        return Err(Error::Shape {
            op: "rationale-prf",
            lhs: vec![pred.len()],
            rhs: vec![gold.len(), excluded.len()],
        });
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for ((&p, &g), &x) in pred.iter().zip(gold).zip(excluded) {
        if x {
            continue;
        }
        match (p == 1, g == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    Ok((tp, fp, fn_))
}

/// Micro-averaged P/R/F1 over `(predicted, gold, excluded)` triples.
pub fn rationale_prf<'a, I>(items: I) -> Result<Prf>
where
    I: IntoIterator<Item = (&'a [u8], &'a [u8], &'a [bool])>,
{
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g, x) in items {
        let (a, b, c) = instance_counts(p, g, x)?;
        tp += a;
        fp += b;
        fn_ += c;
    }
    Ok(Prf::from_counts(tp, fp, fn_))
}

pub fn rationale_prf_macro<'a, I>(items: I) -> Result<MacroPrf>
where
    I: IntoIterator<Item = (&'a [u8], &'a [u8], &'a [bool])>,
{
    let mut sum = MacroPrf::default();
    let mut n = 0usize;
    for (p, g, x) in items {
        let (tp, fp, fn_) = instance_counts(p, g, x)?;
        let one = Prf::from_counts(tp, fp, fn_);
        sum.precision += one.precision;
        sum.recall += one.recall;
        sum.f1 += one.f1;
        n += 1;
    }
    if n > 0 {
        let n = n as f64;
        sum.precision /= n;
        sum.recall /= n;
        sum.f1 /= n;
    }
    Ok(sum)
}

/// Predictions of `model`'s predictor on each instance redacted by the paired keep-mask.
pub fn redacted_predictions(
    model: &RationaleModel,
    instances: &[TokenizedInstance],
    keep: &[Vec<u8>],
    probe: Probe,
) -> Result<Vec<usize>> {
    if instances.len() != keep.len() {
        return Err(Error::invalid(format!(
            "{} instances but {} masks",
            instances.len(),
            keep.len()
        )));
    }
    instances
        .par_iter()
        .zip(keep.par_iter())
        .map(|(inst, k)| model.predict_label(&inst.tokens, k, probe))
        .collect()
}

/// Accuracy on mask-redacted inputs, with per-instance correctness.
pub fn sufficiency_accuracy(
    model: &RationaleModel,
    instances: &[TokenizedInstance],
    keep: &[Vec<u8>],
    probe: Probe,
) -> Result<(f64, Vec<bool>)> {
    let preds = redacted_predictions(model, instances, keep, probe)?;
    let correct: Vec<bool> = preds
        .iter()
        .zip(instances)
        .map(|(&p, i)| p == i.label)
        .collect();
    Ok((mean_bool(&correct), correct))
}

/// Human sufficiency-accuracy indicators: gold rationale plus forced positions kept.
pub fn hsa_indicators(
    model: &RationaleModel,
    instances: &[TokenizedInstance],
    probe: Probe,
) -> Result<Vec<bool>> {
    let keep: Vec<Vec<u8>> = instances.iter().map(|i| i.human_keep_mask()).collect();
    Ok(sufficiency_accuracy(model, instances, &keep, probe)?.1)
}

/// Full-input accuracy of the predictor alone.
pub fn full_input_predictions(
    model: &RationaleModel,
    instances: &[TokenizedInstance],
) -> Result<Vec<usize>> {
    let keep: Vec<Vec<u8>> = instances.iter().map(|i| vec![1; i.len()]).collect();
    redacted_predictions(model, instances, &keep, Probe::Substitution)
}

pub fn mean_bool(values: &[bool]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().filter(|&&v| v).count() as f64 / values.len() as f64
    }
}

/// Which prediction path produces the reported labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionPath {
    /// Extractor mask feeds the predictor, as in training.
    #[default]
    Joint,
    /// Predictor on the unmasked input; rationale metrics are omitted.
    FullInput,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub probe: Probe,
    pub path: PredictionPath,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub predicted: usize,
    pub label: usize,
    pub hsa_indicator: bool,
    /// Prediction on the input redacted by the model's own hard mask.
    pub sa_correct: bool,
    pub mask: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_instances: usize,
    pub probe: Probe,
    pub path: PredictionPath,
    pub accuracy: f64,
    pub rationale: Prf,
    pub rationale_macro: MacroPrf,
    pub sa: f64,
    pub hsa: f64,
    pub mean_mask: f64,
    pub instances: Vec<InstanceResult>,
}

/// Hard, enforced mask and soft mean over non-forced positions for one instance.
fn model_mask(
    model: &RationaleModel,
    inst: &TokenizedInstance,
) -> Result<(Vec<u8>, f64, Vec<f64>)> {
    let (soft, probs) = model.infer(inst)?;
    let forced = inst.forced();
    let hard = soft
        .iter()
        .zip(&forced)
        .map(|(&s, &f)| u8::from(f || s >= 0.5))
        .collect();
    let free: Vec<f64> = soft
        .iter()
        .zip(&forced)
        .filter(|(_, f)| !**f)
        .map(|(s, _)| *s)
        .collect();
    let mean = if free.is_empty() {
        0.0
    } else {
        free.iter().sum::<f64>() / free.len() as f64
    };
    Ok((hard, mean, probs))
}

pub fn evaluate(
    model: &RationaleModel,
    instances: &[TokenizedInstance],
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let hsa = hsa_indicators(model, instances, cfg.probe)?;
    let per: Vec<(usize, Vec<u8>, f64)> = match cfg.path {
        PredictionPath::Joint => instances
            .par_iter()
            .map(|inst| {
                let (hard, mean, probs) = model_mask(model, inst)?;
                Ok((argmax(&probs), hard, mean))
            })
            .collect::<Result<_>>()?,
        PredictionPath::FullInput => full_input_predictions(model, instances)?
            .into_iter()
            .zip(instances)
            .map(|(p, inst)| (p, vec![1; inst.len()], 1.0))
            .collect(),
    };
    let masks: Vec<Vec<u8>> = per.iter().map(|(_, m, _)| m.clone()).collect();
    let (sa, sa_correct) = sufficiency_accuracy(model, instances, &masks, cfg.probe)?;
    let forced: Vec<Vec<bool>> = instances.iter().map(|i| i.forced()).collect();
    let triples = || {
        masks
            .iter()
            .zip(instances)
            .zip(&forced)
            .map(|((m, i), f)| (m.as_slice(), i.rationale.as_slice(), f.as_slice()))
    };
    let (rationale, rationale_macro) = match cfg.path {
        PredictionPath::Joint => (rationale_prf(triples())?, rationale_prf_macro(triples())?),
        PredictionPath::FullInput => (Prf::default(), MacroPrf::default()),
    };
    let correct: Vec<bool> = per
        .iter()
        .zip(instances)
        .map(|((p, _, _), i)| *p == i.label)
        .collect();
    let mean_mask = if per.is_empty() {
        0.0
    } else {
        per.iter().map(|(_, _, m)| m).sum::<f64>() / per.len() as f64
    };
    let results = per
        .into_iter()
        .zip(instances)
        .zip(hsa.iter().zip(&sa_correct))
        .map(|(((predicted, mask, _), inst), (&h, &s))| InstanceResult {
            predicted,
            label: inst.label,
            hsa_indicator: h,
            sa_correct: s,
            mask,
        })
        .collect();
    Ok(MetricsReport {
        n_instances: instances.len(),
        probe: cfg.probe,
        path: cfg.path,
        accuracy: mean_bool(&correct),
        rationale,
        rationale_macro,
        sa,
        hsa: mean_bool(&hsa),
        mean_mask,
        instances: results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prf_of(pred: &[u8], gold: &[u8]) -> Prf {
        let x = vec![false; pred.len()];
        rationale_prf([(pred, gold, x.as_slice())]).unwrap()
    }

    #[test]
    fn identical_masks_are_perfect() {
        let p = prf_of(&[1, 0, 1, 1], &[1, 0, 1, 1]);
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn half_overlap() {
        let gold = [1, 1, 0, 0];
        let pred = [1, 0, 1, 0];
        // Brute-force confusion count.
        let tp = (0..4).filter(|&i| pred[i] == 1 && gold[i] == 1).count();
        let fp = (0..4).filter(|&i| pred[i] == 1 && gold[i] == 0).count();
        let fn_ = (0..4).filter(|&i| pred[i] == 0 && gold[i] == 1).count();
        assert_eq!((tp, fp, fn_), (1, 1, 1));
        let p = prf_of(&pred, &gold);
        assert_eq!((p.tp, p.fp, p.fn_), (tp, fp, fn_));
        assert_eq!((p.precision, p.recall, p.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn empty_prediction_is_zero() {
        let p = prf_of(&[0, 0, 0], &[1, 0, 1]);
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn excluded_positions_do_not_count() {
        let pred: &[u8] = &[1, 1, 0];
        let gold: &[u8] = &[0, 1, 1];
        let x: &[bool] = &[true, false, true];
        let p = rationale_prf([(pred, gold, x)]).unwrap();
        assert_eq!((p.tp, p.fp, p.fn_), (1, 0, 0));
    }

    #[test]
    fn length_mismatch_is_error() {
        let x = [false; 2];
        assert!(rationale_prf([(&[1u8, 0][..], &[1u8][..], &x[..])]).is_err());
    }

    #[test]
    fn macro_averages_instances() {
        let x = [false; 2];
        let m = rationale_prf_macro([
            (&[1u8, 0][..], &[1u8, 0][..], &x[..]),
            (&[0u8, 0][..], &[1u8, 0][..], &x[..]),
        ])
        .unwrap();
        assert_eq!(m.f1, 0.5);
    }
}
