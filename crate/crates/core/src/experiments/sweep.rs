use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{stamped_json, ExperimentConfig, Phase, SweepSpec};
use super::stats::{factor_regression, mcnemar_test, McNemar, McNemarMethod, OlsFit};
use crate::data::{Dataset, TokenizedInstance};
use crate::error::{Error, Result};
use crate::evaluation::{
    evaluate, perturbation_curve, CurveConfig, CurveRow, EvalConfig, MetricsReport,
};
use crate::model::{Granularity, MaskingMode, Probe, RationaleModel};
use crate::training::{save_log, train, train_full_input, LossConfig, LossMode, TrainOutcome};

/// One grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunKind {
    Supervised {
        lambda_su: f64,
        lambda_su1: f64,
        sentence: bool,
        importance: bool,
        selective: bool,
    },
    Unsupervised {
        lambda_sp: f64,
    },
    FullInput,
}

impl RunKind {
    pub fn label(&self) -> &'static str {
        match self {
            RunKind::Supervised { .. } => "supervised",
            RunKind::Unsupervised { .. } => "unsupervised",
            RunKind::FullInput => "full_input",
        }
    }

    pub fn name(&self) -> String {
        match self {
            RunKind::Supervised {
                lambda_su,
                lambda_su1,
                sentence,
                importance,
                selective,
            } => format!(
                "sup_su{lambda_su}_w{lambda_su1}_s{}_i{}_sel{}",
                u8::from(*sentence),
                u8::from(*importance),
                u8::from(*selective)
            ),
            RunKind::Unsupervised { lambda_sp } => format!("unsup_sp{lambda_sp}"),
            RunKind::FullInput => "full_input".into(),
        }
    }

    /// Equal class weights with every learning strategy off.
    pub fn is_baseline_supervised(&self) -> bool {
        matches!(
            self,
            RunKind::Supervised {
                lambda_su1,
                sentence: false,
                importance: false,
                selective: false,
                ..
            } if *lambda_su1 == 0.0
        )
    }

    pub fn sentence(&self) -> bool {
        matches!(self, RunKind::Supervised { sentence: true, .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub index: usize,
    pub kind: RunKind,
    pub seed: u64,
}

impl RunSpec {
    pub fn dir_name(&self) -> String {
        format!("{:03}_{}", self.index, self.kind.name())
    }

    /// The experiment config this run trains with.
    pub fn config(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.set_seed(self.seed);
        match &self.kind {
            RunKind::Supervised {
                lambda_su,
                lambda_su1,
                sentence,
                importance,
                selective,
            } => {
                cfg.train.loss = LossConfig {
                    mode: LossMode::Supervised,
                    lambda_su: *lambda_su,
                    lambda_su1: *lambda_su1,
                    selective: *selective,
                    ..base.train.loss.clone()
                };
                cfg.model.granularity = if *sentence {
                    Granularity::Sentence
                } else {
                    Granularity::Token
                };
                cfg.model.masking = if *importance {
                    MaskingMode::Importance
                } else {
                    MaskingMode::Substitute
                };
            }
            RunKind::Unsupervised { lambda_sp } => {
                cfg.train.loss = LossConfig {
                    mode: LossMode::Unsupervised,
                    lambda_sp: *lambda_sp,
                    selective: false,
                    ..base.train.loss.clone()
                };
                cfg.model.granularity = Granularity::Token;
                cfg.model.masking = MaskingMode::Substitute;
            }
            RunKind::FullInput => {
                cfg.phase = Phase::FullInput;
                cfg.model.granularity = Granularity::Token;
                cfg.model.masking = MaskingMode::Substitute;
            }
        }
        cfg
    }
}

/// SplitMix64 step; decorrelates per-run seeds from the master seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Enumerates grid points in a fixed order: supervised grid, unsupervised, full-input.
pub fn enumerate_runs(spec: &SweepSpec, master_seed: u64) -> Vec<RunSpec> {
    let mut kinds = Vec::new();
    for &lambda_su in &spec.lambda_su {
        for &lambda_su1 in &spec.lambda_su1 {
            for &sentence in &spec.sentence {
                for &importance in &spec.importance {
                    for &selective in &spec.selective {
                        kinds.push(RunKind::Supervised {
                            lambda_su,
                            lambda_su1,
                            sentence,
                            importance,
                            selective,
                        });
                    }
                }
            }
        }
    }
    kinds.extend(
        spec.lambda_sp
            .iter()
            .map(|&lambda_sp| RunKind::Unsupervised { lambda_sp }),
    );
    if spec.full_input_baseline {
        kinds.push(RunKind::FullInput);
    }
    kinds
        .into_iter()
        .enumerate()
        .map(|(index, kind)| RunSpec {
            index,
            kind,
            seed: derive_seed(master_seed, index as u64),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "detail", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    NotApplicable(String),
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub hsa: f64,
    pub sa: f64,
    pub mean_mask: f64,
    pub best_val_loss: f64,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub spec: RunSpec,
    pub config_hash: String,
    pub status: RunStatus,
    pub metrics: Option<RunMetrics>,
    /// Test-split predictions, aligned with `SweepResult::labels`.
    pub predictions: Vec<usize>,
}

impl RunResult {
    pub fn completed(&self) -> Option<&RunMetrics> {
        match self.status {
            RunStatus::Completed => self.metrics.as_ref(),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: usize,
    pub b: usize,
    pub accuracy_a: f64,
    pub accuracy_b: f64,
    pub mcnemar: McNemar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub master_seed: u64,
    pub config_hash: String,
    pub labels: Vec<usize>,
    pub runs: Vec<RunResult>,
    /// Adapted-predictor perturbation curves, keyed by probe.
    pub curves: Vec<(Probe, Vec<CurveRow>)>,
}

/// Best and baseline selections with paired tests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub completed_runs: usize,
    pub best: Option<usize>,
    pub baseline_supervised: Option<usize>,
    pub full_input: Option<usize>,
    pub best_with_strategy: Option<usize>,
    pub best_without_strategy: Option<usize>,
    pub comparisons: Vec<(String, Comparison)>,
    pub regression: Option<OlsFit>,
    pub regression_error: Option<String>,
}

/// Index into `runs` of the best completed run among `candidates`: accuracy, then
/// rationale F1, then run order.
pub fn select_best<'a>(candidates: impl IntoIterator<Item = &'a RunResult>) -> Option<usize> {
    let mut best: Option<(&RunResult, &RunMetrics)> = None;
    for run in candidates {
        let Some(m) = run.completed() else { continue };
        let better = match best {
            None => true,
            Some((b, bm)) => {
                m.accuracy > bm.accuracy
                    || (m.accuracy == bm.accuracy && m.f1 > bm.f1)
                    || (m.accuracy == bm.accuracy && m.f1 == bm.f1 && run.spec.index < b.spec.index)
            }
        };
        if better {
            best = Some((run, m));
        }
    }
    best.map(|(r, _)| r.spec.index)
}

pub const FACTORS: [&str; 4] = [
    "class_weights",
    "sentences",
    "importance_embeddings",
    "selective_supervision",
];

fn factor_row(kind: &RunKind) -> Option<Vec<f64>> {
    match kind {
        RunKind::Supervised {
            lambda_su1,
            sentence,
            importance,
            selective,
            ..
        } => Some(vec![
            f64::from(u8::from(*lambda_su1 > 0.0)),
            f64::from(u8::from(*sentence)),
            f64::from(u8::from(*importance)),
            f64::from(u8::from(*selective)),
        ]),
        _ => None,
    }
}

impl SweepResult {
    pub fn run(&self, index: usize) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.spec.index == index)
    }

    fn compare(&self, a: usize, b: usize, n: usize, method: McNemarMethod) -> Result<Comparison> {
        let (ra, rb) = (self.run(a).expect("run a"), self.run(b).expect("run b"));
        Ok(Comparison {
            a,
            b,
            accuracy_a: ra.completed().map_or(0.0, |m| m.accuracy),
            accuracy_b: rb.completed().map_or(0.0, |m| m.accuracy),
            mcnemar: mcnemar_test(&ra.predictions, &rb.predictions, &self.labels, n, method)?,
        })
    }

    pub fn analyze(&self, method: McNemarMethod) -> Result<Analysis> {
        let rationale_runs = || {
            self.runs
                .iter()
                .filter(|r| r.spec.kind != RunKind::FullInput)
        };
        let best = select_best(rationale_runs());
        let baseline_supervised = select_best(
            self.runs
                .iter()
                .filter(|r| r.spec.kind.is_baseline_supervised()),
        );
        let full_input = select_best(
            self.runs
                .iter()
                .filter(|r| r.spec.kind == RunKind::FullInput),
        );
        let supervised = || {
            self.runs
                .iter()
                .filter(|r| matches!(r.spec.kind, RunKind::Supervised { .. }))
        };
        let best_with_strategy =
            select_best(supervised().filter(|r| !r.spec.kind.is_baseline_supervised()));
        let best_without_strategy = baseline_supervised;

        let mut pairs = Vec::new();
        if let (Some(b), Some(s)) = (best, baseline_supervised) {
            pairs.push(("best_vs_baseline_supervised".to_string(), b, s));
        }
        if let (Some(b), Some(f)) = (best, full_input) {
            pairs.push(("best_vs_full_input".to_string(), b, f));
        }
        if let (Some(w), Some(wo)) = (best_with_strategy, best_without_strategy) {
            pairs.push(("best_with_vs_without_strategy".to_string(), w, wo));
        }
        let n = pairs.len().max(1);
        let comparisons = pairs
            .into_iter()
            .map(|(name, a, b)| Ok((name, self.compare(a, b, n, method)?)))
            .collect::<Result<Vec<_>>>()?;

        let rows: Vec<(Vec<f64>, f64)> = supervised()
            .filter_map(|r| Some((factor_row(&r.spec.kind)?, r.completed()?.accuracy)))
            .collect();
        // Factors the grid holds fixed carry no information and are left out.
        let varying: Vec<usize> = (0..FACTORS.len())
            .filter(|&j| rows.iter().any(|(f, _)| f[j] != rows[0].0[j]))
            .collect();
        let names: Vec<String> = varying.iter().map(|&j| FACTORS[j].to_string()).collect();
        let rows: Vec<(Vec<f64>, f64)> = rows
            .into_iter()
            .map(|(f, y)| (varying.iter().map(|&j| f[j]).collect(), y))
            .collect();
        let (regression, regression_error) = if rows.is_empty() {
            (None, Some("no completed supervised runs".to_string()))
        } else {
            match factor_regression(&names, &rows) {
                Ok(fit) => (Some(fit), None),
                Err(e) => (None, Some(e.to_string())),
            }
        };
        Ok(Analysis {
            completed_runs: self.runs.iter().filter(|r| r.completed().is_some()).count(),
            best,
            baseline_supervised,
            full_input,
            best_with_strategy,
            best_without_strategy,
            comparisons,
            regression,
            regression_error,
        })
    }
}

/// Looks up a split by name: `train`, `val` or `test`.
pub fn split_by_name<'a>(data: &'a Dataset, name: &str) -> Result<&'a [TokenizedInstance]> {
    match name {
        "train" => Ok(&data.train),
        "val" => Ok(&data.val),
        "test" => Ok(&data.test),
        other => Err(Error::Config(format!("unknown split {other:?}"))),
    }
}

/// Trains and evaluates one configuration.
pub fn run_one(cfg: &ExperimentConfig, data: &Dataset) -> Result<(TrainOutcome, MetricsReport)> {
    let model = RationaleModel::new(cfg.model.clone(), data.vocab.len(), data.num_classes())?;
    let split = split_by_name(data, &cfg.eval.split)?;
    let outcome = match cfg.phase {
        Phase::Joint => train(model, data, &cfg.train)?,
        Phase::FullInput => train_full_input(model, data, &cfg.train, 0.0)?,
        Phase::Adapted => train_full_input(model, data, &cfg.train, cfg.eval.adapt_mix_ratio)?,
    };
    let report = evaluate(
        &outcome.model,
        split,
        &EvalConfig {
            probe: cfg.eval.probe,
            path: cfg.phase.prediction_path(),
        },
    )?;
    Ok((outcome, report))
}

/// Writes checkpoint, log, config and metrics of a finished run into `dir`.
pub fn save_run(
    dir: &Path,
    cfg: &ExperimentConfig,
    outcome: &TrainOutcome,
    report: &MetricsReport,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("config.toml", cfg.to_toml()?)?;
    outcome
        .model
        .to_checkpoint()?
        .save(&dir.join("checkpoint.json"))?;
    save_log(&outcome.log, &dir.join("train_log.jsonl"))?;
    write("metrics.json", stamped_json(report, &cfg.hash()?)?)
}

fn execute(
    spec: &RunSpec,
    base: &ExperimentConfig,
    data: &Dataset,
    out: Option<&Path>,
) -> RunResult {
    let cfg = spec.config(base);
    let config_hash = cfg.hash().unwrap_or_default();
    let mut result = RunResult {
        spec: spec.clone(),
        config_hash,
        status: RunStatus::Completed,
        metrics: None,
        predictions: Vec::new(),
    };
    if spec.kind.sentence() && !data.has_sentences() {
        result.status = RunStatus::NotApplicable("dataset has no multi-sentence documents".into());
        return result;
    }
    let attempt = || -> Result<(RunMetrics, Vec<usize>)> {
        let (outcome, report) = run_one(&cfg, data)?;
        if let Some(root) = out {
            save_run(
                &root.join("runs").join(spec.dir_name()),
                &cfg,
                &outcome,
                &report,
            )?;
        }
        let metrics = RunMetrics {
            accuracy: report.accuracy,
            precision: report.rationale.precision,
            recall: report.rationale.recall,
            f1: report.rationale.f1,
            hsa: report.hsa,
            sa: report.sa,
            mean_mask: report.mean_mask,
            best_val_loss: outcome.best_val_loss,
            steps: outcome.steps,
        };
        Ok((
            metrics,
            report.instances.iter().map(|i| i.predicted).collect(),
        ))
    };
    match attempt() {
        Ok((metrics, predictions)) => {
            result.metrics = Some(metrics);
            result.predictions = predictions;
        }
        Err(e) => result.status = RunStatus::Failed(e.to_string()),
    }
    result
}

/// Adapted predictor plus its perturbation curves for each configured probe.
pub fn adapted_curves(
    cfg: &ExperimentConfig,
    data: &Dataset,
) -> Result<Vec<(Probe, Vec<CurveRow>)>> {
    let mut adapted = cfg.clone();
    adapted.phase = Phase::Adapted;
    adapted.model.granularity = Granularity::Token;
    adapted.model.masking = MaskingMode::Substitute;
    let model = RationaleModel::new(adapted.model.clone(), data.vocab.len(), data.num_classes())?;
    let outcome = train_full_input(model, data, &adapted.train, cfg.eval.adapt_mix_ratio)?;
    let split = split_by_name(data, &cfg.eval.split)?;
    cfg.eval
        .curve_probes
        .iter()
        .map(|&probe| {
            let curve = CurveConfig {
                modes: cfg.eval.curve_modes.clone(),
                grid: cfg.eval.curve_grid.clone(),
                probe,
                granularity: Granularity::Token,
                seed: cfg.seed,
            };
            Ok((probe, perturbation_curve(&outcome.model, split, &curve)?))
        })
        .collect()
}

/// Runs every grid point on a worker pool. Results are ordered by run index regardless of
/// scheduling, so output depends only on the config and master seed.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    data: &Dataset,
    out: Option<&Path>,
) -> Result<SweepResult> {
    let specs = enumerate_runs(&cfg.sweep, cfg.seed);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.sweep.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let runs: Vec<RunResult> = pool.install(|| {
        specs
            .par_iter()
            .map(|s| execute(s, cfg, data, out))
            .collect()
    });
    let curves = if cfg.sweep.adapted_curves {
        adapted_curves(cfg, data)?
    } else {
        Vec::new()
    };
    let split = split_by_name(data, &cfg.eval.split)?;
    Ok(SweepResult {
        master_seed: cfg.seed,
        config_hash: cfg.hash()?,
        labels: split.iter().map(|i| i.label).collect(),
        runs,
        curves,
    })
}
