use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::sweep::{Analysis, Comparison, RunKind, RunStatus, SweepResult};
use crate::error::{Error, Result};
use crate::evaluation::write_curve_csv;

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Data(format!("csv: {e}"))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(csv_err)?;
    String::from_utf8(bytes).map_err(csv_err)
}

/// One row per run.
pub fn results_csv(sweep: &SweepResult) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "index",
        "name",
        "kind",
        "lambda_su",
        "lambda_su1",
        "sentence",
        "importance",
        "selective",
        "lambda_sp",
        "seed",
        "status",
        "accuracy",
        "precision",
        "recall",
        "f1",
        "hsa",
        "sa",
        "mean_mask",
        "best_val_loss",
        "steps",
        "config_hash",
        "message",
    ])
    .map_err(csv_err)?;
    for run in &sweep.runs {
        let s = &run.spec;
        let mut factors = vec![String::new(); 6];
        match &s.kind {
            RunKind::Supervised {
                lambda_su,
                lambda_su1,
                sentence,
                importance,
                selective,
            } => {
                factors[0] = lambda_su.to_string();
                factors[1] = lambda_su1.to_string();
                factors[2] = sentence.to_string();
                factors[3] = importance.to_string();
                factors[4] = selective.to_string();
            }
            RunKind::Unsupervised { lambda_sp } => factors[5] = lambda_sp.to_string(),
            RunKind::FullInput => {}
        }
        let (status, message) = match &run.status {
            RunStatus::Completed => ("completed", String::new()),
            RunStatus::NotApplicable(m) => ("not_applicable", m.clone()),
            RunStatus::Failed(m) => ("failed", m.clone()),
        };
        let m = run.completed();
        let mut row = vec![
            s.index.to_string(),
            s.kind.name(),
            s.kind.label().to_string(),
        ];
        row.extend(factors);
        row.extend([s.seed.to_string(), status.to_string()]);
        row.extend([
            opt(m.map(|m| m.accuracy)),
            opt(m.map(|m| m.precision)),
            opt(m.map(|m| m.recall)),
            opt(m.map(|m| m.f1)),
            opt(m.map(|m| m.hsa)),
            opt(m.map(|m| m.sa)),
            opt(m.map(|m| m.mean_mask)),
            opt(m.map(|m| m.best_val_loss)),
            m.map(|m| m.steps.to_string()).unwrap_or_default(),
            run.config_hash.clone(),
            message,
        ]);
        w.write_record(&row).map_err(csv_err)?;
    }
    finish(w)
}

pub fn regression_csv(analysis: &Analysis) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["term", "estimate", "std_error"])
        .map_err(csv_err)?;
    if let Some(fit) = &analysis.regression {
        for c in &fit.coefficients {
            w.write_record([c.name.clone(), c.estimate.to_string(), opt(c.std_error)])
                .map_err(csv_err)?;
        }
    }
    finish(w)
}

#[derive(Serialize)]
struct ComparisonEntry<'a> {
    name: &'a str,
    run_a: String,
    run_b: String,
    #[serde(flatten)]
    comparison: &'a Comparison,
}

#[derive(Serialize)]
struct ComparisonFile<'a> {
    config_hash: &'a str,
    best: Option<String>,
    baseline_supervised: Option<String>,
    full_input: Option<String>,
    comparisons: Vec<ComparisonEntry<'a>>,
}

pub fn comparisons_json(sweep: &SweepResult, analysis: &Analysis) -> Result<String> {
    let name = |i: usize| sweep.run(i).map(|r| r.spec.dir_name()).unwrap_or_default();
    let file = ComparisonFile {
        config_hash: &sweep.config_hash,
        best: analysis.best.map(name),
        baseline_supervised: analysis.baseline_supervised.map(name),
        full_input: analysis.full_input.map(name),
        comparisons: analysis
            .comparisons
            .iter()
            .map(|(n, c)| ComparisonEntry {
                name: n,
                run_a: name(c.a),
                run_b: name(c.b),
                comparison: c,
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&file)? + "\n")
}

pub fn summary_text(sweep: &SweepResult, analysis: &Analysis) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "config: {}", sweep.config_hash);
    let _ = writeln!(
        s,
        "runs: {} ({} completed)",
        sweep.runs.len(),
        analysis.completed_runs
    );
    let describe = |i: Option<usize>| match i.and_then(|i| sweep.run(i)) {
        Some(r) => {
            let m = r.completed().expect("selected runs are completed");
            format!(
                "{} acc={:.4} p={:.4} r={:.4} f1={:.4}",
                r.spec.dir_name(),
                m.accuracy,
                m.precision,
                m.recall,
                m.f1
            )
        }
        None => "none".into(),
    };
    let _ = writeln!(s, "best: {}", describe(analysis.best));
    let _ = writeln!(
        s,
        "baseline supervised: {}",
        describe(analysis.baseline_supervised)
    );
    let _ = writeln!(s, "full input: {}", describe(analysis.full_input));
    for (name, c) in &analysis.comparisons {
        let _ = writeln!(
            s,
            "{name}: b={} c={} p={:.4} corrected={:.4}",
            c.mcnemar.b, c.mcnemar.c, c.mcnemar.p_value, c.mcnemar.p_corrected
        );
    }
    match (&analysis.regression, &analysis.regression_error) {
        (Some(fit), _) => {
            for c in &fit.coefficients {
                let _ = writeln!(s, "effect {}: {:+.4}", c.name, c.estimate);
            }
        }
        (None, Some(e)) => {
            let _ = writeln!(s, "regression: {e}");
        }
        (None, None) => {}
    }
    s
}

/// Writes every report file into `dir` and returns their paths.
pub fn export_report(sweep: &SweepResult, analysis: &Analysis, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = vec![
        ("results.csv".to_string(), results_csv(sweep)?),
        (
            "best_vs_baseline.json".to_string(),
            comparisons_json(sweep, analysis)?,
        ),
        ("regression.csv".to_string(), regression_csv(analysis)?),
        ("summary.txt".to_string(), summary_text(sweep, analysis)),
    ];
    for (probe, rows) in &sweep.curves {
        let mut buf = Vec::new();
        write_curve_csv(rows, &mut buf)?;
        files.push((
            format!("perturbation_{}.csv", probe.name()),
            String::from_utf8(buf).map_err(csv_err)?,
        ));
    }
    let mut paths = Vec::new();
    for (name, text) in files {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        paths.push(p);
    }
    Ok(paths)
}
