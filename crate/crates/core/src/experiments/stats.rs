//! Paired significance testing and least-squares factor analysis.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McNemarMethod {
    /// `(|b − c| − 1)² / (b + c)` against χ²(1).
    #[default]
    ContinuityCorrected,
    /// Two-sided binomial test on the discordant pairs; suited to `b + c < 25`.
    ExactBinomial,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McNemar {
    /// A right, B wrong.
    pub b: usize,
    /// A wrong, B right.
    pub c: usize,
    /// `None` when there are no discordant pairs or the exact method is used.
    pub statistic: Option<f64>,
    pub p_value: f64,
    pub p_corrected: f64,
    pub method: McNemarMethod,
}

/// Bonferroni adjustment: `min(1, p · n)`.
pub fn bonferroni(p: f64, n_comparisons: usize) -> f64 {
    (p * n_comparisons as f64).min(1.0)
}

/// χ²(1) survival function.
pub fn chi2_sf_1(x: f64) -> f64 {
    ChiSquared::new(1.0).expect("one degree of freedom").sf(x)
}

pub fn mcnemar_from_counts(
    b: usize,
    c: usize,
    n_comparisons: usize,
    method: McNemarMethod,
) -> Result<McNemar> {
    if n_comparisons == 0 {
        return Err(Error::invalid("n_comparisons must be at least 1"));
    }
    let n = b + c;
    let (statistic, p_value) = if n == 0 {
        (None, 1.0)
    } else {
        match method {
            McNemarMethod::ContinuityCorrected => {
                let diff = (b as f64 - c as f64).abs() - 1.0;
                let diff = diff.max(0.0);
                let stat = diff * diff / n as f64;
                (Some(stat), chi2_sf_1(stat))
            }
            McNemarMethod::ExactBinomial => {
                let dist =
                    Binomial::new(0.5, n as u64).map_err(|e| Error::invalid(e.to_string()))?;
                let tail = dist.cdf(b.min(c) as u64);
                (None, (2.0 * tail).min(1.0))
            }
        }
    };
    Ok(McNemar {
        b,
        c,
        statistic,
        p_value,
        p_corrected: bonferroni(p_value, n_comparisons),
        method,
    })
}

/// McNemar's test on two aligned prediction vectors.
pub fn mcnemar_test(
    preds_a: &[usize],
    preds_b: &[usize],
    labels: &[usize],
    n_comparisons: usize,
    method: McNemarMethod,
) -> Result<McNemar> {
    if preds_a.len() != labels.len() || preds_b.len() != labels.len() {
        return Err(Error::Shape {
            op: "mcnemar",
            lhs: vec![preds_a.len(), preds_b.len()],
            rhs: vec![labels.len()],
        });
    }
    let (mut b, mut c) = (0, 0);
    for ((&pa, &pb), &y) in preds_a.iter().zip(preds_b).zip(labels) {
        match (pa == y, pb == y) {
            (true, false) => b += 1,
            (false, true) => c += 1,
            _ => {}
        }
    }
    mcnemar_from_counts(b, c, n_comparisons, method)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    /// Plain OLS standard error; `None` without residual degrees of freedom.
    pub std_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub coefficients: Vec<Coefficient>,
    pub residuals: Vec<f64>,
    pub n_obs: usize,
    pub residual_df: usize,
    /// The normal equations needed the `1e-8` ridge to factorise.
    pub ridge: bool,
}

impl OlsFit {
    pub fn get(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }
}

const RIDGE: f64 = 1e-8;
const COLLINEAR_TOL: f64 = 1e-10;

/// Columns that are (numerically) linear combinations of the others.
fn collinear_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let p = x.ncols();
    let mut out = Vec::new();
    for j in 0..p {
        let target = x.column(j).into_owned();
        let norm = target.norm();
        if norm == 0.0 {
            out.push(j);
            continue;
        }
        if p == 1 {
            continue;
        }
        let others: Vec<usize> = (0..p).filter(|&k| k != j).collect();
        let rest = x.select_columns(&others);
        let svd = rest.clone().svd(true, true);
        let fitted = match svd.solve(&target, 1e-12) {
            Ok(beta) => &rest * beta,
            Err(_) => continue,
        };
        if (target - fitted).norm() <= COLLINEAR_TOL * norm {
            out.push(j);
        }
    }
    out
}

/// Ordinary least squares via the normal equations. `x` must already contain any intercept
/// column; `names` labels its columns.
pub fn ols(x: &DMatrix<f64>, y: &[f64], names: &[String]) -> Result<OlsFit> {
    let (n, p) = x.shape();
    if names.len() != p || y.len() != n {
        return Err(Error::Shape {
            op: "ols",
            lhs: vec![n, p],
            rhs: vec![y.len(), names.len()],
        });
    }
    if n < p {
        return Err(Error::invalid(format!(
            "{n} observations cannot identify {p} coefficients"
        )));
    }
    let bad = collinear_columns(x);
    if !bad.is_empty() {
        let named: Vec<String> = bad.iter().map(|&j| names[j].clone()).collect();
        let factors: Vec<String> = named
            .iter()
            .filter(|n| n.as_str() != "intercept")
            .cloned()
            .collect();
        return Err(Error::Collinear {
            columns: if factors.is_empty() { named } else { factors },
        });
    }
    let yv = DVector::from_column_slice(y);
    let xtx = x.transpose() * x;
    let xty = x.transpose() * &yv;
    let (chol, ridge) = match xtx.clone().cholesky() {
        Some(c) => (c, false),
        None => {
            let damped = &xtx + DMatrix::identity(p, p) * RIDGE;
            match damped.cholesky() {
                Some(c) => (c, true),
                None => {
                    return Err(Error::Collinear {
                        columns: names.to_vec(),
                    })
                }
            }
        }
    };
    let beta = chol.solve(&xty);
    let residuals = &yv - x * &beta;
    let df = n - p;
    let inv = chol.inverse();
    let sigma2 = (df > 0).then(|| residuals.norm_squared() / df as f64);
    let coefficients = (0..p)
        .map(|j| Coefficient {
            name: names[j].clone(),
            estimate: beta[j],
            std_error: sigma2.map(|s| (s * inv[(j, j)]).sqrt()),
        })
        .collect();
    Ok(OlsFit {
        coefficients,
        residuals: residuals.iter().copied().collect(),
        n_obs: n,
        residual_df: df,
        ridge,
    })
}

/// Regresses `response` on the named factor columns plus an intercept.
pub fn factor_regression(factor_names: &[String], rows: &[(Vec<f64>, f64)]) -> Result<OlsFit> {
    let p = factor_names.len() + 1;
    if rows.len() < p {
        return Err(Error::invalid(format!(
            "{} runs cannot identify {} factors plus an intercept",
            rows.len(),
            factor_names.len()
        )));
    }
    let mut data = Vec::with_capacity(rows.len() * p);
    for (factors, _) in rows {
        if factors.len() != factor_names.len() {
            return Err(Error::invalid(
                "factor row length does not match factor names",
            ));
        }
        data.push(1.0);
        data.extend_from_slice(factors);
    }
    let x = DMatrix::from_row_slice(rows.len(), p, &data);
    let y: Vec<f64> = rows.iter().map(|(_, r)| *r).collect();
    let mut names = vec!["intercept".to_string()];
    names.extend(factor_names.iter().cloned());
    ols(&x, &y, &names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_predictions_have_p_one() {
        let preds = [0, 1, 1, 0];
        let m = mcnemar_test(
            &preds,
            &preds,
            &[0, 1, 0, 0],
            1,
            McNemarMethod::ContinuityCorrected,
        )
        .unwrap();
        assert_eq!((m.b, m.c, m.statistic, m.p_value), (0, 0, None, 1.0));
    }

    #[test]
    fn bonferroni_examples() {
        assert!((bonferroni(0.02, 3) - 0.06).abs() < 1e-15);
        assert_eq!(bonferroni(0.5, 4), 1.0);
    }

    #[test]
    fn exact_mode_small_counts() {
        // b = 0, c = 5: two-sided p = 2 · 0.5⁵.
        let m = mcnemar_from_counts(0, 5, 1, McNemarMethod::ExactBinomial).unwrap();
        assert!((m.p_value - 0.0625).abs() < 1e-12);
    }

    #[test]
    fn zero_comparisons_rejected() {
        assert!(mcnemar_from_counts(1, 2, 0, McNemarMethod::ContinuityCorrected).is_err());
    }

    #[test]
    fn two_point_interpolation() {
        let fit = factor_regression(&["x".into()], &[(vec![0.0], 1.0), (vec![1.0], 3.0)]).unwrap();
        assert!((fit.get("intercept").unwrap().estimate - 1.0).abs() < 1e-12);
        assert!((fit.get("x").unwrap().estimate - 2.0).abs() < 1e-12);
        assert_eq!(fit.get("x").unwrap().std_error, None);
    }

    #[test]
    fn constant_factor_is_collinear() {
        let rows: Vec<(Vec<f64>, f64)> = (0..6)
            .map(|i| (vec![f64::from(i % 2), 1.0], f64::from(i)))
            .collect();
        match factor_regression(&["a".into(), "b".into()], &rows) {
            Err(Error::Collinear { columns }) => assert_eq!(columns, vec!["b".to_string()]),
            other => panic!("expected collinearity error, got {other:?}"),
        }
    }

    #[test]
    fn duplicated_factor_names_both() {
        let rows: Vec<(Vec<f64>, f64)> = (0..6)
            .map(|i| {
                (
                    vec![f64::from(i % 2), f64::from(i % 2), f64::from(i / 3)],
                    f64::from(i),
                )
            })
            .collect();
        match factor_regression(&["a".into(), "b".into(), "c".into()], &rows) {
            Err(Error::Collinear { columns }) => {
                assert_eq!(columns, vec!["a".to_string(), "b".to_string()])
            }
            other => panic!("expected collinearity error, got {other:?}"),
        }
    }

    #[test]
    fn too_few_rows() {
        assert!(factor_regression(&["a".into(), "b".into()], &[(vec![0.0, 1.0], 1.0)]).is_err());
    }
}
