use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Central-difference gradient check settings.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Coordinates sampled per parameter tensor; `None` checks every coordinate.
    pub coords_per_param: Option<usize>,
    /// Coordinates where both gradients are below this magnitude count as agreeing.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_param: Some(8),
            abs_floor: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Largest `|analytic - numeric|` among coordinates under `abs_floor`.
    pub max_abs_below_floor: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares `backward` against central differences of `build`'s scalar output.
///
/// Relative error per coordinate is `|analytic - numeric| / (|numeric| + 1e-12)`.
/// `build` must be deterministic; it is evaluated twice at the base point to
/// confirm that.
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    mut build: F,
    opts: &GradCheck,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<NodeId>,
{
    if !(opts.step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let first = evaluate(&mut build, store)?;
    let second = evaluate(&mut build, store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let analytic = {
        let mut g = Graph::new();
        let loss = build(store, &mut g)?;
        g.backward(loss)?
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_below_floor: 0.0,
        checked: 0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        let coords: Vec<usize> = match opts.coords_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let a = analytic.get(id).map_or(0.0, |t| t.data()[c]);
            let orig = store.get(id).data()[c];
            store.get_mut(id).data_mut()[c] = orig + opts.step;
            let plus = evaluate(&mut build, store);
            store.get_mut(id).data_mut()[c] = orig - opts.step;
            let minus = evaluate(&mut build, store);
            store.get_mut(id).data_mut()[c] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.step);
            report.checked += 1;
            if a.abs().max(numeric.abs()) < opts.abs_floor {
                report.max_abs_below_floor = report.max_abs_below_floor.max((a - numeric).abs());
                continue;
            }
            let rel = (a - numeric).abs() / (numeric.abs() + 1e-12);
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.name(id).to_string(), c));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn evaluate<F>(build: &mut F, store: &ParamStore) -> Result<f64>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = build(store, &mut g)?;
    Ok(g.scalar(loss))
}
