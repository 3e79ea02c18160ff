use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{mean_bool, sufficiency_accuracy};
use crate::data::TokenizedInstance;
use crate::error::{Error, Result};
use crate::model::{Granularity, Probe, RationaleModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    Drop,
    Add,
    Swap,
}

impl PerturbMode {
    pub const ALL: [PerturbMode; 3] = [PerturbMode::Drop, PerturbMode::Add, PerturbMode::Swap];

    pub fn name(self) -> &'static str {
        match self {
            PerturbMode::Drop => "drop",
            PerturbMode::Add => "add",
            PerturbMode::Swap => "swap",
        }
    }
}

impl fmt::Display for PerturbMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drop" => Ok(PerturbMode::Drop),
            "add" => Ok(PerturbMode::Add),
            "swap" => Ok(PerturbMode::Swap),
            other => Err(Error::invalid(format!(
                "unknown perturbation mode {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub mode: PerturbMode,
    /// Percentage of the rationale size, 0 to 100.
    pub n: u32,
    pub seed: u64,
}

/// `round(n% · size)` with halves rounded up.
pub fn perturb_count(n: u32, size: usize) -> usize {
    (n as usize * size + 50) / 100
}

/// Result of corrupting one gold rationale.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PerturbOutcome {
    /// Corrupted rationale over non-forced positions.
    pub rationale: Vec<u8>,
    /// `rationale` with forced positions set, ready to use as a keep-mask.
    pub keep: Vec<u8>,
    /// Units requested by `round(n% · |α|)`.
    pub requested: usize,
    pub dropped: usize,
    pub added: usize,
    /// The non-rationale pool was smaller than the requested count.
    pub clamped: bool,
}

/// Non-forced positions grouped into units (single tokens, or whole sentences).
fn units(inst: &TokenizedInstance, granularity: Granularity) -> Vec<Vec<usize>> {
    let forced = inst.forced();
    let free = (0..inst.len()).filter(|&i| !forced[i]);
    match granularity {
        Granularity::Token => free.map(|i| vec![i]).collect(),
        Granularity::Sentence => {
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for i in free {
                groups.entry(inst.sentence_ids[i]).or_default().push(i);
            }
            groups.into_values().collect()
        }
    }
}

fn pick(rng: &mut ChaCha8Rng, pool: &[usize], k: usize) -> Vec<usize> {
    let mut chosen: Vec<usize> = sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    chosen.sort_unstable();
    chosen
}

/// Corrupts the gold rationale of `inst`. `index` selects the instance's random stream so
/// results do not depend on evaluation order.
pub fn perturb(
    inst: &TokenizedInstance,
    spec: &PerturbationSpec,
    granularity: Granularity,
    index: u64,
) -> Result<PerturbOutcome> {
    if spec.n > 100 {
        return Err(Error::invalid(format!(
            "perturbation percentage {} above 100",
            spec.n
        )));
    }
    let forced = inst.forced();
    let units = units(inst, granularity);
    let in_rationale = |u: &Vec<usize>| u.iter().any(|&i| inst.rationale[i] == 1);
    let rat: Vec<usize> = (0..units.len())
        .filter(|&u| in_rationale(&units[u]))
        .collect();
    let non: Vec<usize> = (0..units.len())
        .filter(|&u| !in_rationale(&units[u]))
        .collect();

    let requested = perturb_count(spec.n, rat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let (drop_k, add_k) = match spec.mode {
        PerturbMode::Drop => (requested, 0),
        PerturbMode::Add => (0, requested.min(non.len())),
        PerturbMode::Swap => {
            let k = requested.min(non.len());
            (k, k)
        }
    };
    let clamped = spec.mode != PerturbMode::Drop && requested > non.len();

    let mut rationale: Vec<u8> = inst
        .rationale
        .iter()
        .zip(&forced)
        .map(|(&r, &f)| if f { 0 } else { r })
        .collect();
    if granularity == Granularity::Sentence {
        for &u in &rat {
            for &i in &units[u] {
                rationale[i] = 1;
            }
        }
    }
    for u in pick(&mut rng, &rat, drop_k) {
        for &i in &units[u] {
            rationale[i] = 0;
        }
    }
    for u in pick(&mut rng, &non, add_k) {
        for &i in &units[u] {
            rationale[i] = 1;
        }
    }
    let keep = rationale
        .iter()
        .zip(&forced)
        .map(|(&r, &f)| u8::from(f || r == 1))
        .collect();
    Ok(PerturbOutcome {
        rationale,
        keep,
        requested,
        dropped: drop_k,
        added: add_k,
        clamped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    All,
    Hsa1,
    Hsa0,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::All, Stratum::Hsa1, Stratum::Hsa0];

    pub fn name(self) -> &'static str {
        match self {
            Stratum::All => "all",
            Stratum::Hsa1 => "hsa=1",
            Stratum::Hsa0 => "hsa=0",
        }
    }

    fn contains(self, hsa: bool) -> bool {
        match self {
            Stratum::All => true,
            Stratum::Hsa1 => hsa,
            Stratum::Hsa0 => !hsa,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub mode: PerturbMode,
    pub n: u32,
    pub stratum: Stratum,
    /// `None` for an empty stratum.
    pub sa: Option<f64>,
    pub n_instances: usize,
    pub full_input_accuracy: f64,
    /// Instances whose add/swap count exceeded the non-rationale pool.
    pub clamped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveConfig {
    pub modes: Vec<PerturbMode>,
    pub grid: Vec<u32>,
    pub probe: Probe,
    pub granularity: Granularity,
    pub seed: u64,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            modes: PerturbMode::ALL.to_vec(),
            grid: (0..=10).map(|i| i * 10).collect(),
            probe: Probe::Substitution,
            granularity: Granularity::Token,
            seed: 0,
        }
    }
}

/// Sufficiency-accuracy of `model` on corrupted gold rationales, stratified by HSA.
pub fn perturbation_curve(
    model: &RationaleModel,
    instances: &[TokenizedInstance],
    cfg: &CurveConfig,
) -> Result<Vec<CurveRow>> {
    let full: Vec<Vec<u8>> = instances.iter().map(|i| vec![1; i.len()]).collect();
    let (full_acc, _) = sufficiency_accuracy(model, instances, &full, cfg.probe)?;
    let human: Vec<Vec<u8>> = instances.iter().map(|i| i.human_keep_mask()).collect();
    let (_, hsa) = sufficiency_accuracy(model, instances, &human, cfg.probe)?;

    let mut rows = Vec::new();
    for &mode in &cfg.modes {
        for &n in &cfg.grid {
            let spec = PerturbationSpec {
                mode,
                n,
                seed: cfg.seed,
            };
            let outcomes: Vec<PerturbOutcome> = instances
                .iter()
                .enumerate()
                .map(|(i, inst)| perturb(inst, &spec, cfg.granularity, i as u64))
                .collect::<Result<_>>()?;
            let keep: Vec<Vec<u8>> = outcomes.iter().map(|o| o.keep.clone()).collect();
            let (_, correct) = sufficiency_accuracy(model, instances, &keep, cfg.probe)?;
            for stratum in Stratum::ALL {
                let members: Vec<usize> = (0..instances.len())
                    .filter(|&i| stratum.contains(hsa[i]))
                    .collect();
                let hits: Vec<bool> = members.iter().map(|&i| correct[i]).collect();
                rows.push(CurveRow {
                    mode,
                    n,
                    stratum,
                    sa: (!members.is_empty()).then(|| mean_bool(&hits)),
                    n_instances: members.len(),
                    full_input_accuracy: full_acc,
                    clamped: members.iter().filter(|&&i| outcomes[i].clamped).count(),
                });
            }
        }
    }
    Ok(rows)
}

/// Writes curve rows as CSV; empty strata get an empty `sa` cell.
pub fn write_curve_csv<W: Write>(rows: &[CurveRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Data(format!("csv: {e}"));
    w.write_record([
        "mode",
        "N",
        "stratum",
        "sa",
        "n_instances",
        "full_input_accuracy",
        "clamped",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.mode.name().to_string(),
            r.n.to_string(),
            r.stratum.name().to_string(),
            r.sa.map(|v| v.to_string()).unwrap_or_default(),
            r.n_instances.to_string(),
            r.full_input_accuracy.to_string(),
            r.clamped.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Data(format!("csv: {e}")))
}

pub fn save_curve_csv(rows: &[CurveRow], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_curve_csv(rows, f)
}
