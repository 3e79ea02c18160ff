//! Label accuracy, rationale agreement, sufficiency-accuracy and rationale corruption.

mod metrics;
mod perturb;

pub use metrics::{
    evaluate, full_input_predictions, hsa_indicators, mean_bool, rationale_prf,
    rationale_prf_macro, redacted_predictions, sufficiency_accuracy, EvalConfig, InstanceResult,
    MacroPrf, MetricsReport, PredictionPath, Prf,
};
pub use perturb::{
    perturb, perturb_count, perturbation_curve, save_curve_csv, write_curve_csv, CurveConfig,
    CurveRow, PerturbMode, PerturbOutcome, PerturbationSpec, Stratum,
};
