//! Experiment harness: configurations, calibration, evaluation and reports.

pub mod config;
pub mod corpus;
pub mod export;
pub mod fidelity;
pub mod grid;
pub mod policy;
pub mod synth;

pub use config::{AblationScope, QuantConfig, Scope, WeightGranularity};
pub use corpus::Corpus;
pub use export::{candidate_from_archive, load_candidate, quantized_archive, save_quantized, Candidate};
pub use fidelity::{calibrate, evaluate_against, evaluate_fidelity, Baseline, Fidelity, LayerMetrics, Metrics};
pub use grid::{
    ablation_experiment, evaluate_config, reports_to_json, run_grid, AblationResult, FidelityReport,
    OutlierSummary,
};
pub use policy::{build_hooks, check_policy, weight_targets, QuantizedModel, WeightTarget};
pub use synth::{make_outlier_model, pick_outlier_channels};
