//! Experiment orchestration for the qlab fusion laboratory.
//!
//! A [`RunConfig`] (JSON) names an experiment kind, a pipeline, a frozen
//! bundle, a dataset and hyperparameters. [`run`] executes it and leaves a
//! run directory holding `config.json`, `metrics.csv`, `summary.json`,
//! experiment-specific files and, last, `manifest.json`.

pub mod config;
pub mod experiments;
pub mod record;
pub mod train;

pub use config::{
    AlignConfig, BenchConfig, BundleRef, DatasetRef, EpochPlan, EvalConfig, ExperimentKind, OptimizerConfig,
    OptimizerKind, ProbeConfig, RunConfig,
};
pub use experiments::{
    answer_vocabulary, bench_epoch_time, bench_examples, bench_pair, fit, grounding_ablation, median, noise_ladder,
    qformer_source, rerun, run, run_alignment, run_layer_sweep, run_probe_suite, run_zero_shot, train_multitask,
    train_single_task, zero_shot_eval, BenchReport, Fit, PipelineTiming, SingleThread, ZeroShotReport,
};
pub use record::{metrics_csv, read_manifest, EpochRecord, RunDir, RunRecord, RunSummary, METRICS_HEADER};
pub use train::{Example, Setup, Trainer};
