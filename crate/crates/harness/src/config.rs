use std::fs;
use std::path::{Path, PathBuf};

use qlab_core::analysis::{Metric, ProbeOptions, DEFAULT_K};
use qlab_core::data::{SplitSpec, MIN_SCENES};
use qlab_core::frozen::{FrozenConfig, LmKind, Recipe};
use qlab_core::optim::AdamWConfig;
use qlab_core::pipelines::{PipelineKind, PipelineOptions};
use qlab_core::qformer::QFormerConfig;
use qlab_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    SingleTaskCaption,
    SingleTaskVqa,
    Multitask,
    ZeroShot,
    Probe,
    Align,
    BenchTime,
    GroundingAblation,
    LayerSweep,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 9] = [
        ExperimentKind::SingleTaskCaption,
        ExperimentKind::SingleTaskVqa,
        ExperimentKind::Multitask,
        ExperimentKind::ZeroShot,
        ExperimentKind::Probe,
        ExperimentKind::Align,
        ExperimentKind::BenchTime,
        ExperimentKind::GroundingAblation,
        ExperimentKind::LayerSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::SingleTaskCaption => "single-task-caption",
            ExperimentKind::SingleTaskVqa => "single-task-vqa",
            ExperimentKind::Multitask => "multitask",
            ExperimentKind::ZeroShot => "zero-shot",
            ExperimentKind::Probe => "probe",
            ExperimentKind::Align => "align",
            ExperimentKind::BenchTime => "bench-time",
            ExperimentKind::GroundingAblation => "grounding-ablation",
            ExperimentKind::LayerSweep => "layer-sweep",
        }
    }
}

/// Where the frozen bundle comes from: a saved bundle directory, or a
/// (seed, config, recipe) triple that is built (and cached under
/// `cache_dir` when set).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BundleRef {
    pub path: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub seed: u64,
    pub frozen: FrozenConfig,
    pub recipe: Recipe,
}

impl Default for BundleRef {
    fn default() -> Self {
        Self { path: None, cache_dir: None, seed: 0, frozen: FrozenConfig::default(), recipe: Recipe::toy() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self {
            kind: OptimizerKind::Adamw,
            lr: a.lr,
            betas: [a.beta1, a.beta2],
            eps: a.eps,
            weight_decay: a.weight_decay,
            clip_norm: a.clip_norm,
        }
    }
}

impl OptimizerConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.eps,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
        }
    }
}

/// Epoch counts per phase. `train` drives single-task runs (and each layer
/// of a sweep); `pretrain` + `finetune` drive multitask-shaped runs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpochPlan {
    pub train: usize,
    pub pretrain: usize,
    pub finetune: usize,
    pub warmup: usize,
    pub measured: usize,
}

impl Default for EpochPlan {
    fn default() -> Self {
        Self { train: 8, pretrain: 8, finetune: 6, warmup: 1, measured: 5 }
    }
}

/// A saved dataset directory, or generation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetRef {
    pub path: Option<PathBuf>,
    pub seed: u64,
    pub n_scenes: usize,
    pub split: SplitSpec,
}

impl Default for DatasetRef {
    fn default() -> Self {
        Self { path: None, seed: 1, n_scenes: 300, split: SplitSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Cap on validation samples (captions) and questions per epoch.
    pub max_samples: usize,
    pub max_gen_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_samples: 40, max_gen_len: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub samples: usize,
    pub options: ProbeOptions,
    /// Optional synthetic targets `source·W + σ·noise`, one per level.
    pub noise_ladder: Option<Vec<f64>>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { samples: 200, options: ProbeOptions::default(), noise_ladder: None }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub samples: usize,
    pub k: usize,
    pub metric: Metric,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self { samples: 100, k: DEFAULT_K, metric: Metric::Cosine }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub samples: usize,
    pub max_unique_prompts: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { samples: 1000, max_unique_prompts: 20 }
    }
}

/// Everything a run depends on. Two runs with equal [`config_hash`] produce
/// identical `metrics.csv` files in single-thread mode.
///
/// [`config_hash`]: RunConfig::config_hash
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: ExperimentKind,
    pub pipeline: PipelineKind,
    pub bundle: BundleRef,
    pub qformer: QFormerConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: EpochPlan,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset: DatasetRef,
    pub output_dir: PathBuf,
    pub pipeline_options: PipelineOptions,
    /// QFormer checkpoint to evaluate or probe instead of training one.
    pub checkpoint: Option<PathBuf>,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
    pub align: AlignConfig,
    pub bench: BenchConfig,
    /// Write wall-clock seconds into `metrics.csv`. Off by default so the
    /// file is reproducible bitwise; timings always go to `summary.json`.
    pub record_seconds: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentKind::SingleTaskCaption,
            pipeline: PipelineKind::Grounded,
            bundle: BundleRef::default(),
            qformer: QFormerConfig::default(),
            optimizer: OptimizerConfig::default(),
            epochs: EpochPlan::default(),
            batch_size: 16,
            seed: 0,
            dataset: DatasetRef::default(),
            output_dir: PathBuf::from("runs/default"),
            pipeline_options: PipelineOptions::default(),
            checkpoint: None,
            eval: EvalConfig::default(),
            probe: ProbeConfig::default(),
            align: AlignConfig::default(),
            bench: BenchConfig::default(),
            record_seconds: false,
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    pub fn for_experiment(experiment: ExperimentKind) -> Self {
        Self { experiment, ..Self::default() }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| cfg_err(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 over the canonical JSON of everything except `output_dir`.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.qformer.validate()?;
        self.bundle.frozen.validate()?;
        self.bundle.recipe.validate()?;
        self.optimizer.adamw().validate()?;
        self.dataset.split.validate()?;
        if self.batch_size == 0 {
            return Err(cfg_err("batch_size must be at least 1"));
        }
        if self.dataset.path.is_none() && self.dataset.n_scenes < MIN_SCENES {
            return Err(cfg_err(format!("dataset.n_scenes must be at least {MIN_SCENES}")));
        }
        if self.eval.max_samples == 0 || self.eval.max_gen_len == 0 {
            return Err(cfg_err("eval.max_samples and eval.max_gen_len must be at least 1"));
        }
        let e = &self.epochs;
        let need = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(cfg_err(format!("{} needs {what}", self.experiment.name())))
            }
        };
        match self.experiment {
            ExperimentKind::SingleTaskCaption | ExperimentKind::SingleTaskVqa | ExperimentKind::LayerSweep => {
                need(e.train >= 1, "epochs.train >= 1")?
            }
            ExperimentKind::Multitask | ExperimentKind::GroundingAblation => {
                need(e.pretrain >= 1 && e.finetune >= 1, "epochs.pretrain >= 1 and epochs.finetune >= 1")?
            }
            ExperimentKind::ZeroShot => {
                need(!self.dataset.split.holdout.is_empty(), "a non-empty dataset.split.holdout")?;
                if self.checkpoint.is_none() {
                    need(e.pretrain >= 1 && e.finetune >= 1, "epochs.pretrain >= 1 and epochs.finetune >= 1")?
                }
            }
            ExperimentKind::BenchTime => {
                need(e.measured >= 5, "epochs.measured >= 5")?;
                need(self.bench.samples >= 1, "bench.samples >= 1")?
            }
            ExperimentKind::Probe => {
                need(self.probe.samples >= 2, "probe.samples >= 2")?;
                if self.checkpoint.is_none() {
                    need(e.train >= 1, "epochs.train >= 1")?
                }
                if let Some(levels) = &self.probe.noise_ladder {
                    need(
                        !levels.is_empty() && levels.iter().all(|s| s.is_finite() && *s >= 0.0),
                        "finite non-negative probe.noise_ladder levels",
                    )?
                }
            }
            ExperimentKind::Align => {
                need(self.align.k >= 1 && self.align.samples > self.align.k, "1 <= align.k < align.samples")?
            }
        }
        if self.experiment == ExperimentKind::GroundingAblation && self.pipeline != PipelineKind::Grounded {
            return Err(cfg_err("grounding-ablation runs the grounded pipeline; set pipeline to grounded"));
        }
        if self.experiment == ExperimentKind::LayerSweep && self.bundle.frozen.lm_kind != LmKind::DecoderOnly {
            return Err(cfg_err(
                "layer-sweep injects into a decoder-only LM; set bundle.frozen.lm_kind to decoder-only",
            ));
        }
        let q = &self.qformer;
        let f = &self.bundle.frozen;
        if q.vision_dim != f.vision.block.model_dim || q.lm_dim != f.lm.model_dim || q.vocab_size != f.lm.vocab_size {
            return Err(cfg_err(format!(
                "qformer dims (vision {}, lm {}, vocab {}) do not match the bundle (vision {}, lm {}, vocab {})",
                q.vision_dim, q.lm_dim, q.vocab_size, f.vision.block.model_dim, f.lm.model_dim, f.lm.vocab_size
            )));
        }
        Ok(())
    }
}
