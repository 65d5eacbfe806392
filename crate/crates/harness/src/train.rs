//! Shared machinery: run setup, per-epoch example lists, the training loop
//! and validation metrics.

use std::collections::BTreeMap;
use std::time::Instant;

use qlab_core::data::{
    bleu4, exact_match_accuracy, gen_dataset, load_dataset, strip_special, Dataset, Sample, Split, Task, Vocab,
    CAPTION_PROMPTS,
};
use qlab_core::exec;
use qlab_core::frozen::{build_frozen_bundle, build_or_load, FrozenBundle};
use qlab_core::optim::AdamW;
use qlab_core::params::sum_grads;
use qlab_core::pipelines::{generate_with, prepare, sample_loss, EncoderCache, PipelineKind, PipelineOptions};
use qlab_core::qformer::QFormerState;
use qlab_core::{Error, Graph, Result, Rng, Tensor};

use crate::config::RunConfig;
use crate::record::{fingerprint_hex, EpochRecord};

/// rng stream ids, one per purpose, derived from `RunConfig::seed`.
pub(crate) const STREAM_EPOCH: u64 = 0x100;
pub(crate) const STREAM_BENCH: u64 = 0x200;
pub(crate) const STREAM_PROBE: u64 = 0x300;

pub fn load_bundle(cfg: &RunConfig) -> Result<FrozenBundle> {
    let b = &cfg.bundle;
    let bundle = match (&b.path, &b.cache_dir) {
        (Some(p), _) => FrozenBundle::load(p)?,
        (None, Some(cache)) => {
            std::fs::create_dir_all(cache).map_err(|e| Error::io(cache, e))?;
            build_or_load(b.seed, &b.frozen, &b.recipe, cache)?
        }
        (None, None) => build_frozen_bundle(b.seed, &b.frozen, &b.recipe)?,
    };
    let q = &cfg.qformer;
    if q.vision_dim != bundle.vision_dim()
        || q.lm_dim != bundle.model_dim()
        || q.vocab_size != bundle.config.lm.vocab_size
    {
        return Err(Error::Config(format!(
            "qformer dims (vision {}, lm {}, vocab {}) do not match the loaded bundle (vision {}, lm {}, vocab {})",
            q.vision_dim,
            q.lm_dim,
            q.vocab_size,
            bundle.vision_dim(),
            bundle.model_dim(),
            bundle.config.lm.vocab_size
        )));
    }
    Ok(bundle)
}

pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.dataset;
    let ds = match &d.path {
        Some(p) => load_dataset(p)?,
        None => gen_dataset(d.seed, d.n_scenes, &d.split)?,
    };
    ds.audit()?;
    Ok(ds)
}

/// Frozen bundle, dataset and precomputed vision features for one run.
pub struct Setup {
    pub bundle: FrozenBundle,
    pub data: Dataset,
    pub vocab: Vocab,
    pub caption_prompts: Vec<Vec<usize>>,
    features: [Vec<Tensor<f32>>; 3],
    pub fingerprint_before: u64,
}

impl Setup {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let bundle = load_bundle(cfg)?;
        bundle.verify()?;
        let data = load_data(cfg)?;
        Self::from_parts(bundle, data)
    }

    pub fn from_parts(bundle: FrozenBundle, data: Dataset) -> Result<Self> {
        let vocab = Vocab::new();
        let caption_prompts = CAPTION_PROMPTS.iter().map(|p| vocab.tokenize(p, true)).collect::<Result<_>>()?;
        let feats =
            |s: &[Sample]| exec::try_map_indexed(s.len(), |i| Ok::<_, Error>(bundle.vision_encode(&s[i].image)?.0));
        let features = [feats(&data.train)?, feats(&data.val)?, feats(&data.test)?];
        let fingerprint_before = bundle.current_fingerprint();
        Ok(Self { bundle, data, vocab, caption_prompts, features, fingerprint_before })
    }

    pub fn features(&self, split: Split) -> &[Tensor<f32>] {
        match split {
            Split::Train => &self.features[0],
            Split::Val => &self.features[1],
            Split::Test => &self.features[2],
        }
    }

    /// Fails with an audit error if the frozen parameters changed.
    pub fn audit_frozen(&self) -> Result<String> {
        self.bundle.verify()?;
        let now = self.bundle.current_fingerprint();
        if now != self.fingerprint_before {
            return Err(Error::Audit(format!(
                "frozen fingerprint changed during the run: {} -> {}",
                fingerprint_hex(self.fingerprint_before),
                fingerprint_hex(now)
            )));
        }
        Ok(fingerprint_hex(now))
    }
}

/// One training or evaluation item: a sample of some split, its task, the
/// prompt shown to the model and the target sequence.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub split: Split,
    pub sample: usize,
    pub task: Task,
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
}

pub fn task_name(t: Task) -> &'static str {
    match t {
        Task::Caption => "caption",
        Task::Vqa => "vqa",
    }
}

/// Captioning examples with one prompt drawn per sample.
pub fn caption_examples(setup: &Setup, split: Split, rng: &mut Rng) -> Vec<Example> {
    setup
        .data
        .split(split)
        .iter()
        .enumerate()
        .map(|(i, s)| Example {
            split,
            sample: i,
            task: Task::Caption,
            prompt: setup.caption_prompts[rng.below(setup.caption_prompts.len())].clone(),
            target: s.caption_ids.clone(),
        })
        .collect()
}

/// One example per question; the prompt is the question itself.
pub fn vqa_examples(setup: &Setup, split: Split) -> Vec<Example> {
    let mut out = Vec::new();
    for (i, s) in setup.data.split(split).iter().enumerate() {
        for qa in &s.qa {
            out.push(Example {
                split,
                sample: i,
                task: Task::Vqa,
                prompt: qa.question_ids.clone(),
                target: qa.answer_ids.clone(),
            });
        }
    }
    out
}

/// Training examples of one epoch, in the order they are visited.
pub fn epoch_examples(setup: &Setup, tasks: &[Task], seed: u64, epoch: usize) -> Vec<Example> {
    let mut rng = Rng::new(seed).split(STREAM_EPOCH + epoch as u64);
    let mut out = Vec::new();
    for &t in tasks {
        match t {
            Task::Caption => out.extend(caption_examples(setup, Split::Train, &mut rng)),
            Task::Vqa => out.extend(vqa_examples(setup, Split::Train)),
        }
    }
    rng.shuffle(&mut out);
    out
}

#[derive(Clone, Debug, Default)]
pub struct TaskStats {
    pub loss_sum: f64,
    pub count: usize,
    pub encoder_calls: u64,
}

impl TaskStats {
    pub fn mean_loss(&self) -> Option<f64> {
        (self.count > 0).then(|| self.loss_sum / self.count as f64)
    }
}

#[derive(Clone, Debug, Default)]
pub struct EpochStats {
    pub per_task: BTreeMap<&'static str, TaskStats>,
    pub seconds: f64,
    pub encoder_calls: u64,
}

/// The trainable side of a run: QFormer, optimizer and encoder cache.
pub struct Trainer<'a> {
    pub setup: &'a Setup,
    pub kind: PipelineKind,
    pub opts: PipelineOptions,
    pub qf: QFormerState,
    pub opt: AdamW,
    pub cache: EncoderCache,
    pub batch_size: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(setup: &'a Setup, cfg: &RunConfig, kind: PipelineKind, opts: PipelineOptions) -> Result<Self> {
        let qf = QFormerState::new(&cfg.qformer, cfg.seed)?;
        Self::with_state(setup, cfg, kind, opts, qf)
    }

    pub fn with_state(
        setup: &'a Setup,
        cfg: &RunConfig,
        kind: PipelineKind,
        opts: PipelineOptions,
        qf: QFormerState,
    ) -> Result<Self> {
        let opt = AdamW::new(cfg.optimizer.adamw(), &qf.store)?;
        let frozen_names: Vec<&str> = setup.bundle.store.iter().map(|(_, n, _)| n).collect();
        opt.audit(&[setup.bundle.store.uid()], &frozen_names)?;
        Ok(Self {
            setup,
            kind,
            opts,
            qf,
            opt,
            cache: EncoderCache::new(kind == PipelineKind::Grounded),
            batch_size: cfg.batch_size,
        })
    }

    fn features(&self, ex: &Example) -> &Tensor<f32> {
        &self.setup.features(ex.split)[ex.sample]
    }

    /// Grounding inputs for a batch, resolved sequentially through the cache.
    fn prepare_batch(&mut self, batch: &[Example], stats: Option<&mut EpochStats>) -> Result<Vec<Option<Tensor<f32>>>> {
        let mut out = Vec::with_capacity(batch.len());
        let mut calls = Vec::with_capacity(batch.len());
        for ex in batch {
            let before = self.cache.counters().encoder_calls;
            out.push(prepare(self.kind, &self.setup.bundle, &mut self.cache, &ex.prompt, &self.opts)?);
            calls.push((ex.task, self.cache.counters().encoder_calls - before));
        }
        if let Some(stats) = stats {
            for (t, c) in calls {
                stats.per_task.entry(task_name(t)).or_default().encoder_calls += c;
                stats.encoder_calls += c;
            }
        }
        Ok(out)
    }

    /// One pass over `examples` with an optimizer step per batch. The cache
    /// is emptied first, so grounded encoder calls per epoch equal the number
    /// of distinct prompts. Scenes under the compositional holdout abort the
    /// epoch with an audit error.
    pub fn train_epoch(&mut self, examples: &[Example], epoch: usize) -> Result<EpochStats> {
        let start = Instant::now();
        self.cache.clear();
        let mut stats = EpochStats::default();
        let spec = self.setup.data.spec.clone();
        for batch in examples.chunks(self.batch_size) {
            for ex in batch {
                let scene = &self.setup.data.split(ex.split)[ex.sample].scene;
                if ex.split != Split::Train || spec.is_held_out(scene) {
                    return Err(Error::Audit(format!(
                        "scene {} ({} split) is not allowed in a training batch",
                        scene.id,
                        ex.split.name()
                    )));
                }
            }
            let grounding = self.prepare_batch(batch, Some(&mut stats))?;
            let this = &*self;
            let results = exec::try_map_indexed(batch.len(), |i| {
                let ex = &batch[i];
                let mut g = Graph::new();
                let (loss, _, _) = sample_loss(
                    &mut g,
                    this.kind,
                    &this.setup.bundle,
                    &this.qf,
                    this.features(ex),
                    &ex.prompt,
                    &ex.target,
                    grounding[i].as_ref(),
                    &this.opts,
                )?;
                g.backward(loss)?;
                Ok::<_, Error>((g.value(loss).item() as f64, g.param_grads(&this.qf.store)))
            })?;
            let mut sets = Vec::with_capacity(results.len());
            for (ex, (l, gr)) in batch.iter().zip(results) {
                if !l.is_finite() {
                    return Err(Error::Training(format!("loss diverged at epoch {epoch}: {l}")));
                }
                let s = stats.per_task.entry(task_name(ex.task)).or_default();
                s.loss_sum += l;
                s.count += 1;
                sets.push(gr);
            }
            let mut grads = sum_grads(sets);
            let inv = 1.0 / batch.len() as f32;
            for g in grads.iter_mut().flatten() {
                g.iter_mut().for_each(|x| *x *= inv);
            }
            self.opt.step(&mut self.qf.store, &grads).map_err(|e| match e {
                Error::Training(m) => Error::Training(format!("epoch {epoch}: {m}")),
                other => other,
            })?;
        }
        stats.seconds = start.elapsed().as_secs_f64();
        Ok(stats)
    }

    /// Mean teacher-forced loss per task without updating anything.
    pub fn eval_loss(&self, examples: &[Example]) -> Result<BTreeMap<&'static str, TaskStats>> {
        let mut cache = EncoderCache::new(self.kind == PipelineKind::Grounded);
        let mut grounding = Vec::with_capacity(examples.len());
        for ex in examples {
            grounding.push(prepare(self.kind, &self.setup.bundle, &mut cache, &ex.prompt, &self.opts)?);
        }
        let losses = exec::try_map_indexed(examples.len(), |i| {
            let ex = &examples[i];
            let mut g = Graph::no_grad();
            let (loss, _, _) = sample_loss(
                &mut g,
                self.kind,
                &self.setup.bundle,
                &self.qf,
                self.features(ex),
                &ex.prompt,
                &ex.target,
                grounding[i].as_ref(),
                &self.opts,
            )?;
            Ok::<_, Error>(g.value(loss).item() as f64)
        })?;
        let mut out: BTreeMap<&'static str, TaskStats> = BTreeMap::new();
        for (ex, l) in examples.iter().zip(losses) {
            let s = out.entry(task_name(ex.task)).or_default();
            s.loss_sum += l;
            s.count += 1;
        }
        Ok(out)
    }

    /// Greedy generations for `examples`, specials stripped.
    pub fn generate_all(&self, examples: &[Example], max_len: usize) -> Result<Vec<Vec<usize>>> {
        let mut cache = EncoderCache::new(self.kind == PipelineKind::Grounded);
        let mut grounding = Vec::with_capacity(examples.len());
        for ex in examples {
            grounding.push(prepare(self.kind, &self.setup.bundle, &mut cache, &ex.prompt, &self.opts)?);
        }
        exec::try_map_indexed(examples.len(), |i| {
            let ex = &examples[i];
            let out = generate_with(
                self.kind,
                &self.setup.bundle,
                &self.qf,
                self.features(ex),
                &ex.prompt,
                grounding[i].as_ref(),
                max_len,
                &self.opts,
            )?;
            Ok::<_, Error>(strip_special(&out.generated_ids.unwrap_or_default()))
        })
    }

    /// Corpus BLEU-4 on up to `max` validation captions (first prompt).
    pub fn caption_bleu(&self, split: Split, max: usize, max_len: usize) -> Result<f64> {
        let examples: Vec<Example> = self
            .setup
            .data
            .split(split)
            .iter()
            .enumerate()
            .take(max)
            .map(|(i, s)| Example {
                split,
                sample: i,
                task: Task::Caption,
                prompt: self.setup.caption_prompts[0].clone(),
                target: s.caption_ids.clone(),
            })
            .collect();
        if examples.is_empty() {
            return Err(Error::Config(format!("{} split has no samples to evaluate", split.name())));
        }
        let cands = self.generate_all(&examples, max_len)?;
        let refs: Vec<Vec<usize>> = examples.iter().map(|e| e.target.clone()).collect();
        bleu4(&cands, &refs)
    }

    /// Exact-match accuracy on up to `max` questions of `examples`.
    pub fn vqa_accuracy(&self, examples: &[Example], max: usize, max_len: usize) -> Result<f64> {
        let examples = &examples[..examples.len().min(max)];
        let preds = self.generate_all(examples, max_len)?;
        let answers: Vec<Vec<usize>> = examples.iter().map(|e| e.target.clone()).collect();
        exact_match_accuracy(&preds, &answers)
    }
}

pub fn row(epoch: usize, phase: &str, task: &str) -> EpochRecord {
    EpochRecord {
        epoch,
        phase: phase.to_string(),
        task: task.to_string(),
        loss: None,
        bleu4: None,
        accuracy: None,
        encoder_calls: 0,
        seconds: 0.0,
    }
}
