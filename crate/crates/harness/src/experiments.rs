use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use qlab_core::analysis::{
    alignment_heatmap, layer_target_sweep, probe_regress, save_activations, ProbeEntry, ProbeReport, RepresentationSet,
};
use qlab_core::data::{Split, Task};
use qlab_core::exec;
use qlab_core::frozen::LmKind;
use qlab_core::nn::sweep_layers;
use qlab_core::pipelines::{prepare, EncoderCache, PipelineKind, PipelineOptions};
use qlab_core::qformer::QFormerState;
use qlab_core::tensor::DType;
use qlab_core::{Error, Result, Rng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentKind, RunConfig};
use crate::record::{fingerprint_hex, read_manifest, EpochRecord, RunDir, RunRecord, RunSummary};
use crate::train::{
    caption_examples, epoch_examples, row, task_name, vqa_examples, EpochStats, Example, Setup, Trainer, STREAM_BENCH,
    STREAM_PROBE,
};

/// Runs `cfg.experiment` and writes its outputs under `cfg.output_dir`.
pub fn run(cfg: &RunConfig) -> Result<RunRecord> {
    cfg.validate()?;
    match cfg.experiment {
        ExperimentKind::SingleTaskCaption | ExperimentKind::SingleTaskVqa => train_single_task(cfg),
        ExperimentKind::Multitask => train_multitask(cfg),
        ExperimentKind::ZeroShot => run_zero_shot(cfg),
        ExperimentKind::Probe => run_probe_suite(cfg),
        ExperimentKind::Align => run_alignment(cfg),
        ExperimentKind::BenchTime => run_bench(cfg),
        ExperimentKind::GroundingAblation => grounding_ablation(cfg),
        ExperimentKind::LayerSweep => run_layer_sweep(cfg),
    }
}

/// Re-executes the run stored in `run_dir` into `out` in single-thread mode.
/// The stored config must still hash to the value in its manifest.
pub fn rerun(run_dir: &Path, out: &Path) -> Result<RunRecord> {
    let mut cfg = RunConfig::load(&run_dir.join("config.json"))?;
    let manifest = read_manifest(run_dir)?;
    let want = manifest["config_hash"].as_str().unwrap_or_default();
    if cfg.config_hash() != want {
        return Err(Error::Audit(format!(
            "config.json hashes to {} but the manifest records {want}",
            cfg.config_hash()
        )));
    }
    cfg.output_dir = out.to_path_buf();
    let _guard = SingleThread::enter();
    run(&cfg)
}

/// Forces sequential execution until dropped.
pub struct SingleThread {
    prev: bool,
}

impl SingleThread {
    pub fn enter() -> Self {
        let prev = exec::is_single_thread();
        exec::set_single_thread(true);
        Self { prev }
    }
}

impl Drop for SingleThread {
    fn drop(&mut self) {
        exec::set_single_thread(self.prev);
    }
}

fn require(cfg: &RunConfig, kinds: &[ExperimentKind]) -> Result<()> {
    if !kinds.contains(&cfg.experiment) {
        let names: Vec<&str> = kinds.iter().map(|k| k.name()).collect();
        return Err(Error::Config(format!(
            "experiment {} given where one of {names:?} is expected",
            cfg.experiment.name()
        )));
    }
    Ok(())
}

fn new_record(cfg: &RunConfig, setup: &Setup) -> RunRecord {
    RunRecord {
        experiment: cfg.experiment.name().to_string(),
        pipeline: cfg.pipeline.name().to_string(),
        config_hash: cfg.config_hash(),
        bundle_fingerprint: fingerprint_hex(setup.bundle.fingerprint),
        fingerprint_before: fingerprint_hex(setup.fingerprint_before),
        fingerprint_after: String::new(),
        trainable_params: Vec::new(),
        epochs: Vec::new(),
        summary: RunSummary::default(),
    }
}

fn open_dir(cfg: &RunConfig) -> Result<RunDir> {
    let mut dir = RunDir::create(&cfg.output_dir)?;
    dir.write("config.json", &cfg.to_json())?;
    Ok(dir)
}

fn finish(cfg: &RunConfig, setup: &Setup, dir: RunDir, mut record: RunRecord, started: Instant) -> Result<RunRecord> {
    record.fingerprint_after = setup.audit_frozen()?;
    record.summary.wall_seconds = started.elapsed().as_secs_f64();
    dir.finish(cfg, &record)?;
    log::info!("{} run complete: {}", record.experiment, cfg.output_dir.display());
    Ok(record)
}

fn save_checkpoint(dir: &mut RunDir, name: &str, qf: &QFormerState) -> Result<()> {
    qf.save(&dir.path.join(name))?;
    dir.note(name);
    Ok(())
}

fn total_loss(stats: &std::collections::BTreeMap<&'static str, crate::train::TaskStats>) -> Option<f64> {
    let (s, n) = stats.values().fold((0.0, 0), |(s, n), t| (s + t.loss_sum, n + t.count));
    (n > 0).then(|| s / n as f64)
}

fn order_digest(examples: &[Example]) -> String {
    let mut h = Sha256::new();
    for e in examples {
        h.update((e.sample as u64).to_le_bytes());
        h.update([e.task as u8]);
        for &t in &e.prompt {
            h.update((t as u32).to_le_bytes());
        }
        h.update([0xff]);
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything one training schedule produced.
pub struct Fit {
    pub rows: Vec<EpochRecord>,
    pub summary: RunSummary,
    pub qf: QFormerState,
    pub trainable_params: Vec<String>,
    /// Digest of each epoch's example order (index 0 is the init pass).
    pub order: Vec<String>,
}

struct Validation {
    bleu4: Option<f64>,
    accuracy: Option<f64>,
}

fn validate_tasks(t: &Trainer, cfg: &RunConfig, tasks: &[Task]) -> Result<Validation> {
    let mut v = Validation { bleu4: None, accuracy: None };
    for &task in tasks {
        match task {
            Task::Caption => v.bleu4 = Some(t.caption_bleu(Split::Val, cfg.eval.max_samples, cfg.eval.max_gen_len)?),
            Task::Vqa => {
                let ex = vqa_examples(t.setup, Split::Val);
                if ex.is_empty() {
                    return Err(Error::Config("validation split has no questions".into()));
                }
                v.accuracy = Some(t.vqa_accuracy(&ex, cfg.eval.max_samples, cfg.eval.max_gen_len)?);
            }
        }
    }
    Ok(v)
}

fn epoch_rows(
    epoch: usize,
    phase: &str,
    trained: &[Task],
    stats: &EpochStats,
    val: &Validation,
    all: &[Task],
) -> Vec<EpochRecord> {
    all.iter()
        .map(|&task| {
            let name = task_name(task);
            let mut r = row(epoch, phase, name);
            if trained.contains(&task) {
                let s = stats.per_task.get(name).cloned().unwrap_or_default();
                r.loss = s.mean_loss();
                r.encoder_calls = s.encoder_calls;
            }
            r.seconds = stats.seconds;
            match task {
                Task::Caption => r.bleu4 = val.bleu4,
                Task::Vqa => r.accuracy = val.accuracy,
            }
            r
        })
        .collect()
}

/// A list of (phase name, tasks trained, epochs) run back to back on one
/// QFormer. Validation covers `eval_tasks` after every epoch.
pub fn fit(
    setup: &Setup,
    cfg: &RunConfig,
    trainer: &mut Trainer,
    phases: &[(&str, Vec<Task>, usize)],
    eval_tasks: &[Task],
    prefix: &str,
) -> Result<Fit> {
    let label = |p: &str| {
        if prefix.is_empty() {
            p.to_string()
        } else {
            format!("{prefix}:{p}")
        }
    };
    let mut rows = Vec::new();
    let mut summary = RunSummary::default();
    let mut order = Vec::new();

    let first_tasks = &phases[0].1;
    let init = epoch_examples(setup, first_tasks, cfg.seed, 0);
    order.push(order_digest(&init));
    let init_loss = trainer.eval_loss(&init)?;
    let val = validate_tasks(trainer, cfg, eval_tasks)?;
    let stats = EpochStats { per_task: init_loss.clone(), ..EpochStats::default() };
    rows.extend(epoch_rows(0, &label("init"), first_tasks, &stats, &val, eval_tasks));
    summary.initial_train_loss = total_loss(&init_loss);

    let mut epoch = 0;
    let mut best: Option<(f64, usize)> = None;
    for (phase, tasks, n) in phases {
        for _ in 0..*n {
            epoch += 1;
            let examples = epoch_examples(setup, tasks, cfg.seed, epoch);
            order.push(order_digest(&examples));
            let stats = trainer.train_epoch(&examples, epoch)?;
            let val = validate_tasks(trainer, cfg, eval_tasks)?;
            summary.final_train_loss = total_loss(&stats.per_task);
            log::info!(
                "{} epoch {epoch}: loss {:.4} bleu4 {:?} accuracy {:?} encoder_calls {}",
                label(phase),
                summary.final_train_loss.unwrap_or(f64::NAN),
                val.bleu4,
                val.accuracy,
                stats.encoder_calls
            );
            if let Some(b) = val.bleu4 {
                summary.best_bleu4 = Some(summary.best_bleu4.map_or(b, |x: f64| x.max(b)));
            }
            if let Some(a) = val.accuracy {
                summary.best_accuracy = Some(summary.best_accuracy.map_or(a, |x: f64| x.max(a)));
            }
            // Best epoch by accuracy when VQA is evaluated, BLEU-4 otherwise;
            // ties keep the earlier epoch.
            let score = val.accuracy.or(val.bleu4).unwrap_or(f64::NEG_INFINITY);
            if best.is_none_or(|(s, _)| score > s) {
                best = Some((score, epoch));
            }
            rows.extend(epoch_rows(epoch, &label(phase), tasks, &stats, &val, eval_tasks));
        }
        summary.phase_boundaries.push((label(phase), epoch));
    }
    summary.best_epoch = best.map(|(_, e)| e);
    Ok(Fit { rows, summary, qf: trainer.qf.clone(), trainable_params: trainer.opt.param_names().to_vec(), order })
}

fn single_task_of(kind: ExperimentKind) -> Task {
    match kind {
        ExperimentKind::SingleTaskVqa => Task::Vqa,
        _ => Task::Caption,
    }
}

/// Trains one pipeline on one task for `epochs.train` epochs.
pub fn train_single_task(cfg: &RunConfig) -> Result<RunRecord> {
    cfg.validate()?;
    require(cfg, &[ExperimentKind::SingleTaskCaption, ExperimentKind::SingleTaskVqa])?;
    let started = Instant::now();
    let setup = Setup::new(cfg)?;
    let mut dir = open_dir(cfg)?;
    let task = single_task_of(cfg.experiment);
    let mut trainer = Trainer::new(&setup, cfg, cfg.pipeline, cfg.pipeline_options.clone())?;
    let fit = fit(&setup, cfg, &mut trainer, &[("train", vec![task], cfg.epochs.train)], &[task], "")?;
    save_checkpoint(&mut dir, "checkpoint", &fit.qf)?;
    let mut record = new_record(cfg, &setup);
    record.epochs = fit.rows;
    record.summary = fit.summary;
    record.trainable_params = fit.trainable_params;
    finish(cfg, &setup, dir, record, started)
}

fn multitask_phases(cfg: &RunConfig) -> Vec<(&'static str, Vec<Task>, usize)> {
    vec![
        ("pretrain", vec![Task::Caption], cfg.epochs.pretrain),
        ("finetune", vec![Task::Caption, Task::Vqa], cfg.epochs.finetune),
    ]
}

/// Captioning pretraining followed by mixed captioning + VQA finetuning;
/// caption prompts are drawn per iteration.
pub fn train_multitask(cfg: &RunConfig) -> Result<RunRecord> {
    cfg.validate()?;
    require(cfg, &[ExperimentKind::Multitask])?;
    let started = Instant::now();
    let setup = Setup::new(cfg)?;
    let mut dir = open_dir(cfg)?;
    let mut trainer = Trainer::new(&setup, cfg, cfg.pipeline, cfg.pipeline_options.clone())?;
    let fit = fit(&setup, cfg, &mut trainer, &multitask_phases(cfg), &[Task::Caption, Task::Vqa], "")?;
    save_checkpoint(&mut dir, "checkpoint", &fit.qf)?;
    let mut record = new_record(cfg, &setup);
    record.epochs = fit.rows;
    record.summary = fit.summary;
    record.trainable_params = fit.trainable_params;
    finish(cfg, &setup, dir, record, started)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub holdout: Vec<String>,
    pub holdout_scenes: usize,
    pub questions: usize,
    pub accuracy: f64,
    /// `1 / |answer vocabulary|`.
    pub random_baseline: f64,
    pub answer_vocabulary: Vec<String>,
}

/// Distinct answers over every question of every split.
pub fn answer_vocabulary(setup: &Setup) -> Vec<Vec<usize>> {
    let set: BTreeSet<Vec<usize>> = Split::ALL
        .iter()
        .flat_map(|&s| setup.data.split(s).iter())
        .flat_map(|s| s.qa.iter().map(|q| q.answer_ids.clone()))
        .collect();
    set.into_iter().collect()
}

/// VQA accuracy on test scenes holding a held-out (shape, color) pair. The
/// dataset audit runs first; training batches were scanned as they ran.
pub fn zero_shot_eval(setup: &Setup, cfg: &RunConfig, qf: QFormerState) -> Result<ZeroShotReport> {
    setup.data.audit()?;
    let spec = &setup.data.spec;
    if spec.holdout.is_empty() {
        return Err(Error::Config("zero-shot evaluation needs a non-empty holdout".into()));
    }
    let mut examples = Vec::new();
    let mut scenes = 0;
    for (i, s) in setup.data.test.iter().enumerate() {
        if !spec.is_held_out(&s.scene) {
            continue;
        }
        scenes += 1;
        for qa in &s.qa {
            examples.push(Example {
                split: Split::Test,
                sample: i,
                task: Task::Vqa,
                prompt: qa.question_ids.clone(),
                target: qa.answer_ids.clone(),
            });
        }
    }
    if examples.is_empty() {
        return Err(Error::Config("no held-out test questions; increase dataset.n_scenes".into()));
    }
    let trainer = Trainer::with_state(setup, cfg, cfg.pipeline, cfg.pipeline_options.clone(), qf)?;
    let accuracy = trainer.vqa_accuracy(&examples, usize::MAX, cfg.eval.max_gen_len)?;
    let vocab = answer_vocabulary(setup);
    Ok(ZeroShotReport {
        holdout: spec.holdout.iter().map(|(s, c)| format!("{} {}", c.word(), s.word())).collect(),
        holdout_scenes: scenes,
        questions: examples.len(),
        accuracy,
        random_baseline: 1.0 / vocab.len() as f64,
        answer_vocabulary: vocab.iter().map(|a| setup.vocab.detokenize(a)).collect::<Result<_>>()?,
    })
}

fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<QFormerState> {
    let qf = QFormerState::load(path)?;
    if qf.config() != &cfg.qformer {
        return Err(Error::Config(format!(
            "checkpoint {} was trained with a different qformer config",
            path.display()
        )));
    }
    Ok(qf)
}

/// Multitask training (or a given checkpoint) followed by zero-shot
/// evaluation on the compositional holdout.
pub fn run_zero_shot(cfg: &RunConfig) -> Result<RunRecord> {
    cfg.validate()?;
    require(cfg, &[ExperimentKind::ZeroShot])?;
    let started = Instant::now();
    let setup = Setup::new(cfg)?;
    let mut dir = open_dir(cfg)?;
    let mut record = new_record(cfg, &setup);
    let qf = match &cfg.checkpoint {
        Some(p) => load_checkpoint(cfg, p)?,
        None => {
            let mut trainer = Trainer::new(&setup, cfg, cfg.pipeline, cfg.pipeline_options.clone())?;
            let fit = fit(&setup, cfg, &mut trainer, &multitask_phases(cfg), &[Task::Caption, Task::Vqa], "")?;
            save_checkpoint(&mut dir, "checkpoint", &fit.qf)?;
            record.epochs = fit.rows;
            record.summary = fit.summary;
            record.trainable_params = fit.trainable_params;
            fit.qf
        }
    };
    let report = zero_shot_eval(&setup, cfg, qf)?;
    log::info!(
        "zero-shot accuracy {:.4} on {} questions (random baseline {:.4})",
        report.accuracy,
        report.questions,
        report.random_baseline
    );
    dir.write_json("zero_shot.json", &report)?;
    record.summary.details = serde_json::to_value(&report)?;
    finish(cfg, &setup, dir, record, started)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineTiming {
    pub pipeline: String,
    pub warmup_seconds: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub median_seconds: f64,
    pub encoder_calls_per_epoch: Vec<u64>,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub samples: usize,
    pub unique_prompts: usize,
    pub warmup_epochs: usize,
    pub measured_epochs: usize,
    pub baseline: PipelineTiming,
    pub candidate: PipelineTiming,
    /// `candidate median / baseline median`.
    pub ratio: f64,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// The fixed benchmark workload: the first `bench.samples` examples of a
/// seeded shuffle of all training captions and questions.
pub fn bench_examples(setup: &Setup, cfg: &RunConfig) -> Result<Vec<Example>> {
    let mut rng = Rng::new(cfg.seed).split(STREAM_BENCH);
    let mut pool = caption_examples(setup, Split::Train, &mut rng);
    pool.extend(vqa_examples(setup, Split::Train));
    rng.shuffle(&mut pool);
    if pool.len() < cfg.bench.samples {
        return Err(Error::Config(format!(
            "bench needs {} training examples but the dataset yields {}; increase dataset.n_scenes",
            cfg.bench.samples,
            pool.len()
        )));
    }
    pool.truncate(cfg.bench.samples);
    let unique: BTreeSet<&Vec<usize>> = pool.iter().map(|e| &e.prompt).collect();
    if unique.len() > cfg.bench.max_unique_prompts {
        return Err(Error::Config(format!(
            "bench workload has {} unique prompts, more than bench.max_unique_prompts = {}",
            unique.len(),
            cfg.bench.max_unique_prompts
        )));
    }
    Ok(pool)
}

/// Per-epoch training time of two pipelines on one workload, epochs
/// interleaved, single-threaded. Identical configs apart from the pipeline.
pub fn bench_pair(
    setup: &Setup,
    cfg: &RunConfig,
    baseline: PipelineKind,
    candidate: PipelineKind,
) -> Result<(BenchReport, Vec<EpochRecord>)> {
    let _guard = SingleThread::enter();
    let examples = bench_examples(setup, cfg)?;
    let unique_prompts = examples.iter().map(|e| &e.prompt).collect::<BTreeSet<_>>().len();
    let mut trainers = [
        Trainer::new(setup, cfg, baseline, cfg.pipeline_options.clone())?,
        Trainer::new(setup, cfg, candidate, cfg.pipeline_options.clone())?,
    ];
    let mut timings: Vec<PipelineTiming> = [baseline, candidate]
        .iter()
        .map(|k| PipelineTiming {
            pipeline: k.name().to_string(),
            warmup_seconds: Vec::new(),
            epoch_seconds: Vec::new(),
            median_seconds: 0.0,
            encoder_calls_per_epoch: Vec::new(),
            losses: Vec::new(),
        })
        .collect();
    let mut rows = Vec::new();
    let total = cfg.epochs.warmup + cfg.epochs.measured;
    for epoch in 1..=total {
        let measured = epoch > cfg.epochs.warmup;
        let order: [usize; 2] = if epoch % 2 == 1 { [0, 1] } else { [1, 0] };
        for side in order {
            let stats = trainers[side].train_epoch(&examples, epoch)?;
            if measured && stats.seconds < 0.010 {
                return Err(Error::Config(format!(
                    "epoch took {:.4} s, below the 10 ms timer floor; raise bench.samples",
                    stats.seconds
                )));
            }
            let loss = total_loss(&stats.per_task).unwrap_or(f64::NAN);
            let t = &mut timings[side];
            if measured {
                t.epoch_seconds.push(stats.seconds);
            } else {
                t.warmup_seconds.push(stats.seconds);
            }
            t.encoder_calls_per_epoch.push(stats.encoder_calls);
            t.losses.push(loss);
            let mut r =
                row(epoch, &format!("{}:{}", t.pipeline, if measured { "measured" } else { "warmup" }), "mixed");
            r.loss = Some(loss);
            r.encoder_calls = stats.encoder_calls;
            r.seconds = stats.seconds;
            rows.push(r);
        }
    }
    for t in &mut timings {
        t.median_seconds = median(&t.epoch_seconds);
    }
    let [b, c]: [PipelineTiming; 2] = timings.try_into().expect("two pipelines");
    let ratio = c.median_seconds / b.median_seconds;
    Ok((
        BenchReport {
            samples: examples.len(),
            unique_prompts,
            warmup_epochs: cfg.epochs.warmup,
            measured_epochs: cfg.epochs.measured,
            baseline: b,
            candidate: c,
            ratio,
        },
        rows,
    ))
}

/// Standard vs grounded epoch time; see [`bench_pair`].
pub fn bench_epoch_time(setup: &Setup, cfg: &RunConfig) -> Result<(BenchReport, Vec<EpochRecord>)> {
    bench_pair(setup, cfg, PipelineKind::Standard, PipelineKind::Grounded)
}

fn run_bench(cfg: &RunConfig) -> Result<RunRecord> {
    require(cfg, &[ExperimentKind::BenchTime])?;
    let started = Instant::now();
    let setup = Setup::new(cfg)?;
    let mut dir = open_dir(cfg)?;
    let (report, rows) = bench_epoch_time(&setup, cfg)?;
    log::info!(
        "median epoch: standard {:.3} s, grounded {:.3} s, ratio {:.3}",
        report.baseline.median_seconds,
        report.candidate.median_seconds,
        report.ratio
    );
    dir.write_json("bench.json", &report)?;
    let mut record = new_record(cfg, &setup);
    record.epochs = rows;
    record.summary.details = serde_json::to_value(&report)?;
    finish(cfg, &setup, dir, record, started)
}

/// Grounded multitask training twice on matched seeds: with grounding rows
/// and with the QFormer's grounding input forced empty.
pub fn grounding_ablation(cfg: &RunConfig) -> Result<RunRecord> {
    cfg.validate()?;
    require(cfg, &[ExperimentKind::GroundingAblation])?;
    let started = Instant::now();
    let setup = Setup::new(cfg)?;
    let mut dir = open_dir(cfg)?;
    let phases = multitask_phases(cfg);
    let tasks = [Task::Caption, Task::Vqa];
    let mut arms = Vec::new();
    for (name, empty) in [("grounded", false), ("ablated", true)] {
        let opts = PipelineOptions { empty_grounding: empty, ..cfg.pipeline_options.clone() };
        let mut trainer = Trainer::new(&setup, cfg, PipelineKind::Grounded, opts)?;
        arms.push((name, fit(&setup, cfg, &mut trainer, &phases, &tasks, name)?));
    }
    if arms[0].1.order != arms[1].1.order {
        return Err(Error::Audit("ablation arms saw different data orders".into()));
    }
    let curve = |fit: &Fit| -> Vec<(usize, String, Option<f64>, Option<f64>)> {
        fit.rows
            .iter()
            .filter(|r| r.task == "vqa")
            .map(|r| {
                let loss = fit
                    .rows
                    .iter()
                    .filter(|x| x.epoch == r.epoch && x.loss.is_some())
                    .map(|x| x.loss.unwrap())
                    .sum::<f64>();
                let phase = r.phase.split_once(':').map_or(r.phase.clone(), |(_, p)| p.to_string());
                (r.epoch, phase, r.accuracy, Some(loss))
            })
            .collect()
    };
    let (g, a) = (curve(&arms[0].1), curve(&arms[1].1));
    let mut csv =
        String::from("epoch,phase,grounded_vqa_accuracy,ablated_vqa_accuracy,grounded_loss_sum,ablated_loss_sum\n");
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (x, y) in g.iter().zip(&a) {
        csv.push_str(&format!("{},{},{},{},{},{}\n", x.0, x.1, f(x.2), f(y.2), f(x.3), f(y.3)));
    }
    dir.write("ablation_curves.csv", &csv)?;
    let mut record = new_record(cfg, &setup);
    let final_acc = |fit: &Fit| fit.rows.iter().rev().find(|r| r.task == "vqa").and_then(|r| r.accuracy);
    record.summary.details = serde_json::json!({
        "grounded": { "final_vqa_accuracy": final_acc(&arms[0].1), "summary": arms[0].1.summary },
        "ablated": { "final_vqa_accuracy": final_acc(&arms[1].1), "summary": arms[1].1.summary },
        "data_order_digest": arms[0].1.order,
    });
    for (name, fit) in arms {
        save_checkpoint(&mut dir, &format!("checkpoint-{name}"), &fit.qf)?;
        record.trainable_params = fit.trainable_params;
        record.summary.phase_boundaries.extend(fit.summary.phase_boundaries);
        record.epochs.extend(fit.rows);
    }
    finish(cfg, &setup, dir, record, started)
}

/// Mean over query rows of the QFormer output for each corpus sample,
/// prompted with the first caption prompt.
pub fn qformer_source(
    setup: &Setup,
    cfg: &RunConfig,
    qf: &QFormerState,
    n: usize,
    label: &str,
) -> Result<RepresentationSet> {
    let prompt = &setup.caption_prompts[0];
    let mut cache = EncoderCache::new(true);
    let grounding = prepare(cfg.pipeline, &setup.bundle, &mut cache, prompt, &cfg.pipeline_options)?;
    let feats = setup.features(Split::Train);
    let rows = exec::try_map_indexed(n, |i| {
        let t = match (&grounding, cfg.pipeline_options.empty_grounding) {
            (Some(gr), false) => qf.grounded_qformer_forward(gr, &feats[i], prompt)?,
            _ => qf.qformer_forward(&feats[i], prompt)?,
        };
        let mut mean = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            for (m, &x) in mean.iter_mut().zip(t.row(r)) {
                *m += x as f64 / t.rows() as f64;
            }
        }
        Ok::<_, Error>(mean)
    })?;
    RepresentationSet::from_rows(&rows, label)
}

fn probe_layers(setup: &Setup) -> Vec<usize> {
    let depth = setup.bundle.lm.depth();
    match setup.bundle.kind() {
        LmKind::EncoderDecoder => vec![0, depth],
        LmKind::DecoderOnly => sweep_layers(depth),
    }
}

fn probe_with(setup: &Setup, cfg: &RunConfig, source: &RepresentationSet, n: usize) -> Result<ProbeReport> {
    let states = exec::try_map_indexed(n, |i| setup.bundle.lm_layer_states(&setup.data.train[i].caption_ids))?;
    let mut report = layer_target_sweep(
        source,
        &states,
        &probe_layers(setup),
        &cfg.probe.options,
        &Rng::new(cfg.seed).split(STREAM_PROBE),
    )?;
    if setup.bundle.kind() == LmKind::EncoderDecoder {
        for e in &mut report.entries {
            e.label = if e.layer == Some(0) { "input embeddings".into() } else { "encoder outputs".into() };
        }
    }
    Ok(report)
}

/// Synthetic targets `z(source)·W + σ·ε` for each noise level, probed from
/// `source`. Losses shrink as σ shrinks.
pub fn noise_ladder(source: &RepresentationSet, levels: &[f64], cfg: &RunConfig) -> Result<Vec<ProbeEntry>> {
    let (z, _) = qlab_core::analysis::standardize_targets(source)?;
    let mut rng = Rng::new(cfg.seed).split(STREAM_PROBE + 1);
    let (n, ds, dt) = (z.len(), z.dim(), 16);
    let w: Vec<f64> = (0..ds * dt).map(|_| rng.normal(0.0, 1.0 / (ds as f64).sqrt())).collect();
    levels
        .iter()
        .enumerate()
        .map(|(j, &sigma)| {
            let mut data = Vec::with_capacity(n * dt);
            for i in 0..n {
                let x = z.row(i);
                for t in 0..dt {
                    let clean: f64 = (0..ds).map(|k| x[k] * w[k * dt + t]).sum();
                    data.push(clean + sigma * rng.normal(0.0, 1.0));
                }
            }
            let target = RepresentationSet::new(n, dt, data, &format!("noise sigma={sigma}"))?;
            probe_regress(source, &target, &cfg.probe.options, &mut rng.split(j as u64))
        })
        .collect()
}

/// Probes fresh and trained QFormer outputs onto LM layer targets.
pub fn run_probe_suite(cfg: &RunConfig) -> Result<RunRecord> {
    cfg.validate()?;
    require(cfg, &[ExperimentKind::Probe])?;
    let started = Instant::now();
    let setup = Setup::new(cfg)?;
    let mut dir = open_dir(cfg)?;
    let mut record = new_record(cfg, &setup);
    let n = cfg.probe.samples.min(setup.data.train.len());
    if n < 2 {
        return Err(Error::Config("probe corpus needs at least 2 training samples".into()));
    }
    let trained = match &cfg.checkpoint {
        Some(p) => load_checkpoint(cfg, p)?,
        None => {
            let mut trainer = Trainer::new(&setup, cfg, cfg.pipeline, cfg.pipeline_options.clone())?;
            let fit = fit(
                &setup,
                cfg,
                &mut trainer,
                &[("train", vec![Task::Caption], cfg.epochs.train)],
                &[Task::Caption],
                "",
            )?;
            save_checkpoint(&mut dir, "checkpoint", &fit.qf)?;
            record.epochs = fit.rows;
            record.summary = fit.summary;
            record.trainable_params = fit.trainable_params;
            fit.qf
        }
    };
    let fresh = QFormerState::new(&cfg.qformer, cfg.seed)?;
    let mut finals = serde_json::Map::new();
    for (name, qf, file) in [("trained", &trained, "probe_report.json"), ("fresh", &fresh, "probe_report_fresh.json")] {
        let source = qformer_source(&setup, cfg, qf, n, &format!("qformer {name}"))?;
        std::fs::create_dir_all(dir.path.join("activations")).map_err(|e| Error::io(&dir.path, e))?;
        save_activations(&dir.path.join(format!("activations/source_{name}.actv")), &source, DType::F32)?;
        dir.note(&format!("activations/source_{name}.actv"));
        let report = probe_with(&setup, cfg, &source, n)?;
        for e in &report.entries {
            log::info!("probe {name} -> {}: final loss {:.4}", e.label, e.final_loss);
        }
        finals.insert(
            name.into(),
            serde_json::Value::Array(
                report
                    .entries
                    .iter()
                    .map(|e| serde_json::json!({ "target": e.label, "layer": e.layer, "final_loss": e.final_loss }))
                    .collect(),
            ),
        );
        dir.write_json(file, &report)?;
        if name == "trained" {
            if let Some(levels) = &cfg.probe.noise_ladder {
                let entries = noise_ladder(&source, levels, cfg)?;
                let ladder =
                    ProbeReport { source: source.label.clone(), options: Some(cfg.probe.options.clone()), entries };
                dir.write_json("probe_noise_ladder.json", &ladder)?;
            }
        }
    }
    record.summary.details = serde_json::Value::Object(finals);
    finish(cfg, &setup, dir, record, started)
}

/// Mutual-KNN heatmap of LM layer aggregates against vision layer
/// aggregates over the first `align.samples` training scenes.
pub fn run_alignment(cfg: &RunConfig) -> Result<RunRecord> {
    cfg.validate()?;
    require(cfg, &[ExperimentKind::Align])?;
    let started = Instant::now();
    let setup = Setup::new(cfg)?;
    let mut dir = open_dir(cfg)?;
    let n = cfg.align.samples.min(setup.data.train.len());
    let samples = &setup.data.train[..n];
    let lm = exec::try_map_indexed(n, |i| setup.bundle.lm_layer_states(&samples[i].caption_ids))?;
    let vit = exec::try_map_indexed(n, |i| Ok::<_, Error>(setup.bundle.vision_encode(&samples[i].image)?.1))?;
    let heatmap = alignment_heatmap(&lm, &vit, cfg.align.k, cfg.align.metric)?;
    heatmap.export(&dir.path, "heatmap")?;
    dir.note("heatmap.csv");
    dir.note("heatmap.json");
    log::info!("alignment argmax at {:?}", heatmap.argmax);
    let mut record = new_record(cfg, &setup);
    record.summary.details = serde_json::json!({
        "samples": n,
        "k": heatmap.k,
        "rows": heatmap.rows(),
        "cols": heatmap.cols(),
        "argmax": [heatmap.argmax.0, heatmap.argmax.1],
        "argmax_score": heatmap.scores[heatmap.argmax.0][heatmap.argmax.1],
    });
    finish(cfg, &setup, dir, record, started)
}

/// Grounded decoder-only captioning with the injection layer swept over
/// `{0, ⌈D/3⌉, ⌈2D/3⌉, D}`.
pub fn run_layer_sweep(cfg: &RunConfig) -> Result<RunRecord> {
    cfg.validate()?;
    require(cfg, &[ExperimentKind::LayerSweep])?;
    let started = Instant::now();
    let setup = Setup::new(cfg)?;
    if setup.bundle.kind() != LmKind::DecoderOnly {
        return Err(Error::Config("layer-sweep needs a decoder-only bundle".into()));
    }
    let mut dir = open_dir(cfg)?;
    let mut record = new_record(cfg, &setup);
    let mut csv = String::from("layer,initial_loss,final_loss,best_bleu4\n");
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut details = Vec::new();
    for layer in sweep_layers(setup.bundle.lm.depth()) {
        let opts = PipelineOptions { inject_layer: layer, ..cfg.pipeline_options.clone() };
        let mut trainer = Trainer::new(&setup, cfg, PipelineKind::Grounded, opts)?;
        let name = format!("layer-{layer}");
        let fit = fit(
            &setup,
            cfg,
            &mut trainer,
            &[("train", vec![Task::Caption], cfg.epochs.train)],
            &[Task::Caption],
            &name,
        )?;
        csv.push_str(&format!(
            "{layer},{},{},{}\n",
            f(fit.summary.initial_train_loss),
            f(fit.summary.final_train_loss),
            f(fit.summary.best_bleu4)
        ));
        details.push(serde_json::json!({ "layer": layer, "summary": fit.summary }));
        record.trainable_params = fit.trainable_params;
        record.epochs.extend(fit.rows);
    }
    dir.write("layer_sweep.csv", &csv)?;
    record.summary.details = serde_json::Value::Array(details);
    finish(cfg, &setup, dir, record, started)
}
