use std::fs;
use std::path::Path;

use proptest::prelude::*;
use qlab_core::data::{gen_dataset, load_dataset, save_dataset, Vocab};
use qlab_core::frozen::{FrozenConfig, LmKind, Recipe, VisionConfig};
use qlab_core::nn::BlockConfig;
use qlab_core::pipelines::PipelineKind;
use qlab_core::qformer::QFormerConfig;
use qlab_core::Error;
use qlab_harness::{
    median, metrics_csv, read_manifest, rerun, run, EpochRecord, ExperimentKind, RunConfig, METRICS_HEADER,
};

/// Small models, tiny pretraining and a short schedule.
fn small(experiment: ExperimentKind, out: &Path) -> RunConfig {
    let block = |layers, seq, vocab| BlockConfig {
        model_dim: 16,
        num_heads: 2,
        ff_dim: 32,
        num_layers: layers,
        max_seq_len: seq,
        vocab_size: vocab,
    };
    let vocab = Vocab::new().len();
    let mut c = RunConfig::for_experiment(experiment);
    c.bundle.frozen = FrozenConfig {
        vision: VisionConfig { image_size: 32, patch_size: 8, channels: 3, block: block(2, 24, 1) },
        lm_kind: LmKind::EncoderDecoder,
        lm: block(3, 64, vocab),
    };
    c.bundle.recipe = Recipe::tiny();
    c.qformer = QFormerConfig {
        num_queries: 4,
        dim: 16,
        num_heads: 2,
        ff_dim: 32,
        num_blocks: 2,
        vision_dim: 16,
        lm_dim: 16,
        vocab_size: vocab,
        max_prompt_len: 32,
    };
    c.dataset.n_scenes = 60;
    c.epochs.train = 2;
    c.epochs.pretrain = 1;
    c.epochs.finetune = 1;
    c.eval.max_samples = 6;
    c.eval.max_gen_len = 6;
    c.probe.samples = 30;
    c.probe.options.epochs = 20;
    c.align.samples = 30;
    c.align.k = 5;
    c.output_dir = out.to_path_buf();
    c
}

#[test]
fn config_json_round_trip_and_strictness() {
    for kind in ExperimentKind::ALL {
        let c = RunConfig::for_experiment(kind);
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }
    assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    let e = RunConfig::from_json(r#"{"experiment": "multitask", "learning_rate": 1}"#).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    let e = RunConfig::from_json(r#"{"optimizer": {"lr": 1e-3, "momentum": 0.9}}"#).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    assert!(RunConfig::from_json(r#"{"experiment": "train-everything"}"#).is_err());
    assert!(matches!(RunConfig::load(Path::new("/nonexistent/config.json")), Err(Error::Config(_))));
}

#[test]
fn validation_rejects_inconsistent_configs() {
    let dir = tempfile::tempdir().unwrap();
    let ok = small(ExperimentKind::SingleTaskCaption, dir.path());
    ok.validate().unwrap();
    let bad = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = ok.clone();
        f(&mut c);
        c.validate()
    };
    assert!(matches!(bad(&|c| c.batch_size = 0), Err(Error::Config(_))));
    assert!(matches!(bad(&|c| c.qformer.lm_dim = 32), Err(Error::Config(_))));
    assert!(matches!(bad(&|c| c.dataset.n_scenes = 5), Err(Error::Config(_))));
    assert!(matches!(bad(&|c| c.epochs.train = 0), Err(Error::Config(_))));
    assert!(matches!(
        bad(&|c| {
            c.experiment = ExperimentKind::ZeroShot;
            c.dataset.split.holdout.clear();
        }),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        bad(&|c| {
            c.experiment = ExperimentKind::BenchTime;
            c.epochs.measured = 4;
        }),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        bad(&|c| {
            c.experiment = ExperimentKind::GroundingAblation;
            c.pipeline = PipelineKind::Standard;
        }),
        Err(Error::Config(_))
    ));
    assert!(matches!(bad(&|c| c.experiment = ExperimentKind::LayerSweep), Err(Error::Config(_))));
    assert!(matches!(
        bad(&|c| {
            c.experiment = ExperimentKind::Probe;
            c.probe.noise_ladder = Some(vec![1.0, -0.5]);
        }),
        Err(Error::Config(_))
    ));
    assert!(matches!(run(&bad_cfg(&ok)), Err(Error::Config(_))));
}

fn bad_cfg(c: &RunConfig) -> RunConfig {
    RunConfig { batch_size: 0, ..c.clone() }
}

#[test]
fn config_hash_ignores_only_the_output_dir() {
    let a = RunConfig::default();
    let b = RunConfig { output_dir: "elsewhere".into(), ..a.clone() };
    assert_eq!(a.config_hash(), b.config_hash());
    assert_eq!(a.config_hash().len(), 64);
    let c = RunConfig { seed: 1, ..a.clone() };
    assert_ne!(a.config_hash(), c.config_hash());
}

#[test]
fn single_task_run_layout_and_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(ExperimentKind::SingleTaskCaption, &dir.path().join("run"));
    let rec = run(&cfg).unwrap();
    assert_eq!(rec.trained_epochs("train"), 2);
    assert_eq!(rec.fingerprint_before, rec.fingerprint_after);
    assert!(!rec.trainable_params.is_empty());
    assert!(rec.trainable_params.iter().all(|n| n.starts_with("qformer.")));
    assert!(rec.summary.initial_train_loss.unwrap().is_finite());

    let out = &cfg.output_dir;
    let manifest = read_manifest(out).unwrap();
    assert_eq!(manifest["complete"], true);
    assert_eq!(manifest["config_hash"], rec.config_hash.as_str());
    for f in ["config.json", "metrics.csv", "summary.json", "checkpoint"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), METRICS_HEADER.join(","));
    assert_eq!(csv.lines().count(), 1 + 3);
    assert_eq!(RunConfig::load(&out.join("config.json")).unwrap(), cfg);

    let again = dir.path().join("again");
    let rec2 = rerun(out, &again).unwrap();
    assert_eq!(rec2.config_hash, rec.config_hash);
    assert_eq!(fs::read(out.join("metrics.csv")).unwrap(), fs::read(again.join("metrics.csv")).unwrap());

    let mut tampered = RunConfig::load(&out.join("config.json")).unwrap();
    tampered.batch_size += 1;
    fs::write(out.join("config.json"), tampered.to_json()).unwrap();
    assert!(matches!(rerun(out, &dir.path().join("third")), Err(Error::Audit(_))));
}

#[test]
fn leaked_holdout_scene_is_an_audit_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(ExperimentKind::SingleTaskVqa, &dir.path().join("run"));
    let mut ds = gen_dataset(cfg.dataset.seed, 80, &cfg.dataset.split).unwrap();
    let leak = ds.holdout_test()[0].clone();
    ds.train.push(leak);
    let data = dir.path().join("data");
    save_dataset(&ds, &data).unwrap();
    assert_eq!(load_dataset(&data).unwrap(), ds);
    cfg.dataset.path = Some(data);
    let e = run(&cfg).unwrap_err();
    assert!(matches!(e, Error::Audit(_)), "{e}");
    assert_eq!(e.exit_code(), 4);
    assert!(!cfg.output_dir.join("manifest.json").exists());
}

#[test]
fn analysis_experiments_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();

    let cfg = small(ExperimentKind::Align, &dir.path().join("align"));
    let rec = run(&cfg).unwrap();
    let d = &rec.summary.details;
    assert_eq!(d["rows"], 4);
    assert_eq!(d["cols"], 3);
    let s = d["argmax_score"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&s));
    assert!(cfg.output_dir.join("heatmap.csv").exists());

    let mut cfg = small(ExperimentKind::Probe, &dir.path().join("probe"));
    cfg.probe.noise_ladder = Some(vec![1.0, 0.0]);
    run(&cfg).unwrap();
    for f in
        ["probe_report.json", "probe_report_fresh.json", "probe_noise_ladder.json", "activations/source_trained.actv"]
    {
        assert!(cfg.output_dir.join(f).exists(), "missing {f}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(cfg.output_dir.join("probe_report.json")).unwrap()).unwrap();
    let labels: Vec<&str> =
        report["entries"].as_array().unwrap().iter().map(|e| e["label"].as_str().unwrap()).collect();
    assert_eq!(labels, vec!["input embeddings", "encoder outputs"]);

    let mut zs = small(ExperimentKind::ZeroShot, &dir.path().join("zero-shot"));
    zs.dataset.n_scenes = 120;
    let rec = run(&zs).unwrap();
    let acc = rec.summary.details["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(rec.summary.details["questions"].as_u64().unwrap() > 0);

    let mut wrong = zs.clone();
    wrong.checkpoint = Some(zs.output_dir.join("checkpoint"));
    wrong.qformer.num_queries = 6;
    wrong.output_dir = dir.path().join("wrong");
    assert!(matches!(run(&wrong), Err(Error::Config(_))));
}

#[test]
fn ablation_and_layer_sweep_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(ExperimentKind::GroundingAblation, &dir.path().join("ablation"));
    let rec = run(&cfg).unwrap();
    assert!(rec.summary.details["grounded"]["final_vqa_accuracy"].is_number());
    assert!(rec.summary.details["ablated"]["final_vqa_accuracy"].is_number());
    let curves = fs::read_to_string(cfg.output_dir.join("ablation_curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 3);

    let mut cfg = small(ExperimentKind::LayerSweep, &dir.path().join("sweep"));
    cfg.bundle.frozen.lm_kind = LmKind::DecoderOnly;
    cfg.epochs.train = 1;
    run(&cfg).unwrap();
    let csv = fs::read_to_string(cfg.output_dir.join("layer_sweep.csv")).unwrap();
    let layers: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(layers, vec!["0", "1", "2", "3"]);
}

#[test]
fn median_examples() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    assert!(median(&[]).is_nan());
}

proptest! {
    #[test]
    fn metrics_csv_has_one_line_per_record(n in 0usize..20, secs in 0.0f64..5.0) {
        let rows: Vec<EpochRecord> = (0..n)
            .map(|i| EpochRecord {
                epoch: i,
                phase: "train".into(),
                task: "caption".into(),
                loss: (i % 2 == 0).then_some(i as f64 / 3.0),
                bleu4: None,
                accuracy: Some(0.5),
                encoder_calls: i as u64,
                seconds: secs,
            })
            .collect();
        let with = metrics_csv(&rows, true).unwrap();
        let without = metrics_csv(&rows, false).unwrap();
        prop_assert_eq!(with.lines().count(), n + 1);
        prop_assert!(without.lines().skip(1).all(|l| l.ends_with(",0")));
        for (line, r) in without.lines().skip(1).zip(&rows) {
            let loss = line.split(',').nth(3).unwrap();
            match r.loss {
                Some(l) => prop_assert_eq!(loss.parse::<f64>().unwrap(), l),
                None => prop_assert_eq!(loss, ""),
            }
        }
    }

    #[test]
    fn seed_changes_the_config_hash(a in any::<u64>(), b in any::<u64>()) {
        let x = RunConfig { seed: a, ..RunConfig::default() };
        let y = RunConfig { seed: b, ..RunConfig::default() };
        prop_assert_eq!(x.config_hash() == y.config_hash(), a == b);
    }
}
