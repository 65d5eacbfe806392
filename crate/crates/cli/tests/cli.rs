use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use qlab_core::data::{gen_dataset, save_dataset, Vocab};
use qlab_core::frozen::{FrozenConfig, LmKind, Recipe, VisionConfig};
use qlab_core::nn::BlockConfig;
use qlab_core::qformer::QFormerConfig;
use qlab_harness::{ExperimentKind, RunConfig};

fn qlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qlab")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn small(experiment: ExperimentKind) -> RunConfig {
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
        lm: block(2, 64, vocab),
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
    c.epochs.train = 1;
    c.eval.max_samples = 4;
    c.eval.max_gen_len = 4;
    c
}

fn write_config(dir: &Path, name: &str, cfg: &RunConfig) -> String {
    let p = dir.join(name);
    fs::write(&p, cfg.to_json()).unwrap();
    p.to_str().unwrap().to_string()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_usage_errors() {
    let o = qlab(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in
        ["make-frozen", "gen-data", "train", "eval-zero-shot", "probe", "align", "bench-time", "ablate-grounding"]
    {
        assert!(text.contains(sub), "help lacks {sub}");
    }
    assert_eq!(code(&qlab(&["no-such-command"])), 2);
    assert_eq!(code(&qlab(&["train", "--pipeline", "sideways"])), 2);
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    fs::write(&p, r#"{"experiment": "multitask", "unknown_knob": 3}"#).unwrap();
    assert_eq!(code(&qlab(&["train", "--config", path(&p)])), 2);
    assert_eq!(code(&qlab(&["train", "--config", path(&dir.path().join("missing.json"))])), 2);

    let cfg = write_config(dir.path(), "align.json", &small(ExperimentKind::Align));
    let o = qlab(&["eval-zero-shot", "--config", &cfg]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not fit"));

    let mut c = small(ExperimentKind::SingleTaskCaption);
    c.qformer.lm_dim = 8;
    let cfg = write_config(dir.path(), "dims.json", &c);
    assert_eq!(code(&qlab(&["train", "--config", &cfg])), 2);
}

#[test]
fn gen_data_make_frozen_and_deterministic_training() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let base = small(ExperimentKind::SingleTaskCaption);
    let cfg = write_config(d, "base.json", &base);

    let data = d.join("data");
    assert_eq!(code(&qlab(&["gen-data", "--config", &cfg, "--seed", "3", "--out", path(&data)])), 0);
    let bundle = d.join("bundle");
    let o = qlab(&["make-frozen", "--config", &cfg, "--out", path(&bundle)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(bundle.join("manifest.json").exists());

    let mut c = base.clone();
    c.bundle.path = Some(bundle.clone());
    c.dataset.path = Some(data.clone());
    let cfg = write_config(d, "train.json", &c);
    for run in ["a", "b"] {
        let out = d.join(run);
        let o = qlab(&["train", "--config", &cfg, "--single-thread", "--seed", "5", "--out", path(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("config hash"));
    }
    assert_eq!(fs::read(d.join("a/metrics.csv")).unwrap(), fs::read(d.join("b/metrics.csv")).unwrap());
    let saved = RunConfig::load(&d.join("a/config.json")).unwrap();
    assert_eq!(saved.seed, 5);

    // A truncated checkpoint tensor is a format error.
    let ckpt = d.join("a/checkpoint");
    let t = ckpt.join("tensors/0000.tnsr");
    let bytes = fs::read(&t).unwrap();
    fs::write(&t, &bytes[..bytes.len() / 2]).unwrap();
    let mut z = c.clone();
    z.experiment = ExperimentKind::ZeroShot;
    z.dataset.path = None;
    let cfg = write_config(d, "zs.json", &z);
    let o = qlab(&["eval-zero-shot", "--config", &cfg, "--checkpoint", path(&ckpt), "--out", path(&d.join("zs"))]);
    assert_eq!(code(&o), 5, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn audit_and_training_failures() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let base = small(ExperimentKind::SingleTaskVqa);

    let mut ds = gen_dataset(base.dataset.seed, 80, &base.dataset.split).unwrap();
    let leak = ds.holdout_test()[0].clone();
    ds.train.push(leak);
    save_dataset(&ds, &d.join("leaky")).unwrap();
    let mut c = base.clone();
    c.dataset.path = Some(d.join("leaky"));
    let cfg = write_config(d, "leaky.json", &c);
    assert_eq!(code(&qlab(&["train", "--config", &cfg, "--out", path(&d.join("leak-run"))])), 4);

    let mut c = base.clone();
    c.optimizer.lr = 1e30;
    c.optimizer.clip_norm = None;
    c.epochs.train = 3;
    let cfg = write_config(d, "diverge.json", &c);
    let o = qlab(&["train", "--config", &cfg, "--out", path(&d.join("diverge"))]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn align_subcommand_writes_a_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut c = small(ExperimentKind::Align);
    c.align.samples = 20;
    c.align.k = 4;
    let cfg = write_config(d, "align.json", &c);
    let o = qlab(&["align", "--config", &cfg, "--out", path(&d.join("align"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("align/heatmap.json").exists());
    assert!(d.join("align/manifest.json").exists());
}
