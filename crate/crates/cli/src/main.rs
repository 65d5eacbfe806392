use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qlab_core::data::{gen_dataset, save_dataset};
use qlab_core::exec;
use qlab_core::frozen::build_frozen_bundle;
use qlab_core::pipelines::PipelineKind;
use qlab_core::{Error, Result};
use qlab_harness::{run, ExperimentKind, RunConfig, RunRecord};

#[derive(Parser, Debug)]
#[command(name = "qlab", version, about = "Toy-scale QFormer fusion experiments")]
struct Cli {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed (bundle seed for make-frozen, dataset seed for gen-data).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Sequential execution; required for bitwise reproducibility.
    #[arg(long, global = true)]
    single_thread: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain, freeze and save a frozen bundle.
    MakeFrozen,
    /// Generate and save a synthetic dataset.
    GenData,
    /// Train a single-task, multitask or layer-sweep run.
    Train {
        #[arg(long, value_parser = parse_experiment)]
        experiment: Option<ExperimentKind>,
        #[arg(long, value_parser = parse_pipeline)]
        pipeline: Option<PipelineKind>,
    },
    /// Zero-shot accuracy on the compositional holdout.
    EvalZeroShot {
        /// QFormer checkpoint directory; trains a multitask run when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Linear probes from QFormer outputs onto LM layers.
    Probe {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Mutual-KNN alignment heatmap between LM and vision layers.
    Align,
    /// Standard vs grounded per-epoch training time.
    BenchTime,
    /// Grounded training with and without grounding rows.
    AblateGrounding,
}

fn parse_experiment(s: &str) -> std::result::Result<ExperimentKind, String> {
    ExperimentKind::ALL.iter().copied().find(|k| k.name() == s).ok_or_else(|| {
        let names: Vec<&str> = ExperimentKind::ALL.iter().map(|k| k.name()).collect();
        format!("unknown experiment {s:?}; expected one of {}", names.join(", "))
    })
}

fn parse_pipeline(s: &str) -> std::result::Result<PipelineKind, String> {
    match s {
        "standard" => Ok(PipelineKind::Standard),
        "grounded" => Ok(PipelineKind::Grounded),
        _ => Err(format!("unknown pipeline {s:?}; expected standard or grounded")),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

/// Subcommands fix the experiment family; a config naming another family is
/// a config error.
fn expect_kind(cfg: &mut RunConfig, explicit: bool, allowed: &[ExperimentKind]) -> Result<()> {
    if !allowed.contains(&cfg.experiment) {
        if explicit {
            return Err(Error::Config(format!(
                "config experiment {} does not fit this subcommand (expected one of {:?})",
                cfg.experiment.name(),
                allowed.iter().map(|k| k.name()).collect::<Vec<_>>()
            )));
        }
        cfg.experiment = allowed[0];
    }
    Ok(())
}

fn report(record: &RunRecord, out: &std::path::Path) {
    println!("{} run written to {}", record.experiment, out.display());
    println!("config hash {}", record.config_hash);
    if let (Some(a), Some(b)) = (record.summary.initial_train_loss, record.summary.final_train_loss) {
        println!("train loss {a:.4} -> {b:.4}");
    }
    if !record.summary.details.is_null() {
        println!("{}", serde_json::to_string_pretty(&record.summary.details).unwrap_or_default());
    }
}

fn execute(cli: &Cli) -> Result<()> {
    if cli.single_thread {
        exec::set_single_thread(true);
    }
    let mut cfg = load_config(cli)?;
    let explicit = cli.config.is_some();
    match &cli.command {
        Command::MakeFrozen => {
            if let Some(s) = cli.seed {
                cfg.bundle.seed = s;
            }
            let out = cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
            let bundle = build_frozen_bundle(cfg.bundle.seed, &cfg.bundle.frozen, &cfg.bundle.recipe)?;
            bundle.save(&out)?;
            println!("bundle {:016x} written to {}", bundle.fingerprint, out.display());
            if let Some(l) = bundle.report.heldout_lm_loss {
                println!("held-out LM loss {l:.4}");
            }
            return Ok(());
        }
        Command::GenData => {
            if let Some(s) = cli.seed {
                cfg.dataset.seed = s;
            }
            let out = cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
            let ds = gen_dataset(cfg.dataset.seed, cfg.dataset.n_scenes, &cfg.dataset.split)?;
            ds.audit()?;
            save_dataset(&ds, &out)?;
            println!(
                "dataset written to {} (train {}, val {}, test {})",
                out.display(),
                ds.train.len(),
                ds.val.len(),
                ds.test.len()
            );
            return Ok(());
        }
        Command::Train { experiment, pipeline } => {
            let allowed = [
                ExperimentKind::SingleTaskCaption,
                ExperimentKind::SingleTaskVqa,
                ExperimentKind::Multitask,
                ExperimentKind::LayerSweep,
            ];
            if let Some(k) = experiment {
                if !allowed.contains(k) {
                    return Err(Error::Config(format!("train does not run {}", k.name())));
                }
                cfg.experiment = *k;
            }
            if let Some(p) = pipeline {
                cfg.pipeline = *p;
            }
            expect_kind(&mut cfg, explicit, &allowed)?;
        }
        Command::EvalZeroShot { checkpoint } => {
            expect_kind(&mut cfg, explicit, &[ExperimentKind::ZeroShot])?;
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint.clone();
            }
        }
        Command::Probe { checkpoint } => {
            expect_kind(&mut cfg, explicit, &[ExperimentKind::Probe])?;
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint.clone();
            }
        }
        Command::Align => expect_kind(&mut cfg, explicit, &[ExperimentKind::Align])?,
        Command::BenchTime => expect_kind(&mut cfg, explicit, &[ExperimentKind::BenchTime])?,
        Command::AblateGrounding => {
            expect_kind(&mut cfg, explicit, &[ExperimentKind::GroundingAblation])?;
            if !explicit {
                cfg.pipeline = PipelineKind::Grounded;
            }
        }
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let record = run(&cfg)?;
    report(&record, &cfg.output_dir);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
