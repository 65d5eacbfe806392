use std::fs;
use std::path::{Path, PathBuf};

use qlab_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentKind, RunConfig};

pub const METRICS_HEADER: [&str; 8] =
    ["epoch", "phase", "task", "loss", "bleu4", "accuracy", "encoder_calls", "seconds"];

/// One `metrics.csv` row. Epoch 0 rows (phase `init`) are measured before any
/// update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    pub task: String,
    pub loss: Option<f64>,
    pub bleu4: Option<f64>,
    pub accuracy: Option<f64>,
    pub encoder_calls: u64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub initial_train_loss: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_bleu4: Option<f64>,
    pub best_accuracy: Option<f64>,
    /// `(phase, last epoch of that phase)`.
    pub phase_boundaries: Vec<(String, usize)>,
    pub wall_seconds: f64,
    /// Experiment-specific results (zero-shot, bench, probe, ...).
    pub details: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub pipeline: String,
    pub config_hash: String,
    pub bundle_fingerprint: String,
    pub fingerprint_before: String,
    pub fingerprint_after: String,
    pub trainable_params: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    pub summary: RunSummary,
}

impl RunRecord {
    /// Training epochs recorded (init rows excluded), per phase name.
    pub fn trained_epochs(&self, phase: &str) -> usize {
        let mut seen: Vec<usize> = self.epochs.iter().filter(|r| r.phase == phase).map(|r| r.epoch).collect();
        seen.dedup();
        seen.len()
    }

    pub fn rows(&self, phase: &str, task: &str) -> Vec<&EpochRecord> {
        self.epochs.iter().filter(|r| r.phase == phase && r.task == task).collect()
    }
}

pub fn fingerprint_hex(fp: u64) -> String {
    format!("{fp:016x}")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(rows: &[EpochRecord], record_seconds: bool) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Contract(format!("csv: {e}"));
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in rows {
        let secs = if record_seconds { r.seconds.to_string() } else { "0".to_string() };
        w.write_record([
            r.epoch.to_string(),
            r.phase.clone(),
            r.task.clone(),
            opt(r.loss),
            opt(r.bleu4),
            opt(r.accuracy),
            r.encoder_calls.to_string(),
            secs,
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Contract(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Per-run output directory. `manifest.json` is written last, through a
/// rename, and marks the run complete.
pub struct RunDir {
    pub path: PathBuf,
    files: Vec<String>,
}

impl RunDir {
    pub fn create(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let stale = path.join("manifest.json");
        if stale.exists() {
            fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
        }
        Ok(Self { path: path.to_path_buf(), files: Vec::new() })
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let p = self.path.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
        self.note(name);
        Ok(())
    }

    pub fn write_json<S: Serialize>(&mut self, name: &str, value: &S) -> Result<()> {
        self.write(name, &serde_json::to_string_pretty(value)?)
    }

    /// Records a file or directory written by someone else.
    pub fn note(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
    }

    pub fn finish(mut self, config: &RunConfig, record: &RunRecord) -> Result<()> {
        // Timing is the measurement of a bench run, so it is always kept there.
        let seconds = config.record_seconds || config.experiment == ExperimentKind::BenchTime;
        self.write("metrics.csv", &metrics_csv(&record.epochs, seconds)?)?;
        self.write_json("summary.json", record)?;
        let manifest = serde_json::json!({
            "complete": true,
            "experiment": record.experiment,
            "config_hash": record.config_hash,
            "fingerprint_before": record.fingerprint_before,
            "fingerprint_after": record.fingerprint_after,
            "files": self.files,
        });
        let tmp = self.path.join(".manifest.json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&tmp, e))?;
        let dst = self.path.join("manifest.json");
        fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))
    }
}

/// Reads the manifest of a completed run; a missing one means the run did
/// not finish.
pub fn read_manifest(dir: &Path) -> Result<serde_json::Value> {
    let p = dir.join("manifest.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}
