use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RepresentationSet;
use crate::error::{Error, Result};
use crate::exec;
use crate::nn::LayerStates;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

pub const DEFAULT_K: usize = 10;

/// `k` nearest neighbors of every row, self excluded. Cosine ranks by
/// similarity of unit-normalized rows, Euclidean by squared distance; ties
/// go to the lower index.
pub fn knn_indices(set: &RepresentationSet, k: usize, metric: Metric) -> Result<Vec<Vec<usize>>> {
    let n = set.len();
    if k == 0 || n <= k {
        return Err(Error::contract(format!("k = {k} needs 1 <= k < n_samples = {n}")));
    }
    let rows: Vec<Vec<f64>> = match metric {
        Metric::Cosine => (0..n)
            .map(|i| {
                let r = set.row(i);
                let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::contract(format!("row {i} of {:?} has zero norm", set.label)));
                }
                Ok(r.iter().map(|x| x / norm).collect())
            })
            .collect::<Result<_>>()?,
        Metric::Euclidean => (0..n).map(|i| set.row(i).to_vec()).collect(),
    };
    Ok(exec::map_indexed(n, |i| {
        let mut cand: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let key = match metric {
                    Metric::Cosine => -rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum::<f64>(),
                    Metric::Euclidean => rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
                };
                (key, j)
            })
            .collect();
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        cand.truncate(k);
        cand.into_iter().map(|(_, j)| j).collect()
    }))
}

/// Mean over samples of `|N_A(i) ∩ N_B(i)| / k`.
pub fn mutual_knn_alignment(a: &RepresentationSet, b: &RepresentationSet, k: usize, metric: Metric) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!("sample counts differ: {} vs {}", a.len(), b.len())));
    }
    let na = knn_indices(a, k, metric)?;
    let nb = knn_indices(b, k, metric)?;
    let total: usize = na.iter().zip(&nb).map(|(x, y)| x.iter().filter(|j| y.contains(j)).count()).sum();
    Ok(total as f64 / (k * a.len()) as f64)
}

/// Mutual-KNN scores between every LM layer (rows) and every vision layer
/// (columns).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentHeatmap {
    pub scores: Vec<Vec<f64>>,
    pub k: usize,
    pub metric: Metric,
    pub argmax: (usize, usize),
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
}

impl AlignmentHeatmap {
    /// Builds the heatmap from per-layer sets and records the argmax
    /// (ties: lowest row, then lowest column).
    pub fn from_sets(rows: &[RepresentationSet], cols: &[RepresentationSet], k: usize, metric: Metric) -> Result<Self> {
        if rows.is_empty() || cols.is_empty() {
            return Err(Error::contract("heatmap needs at least one layer on each side"));
        }
        let n = rows[0].len();
        if let Some(bad) = rows.iter().chain(cols).find(|s| s.len() != n) {
            return Err(Error::contract(format!("sample count mismatch: {} vs {n} in {:?}", bad.len(), bad.label)));
        }
        if k == 0 || n <= k {
            return Err(Error::contract(format!("k = {k} needs 1 <= k < n_samples = {n}")));
        }
        let rn = exec::try_map_indexed(rows.len(), |i| knn_indices(&rows[i], k, metric))?;
        let cn = exec::try_map_indexed(cols.len(), |j| knn_indices(&cols[j], k, metric))?;
        let mut scores = vec![vec![0.0; cols.len()]; rows.len()];
        let mut argmax = (0, 0);
        for (i, a) in rn.iter().enumerate() {
            for (j, b) in cn.iter().enumerate() {
                let hits: usize = a.iter().zip(b).map(|(x, y)| x.iter().filter(|t| y.contains(t)).count()).sum();
                scores[i][j] = hits as f64 / (k * n) as f64;
                if scores[i][j] > scores[argmax.0][argmax.1] {
                    argmax = (i, j);
                }
            }
        }
        Ok(Self {
            scores,
            k,
            metric,
            argmax,
            row_labels: rows.iter().map(|s| s.label.clone()).collect(),
            col_labels: cols.iter().map(|s| s.label.clone()).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.scores.len()
    }

    pub fn cols(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }

    /// CSV matrix with a header row of column labels and one row per LM layer.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer");
        for c in &self.col_labels {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (label, row) in self.row_labels.iter().zip(&self.scores) {
            s.push_str(label);
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }

    /// Writes `<stem>.csv` and the `<stem>.json` sidecar into `dir`.
    pub fn export(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let sidecar = serde_json::json!({
            "k": self.k,
            "metric": self.metric,
            "argmax": [self.argmax.0, self.argmax.1],
            "argmax_score": self.scores[self.argmax.0][self.argmax.1],
            "labels": { "rows": self.row_labels, "cols": self.col_labels },
            "scores": self.scores,
        });
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&json, e))
    }
}

/// Heatmap of LM layer aggregates (final token) against vision layer
/// aggregates (first token), one [`LayerStates`] per sample on each side.
pub fn alignment_heatmap<T: Scalar>(
    lm_states: &[LayerStates<T>],
    vit_states: &[LayerStates<T>],
    k: usize,
    metric: Metric,
) -> Result<AlignmentHeatmap> {
    if lm_states.len() != vit_states.len() {
        return Err(Error::contract(format!("{} LM samples but {} vision samples", lm_states.len(), vit_states.len())));
    }
    let rows = layer_sets(lm_states, "lm", Aggregate::Last)?;
    let cols = layer_sets(vit_states, "vit", Aggregate::First)?;
    AlignmentHeatmap::from_sets(&rows, &cols, k, metric)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregate {
    First,
    Last,
}

/// One set per layer holding each sample's aggregate row at that layer.
pub fn layer_sets<T: Scalar>(
    states: &[LayerStates<T>],
    prefix: &str,
    agg: Aggregate,
) -> Result<Vec<RepresentationSet>> {
    let Some(first) = states.first() else {
        return Err(Error::contract("no samples"));
    };
    let layers = first.len();
    if let Some(s) = states.iter().find(|s| s.len() != layers) {
        return Err(Error::contract(format!("layer count mismatch: {} vs {layers}", s.len())));
    }
    (0..layers).map(|j| layer_set(states, j, &format!("{prefix} layer {j}"), agg)).collect()
}

pub fn layer_set<T: Scalar>(
    states: &[LayerStates<T>],
    layer: usize,
    label: &str,
    agg: Aggregate,
) -> Result<RepresentationSet> {
    let mut data = Vec::new();
    let mut dim = 0;
    for s in states {
        let row = match agg {
            Aggregate::First => s.first_token(layer)?,
            Aggregate::Last => s.last_token(layer)?,
        };
        dim = row.len();
        data.extend(row.into_iter().map(|x| x.f64()));
    }
    RepresentationSet::new(states.len(), dim, data, label)
}
