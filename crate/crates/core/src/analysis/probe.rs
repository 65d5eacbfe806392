use serde::{Deserialize, Serialize};

use super::knn::{layer_set, Aggregate};
use super::RepresentationSet;
use crate::error::{Error, Result};
use crate::exec;
use crate::nn::LayerStates;
use crate::rng::Rng;
use crate::tensor::Scalar;

pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StandardizeStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Dimensions whose variance fell below the floor; mapped to zero.
    pub floored: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Per-dimension zero mean and unit (population) variance over samples.
pub fn standardize_targets(set: &RepresentationSet) -> Result<(RepresentationSet, StandardizeStats)> {
    let (n, d) = (set.len(), set.dim());
    if n < 2 {
        return Err(Error::contract("standardization needs at least 2 samples"));
    }
    let mut stats = StandardizeStats { mean: vec![0.0; d], std: vec![0.0; d], ..Default::default() };
    for c in 0..d {
        let mean = (0..n).map(|i| set.row(i)[c]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (set.row(i)[c] - mean).powi(2)).sum::<f64>() / n as f64;
        stats.mean[c] = mean;
        if var < VARIANCE_FLOOR {
            stats.std[c] = VARIANCE_FLOOR.sqrt();
            stats.floored.push(c);
        } else {
            stats.std[c] = var.sqrt();
        }
    }
    if !stats.floored.is_empty() {
        let msg = format!(
            "{:?}: {} dimension(s) with variance below {VARIANCE_FLOOR:e} mapped to zero",
            set.label,
            stats.floored.len()
        );
        log::warn!("{msg}");
        stats.warnings.push(msg);
    }
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let r = set.row(i);
        for (c, &v) in r.iter().enumerate() {
            data.push(if stats.floored.binary_search(&c).is_ok() { 0.0 } else { (v - stats.mean[c]) / stats.std[c] });
        }
    }
    Ok((RepresentationSet::new(n, d, data, &set.label)?, stats))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeOptions {
    pub epochs: usize,
    pub lr: f64,
    pub init_std: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self { epochs: 300, lr: 0.2, init_std: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeEntry {
    pub label: String,
    pub layer: Option<usize>,
    /// Loss before training followed by the loss after every epoch.
    pub losses: Vec<f64>,
    pub final_loss: f64,
    pub target_stats: StandardizeStats,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub source: String,
    pub options: Option<ProbeOptions>,
    pub entries: Vec<ProbeEntry>,
}

/// Fits an affine map source → standardized target by full-batch gradient
/// descent on the per-dimension mean squared error. The source is
/// standardized internally as well, which leaves the affine function class
/// unchanged. The reported loss is averaged over samples and target
/// dimensions, so an unpredictable standardized target sits near 1.0.
pub fn probe_regress(
    source: &RepresentationSet,
    target: &RepresentationSet,
    opts: &ProbeOptions,
    rng: &mut Rng,
) -> Result<ProbeEntry> {
    if source.len() != target.len() {
        return Err(Error::contract(format!("{} source samples vs {} target samples", source.len(), target.len())));
    }
    let (x, _) = standardize_targets(source)?;
    let (y, stats) = standardize_targets(target)?;
    let (n, ds, dt) = (x.len(), x.dim(), y.dim());
    let mut w: Vec<f64> = (0..ds * dt).map(|_| rng.normal(0.0, opts.init_std)).collect();
    let mut b = vec![0.0; dt];
    let mut losses = Vec::with_capacity(opts.epochs + 1);
    let mut resid = vec![0.0; n * dt];
    let eval = |w: &[f64], b: &[f64], resid: &mut [f64]| -> f64 {
        let mut sum = 0.0;
        for i in 0..n {
            let xr = x.row(i);
            let yr = y.row(i);
            let out = &mut resid[i * dt..(i + 1) * dt];
            out.copy_from_slice(b);
            for (k, &xv) in xr.iter().enumerate() {
                let wr = &w[k * dt..(k + 1) * dt];
                for t in 0..dt {
                    out[t] += xv * wr[t];
                }
            }
            for t in 0..dt {
                out[t] -= yr[t];
                sum += out[t] * out[t];
            }
        }
        sum / (n * dt) as f64
    };
    losses.push(eval(&w, &b, &mut resid));
    let scale = 2.0 / n as f64;
    for epoch in 0..opts.epochs {
        let mut gw = vec![0.0; ds * dt];
        let mut gb = vec![0.0; dt];
        for i in 0..n {
            let r = &resid[i * dt..(i + 1) * dt];
            for (k, &xv) in x.row(i).iter().enumerate() {
                let g = &mut gw[k * dt..(k + 1) * dt];
                for t in 0..dt {
                    g[t] += xv * r[t];
                }
            }
            for t in 0..dt {
                gb[t] += r[t];
            }
        }
        for (wv, g) in w.iter_mut().zip(&gw) {
            *wv -= opts.lr * scale * g;
        }
        for (bv, g) in b.iter_mut().zip(&gb) {
            *bv -= opts.lr * scale * g;
        }
        let l = eval(&w, &b, &mut resid);
        if !l.is_finite() {
            return Err(Error::Training(format!("probe onto {:?} diverged at epoch {epoch}", target.label)));
        }
        losses.push(l);
    }
    Ok(ProbeEntry {
        label: target.label.clone(),
        layer: None,
        final_loss: *losses.last().expect("initial loss recorded"),
        losses,
        target_stats: stats,
    })
}

/// Probes `source` against the final-token aggregate of each requested LM
/// layer. Entries come back ordered by layer index; each target is
/// standardized on its own. Every probe gets its own rng sub-stream.
pub fn layer_target_sweep<T: Scalar>(
    source: &RepresentationSet,
    lm_states: &[LayerStates<T>],
    layers: &[usize],
    opts: &ProbeOptions,
    rng: &Rng,
) -> Result<ProbeReport> {
    let mut layers = layers.to_vec();
    layers.sort_unstable();
    layers.dedup();
    if let (Some(&max), Some(s)) = (layers.last(), lm_states.first()) {
        if max > s.depth() {
            return Err(Error::Range(format!("layer {max} outside 0..={}", s.depth())));
        }
    }
    let entries = exec::try_map_indexed(layers.len(), |i| {
        let j = layers[i];
        let target = layer_set(lm_states, j, &format!("lm layer {j}"), Aggregate::Last)?;
        let mut e = probe_regress(source, &target, opts, &mut rng.split(j as u64))?;
        e.layer = Some(j);
        Ok::<_, Error>(e)
    })?;
    Ok(ProbeReport { source: source.label.clone(), options: Some(opts.clone()), entries })
}
