//! AdamW with a parameter-set audit, and deterministic batch gradient
//! reduction over per-sample graphs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::params::ParamStore;
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, clip_norm: Some(1.0) }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// AdamW bound to exactly one trainable store. Stepping any other store, or a
/// frozen one, is an audit failure.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    store_uid: u64,
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
}

impl AdamW {
    pub fn new<T: Scalar>(config: AdamWConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        if store.is_frozen() {
            return Err(Error::Audit("optimizer constructed over a frozen parameter store".into()));
        }
        let names = store.iter().map(|(_, n, _)| n.to_string()).collect();
        let m = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect::<Vec<_>>();
        Ok(Self { config, store_uid: store.uid(), names, v: m.clone(), m, steps: 0 })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn store_uid(&self) -> u64 {
        self.store_uid
    }

    /// Names of every parameter the optimizer updates.
    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    /// Fails if the optimizer's store is one of `frozen_uids` or if any of its
    /// parameter names appear in `frozen_names`.
    pub fn audit(&self, frozen_uids: &[u64], frozen_names: &[&str]) -> Result<()> {
        if frozen_uids.contains(&self.store_uid) {
            return Err(Error::Audit(format!("optimizer store {} is a frozen store", self.store_uid)));
        }
        if let Some(n) = self.names.iter().find(|n| frozen_names.contains(&n.as_str())) {
            return Err(Error::Audit(format!("frozen parameter {n} in optimizer set")));
        }
        Ok(())
    }

    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &[Option<Vec<T>>]) -> Result<()> {
        if store.uid() != self.store_uid {
            return Err(Error::Audit(format!(
                "optimizer bound to store {} asked to step store {}",
                self.store_uid,
                store.uid()
            )));
        }
        if store.is_frozen() {
            return Err(Error::Audit("optimizer step on a frozen store".into()));
        }
        if grads.len() != self.m.len() {
            return Err(Error::contract(format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        let norm = grads.iter().flatten().flat_map(|g| g.iter()).map(|x| x.f64() * x.f64()).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::Training("non-finite gradient norm".into()));
        }
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.steps += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[k] else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let data = store.get_mut(id).data_mut();
            for i in 0..data.len() {
                let gi = g[i].f64() * clip;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                let p = data[i].f64();
                data[i] = T::of(p - c.lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * p));
            }
        }
        Ok(())
    }
}

/// Runs `f` for every sample of a batch (in parallel when enabled) and
/// returns the mean loss and mean gradient. Reduction happens in sample
/// order, so the result is independent of scheduling.
pub fn batch_gradients<T, F>(n: usize, f: F) -> Result<(f64, Vec<Option<Vec<T>>>)>
where
    T: Scalar,
    F: Fn(usize) -> Result<(f64, Vec<Option<Vec<T>>>)> + Sync + Send,
{
    if n == 0 {
        return Err(Error::contract("empty batch"));
    }
    let results = exec::try_map_indexed(n, f)?;
    let mut loss = 0.0;
    let mut sets = Vec::with_capacity(n);
    for (l, g) in results {
        loss += l;
        sets.push(g);
    }
    let inv = T::of(1.0 / n as f64);
    let mut grads = crate::params::sum_grads(sets);
    for g in grads.iter_mut().flatten() {
        g.iter_mut().for_each(|x| *x = *x * inv);
    }
    Ok((loss / n as f64, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn minimizes_quadratic() {
        let mut s: ParamStore<f64> = ParamStore::new();
        let w = s.zeros("w", &[2]);
        let cfg = AdamWConfig { lr: 0.05, weight_decay: 0.0, clip_norm: None, ..Default::default() };
        let mut opt = AdamW::new(cfg, &s).unwrap();
        for _ in 0..500 {
            let mut g = Graph::new();
            let p = g.param(&s, w);
            let t = g.constant(crate::Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap());
            let l = g.mse(p, t).unwrap();
            g.backward(l).unwrap();
            let grads = g.param_grads(&s);
            opt.step(&mut s, &grads).unwrap();
        }
        let v = s.get(w).data();
        assert!((v[0] - 1.0).abs() < 1e-3 && (v[1] + 2.0).abs() < 1e-3, "{v:?}");
    }

    #[test]
    fn refuses_foreign_or_frozen_store() {
        let mut a: ParamStore<f32> = ParamStore::new();
        a.zeros("w", &[1]);
        let mut b = a.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &a).unwrap();
        assert!(opt.step(&mut a, &[Some(vec![1.0])]).is_ok());
        b.freeze();
        assert!(matches!(AdamW::new(AdamWConfig::default(), &b), Err(Error::Audit(_))));
        assert!(matches!(opt.audit(&[a.uid()], &[]), Err(Error::Audit(_))));
    }
}
