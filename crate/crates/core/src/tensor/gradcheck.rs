//! Central finite-difference verification of autodiff gradients in `f64`.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor: error = |a - n| / max(|a|, |n|, floor).
    pub floor: f64,
    /// Check at most this many randomly chosen coordinates per tensor.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-5, max_coords_per_tensor: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (tensor label, coordinate) of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn coords(len: usize, opts: &GradCheckOptions, rng: &mut Rng) -> Vec<usize> {
    match opts.max_coords_per_tensor {
        Some(k) if k < len => {
            let mut all: Vec<usize> = (0..len).collect();
            rng.shuffle(&mut all);
            all.truncate(k);
            all.sort_unstable();
            all
        }
        _ => (0..len).collect(),
    }
}

fn scalar_of(g: &Graph<f64>, v: Var, label: &str, coord: usize) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::contract(format!("grad_check function returned shape {:?}", t.shape())));
    }
    let x = t.item();
    if !x.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {x} while perturbing {label}[{coord}]")));
    }
    Ok(x)
}

struct Tracker {
    report: GradCheckReport,
    floor: f64,
}

impl Tracker {
    fn record(&mut self, analytic: f64, numeric: f64, label: &str, coord: usize) {
        let e = rel_error(analytic, numeric, self.floor);
        self.report.checked += 1;
        if e > self.report.max_rel_error || self.report.worst.is_none() {
            self.report.max_rel_error = e.max(self.report.max_rel_error);
            self.report.worst = Some((label.to_string(), coord));
        }
    }
}

/// Checks `f` against central differences with respect to each tensor in
/// `params`, which `f` receives as gradient-requiring leaves.
pub fn grad_check<F>(params: &[Tensor<f64>], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let run = |ps: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone().with_requires_grad(true))).collect();
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let (mut g, vars, out) = run(params)?;
    scalar_of(&g, out, "<unperturbed>", 0)?;
    g.backward(out)?;
    let mut rng = Rng::new(opts.seed);
    let mut tr = Tracker { report: GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 }, floor: opts.floor };
    for (pi, p) in params.iter().enumerate() {
        let label = format!("param{pi}");
        let analytic = g.grad(vars[pi]).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; p.len()]);
        for c in coords(p.len(), opts, &mut rng) {
            let eval = |delta: f64| -> Result<f64> {
                let mut ps = params.to_vec();
                ps[pi].data_mut()[c] += delta;
                let (g2, _, o2) = run(&ps)?;
                scalar_of(&g2, o2, &label, c)
            };
            let num = (eval(opts.step)? - eval(-opts.step)?) / (2.0 * opts.step);
            tr.record(analytic[c], num, &label, c);
        }
    }
    Ok(tr.report)
}

/// Checks a loss built from a trainable store against central differences
/// with respect to every (or a sampled subset of) stored parameter.
pub fn grad_check_store<F>(store: &ParamStore<f64>, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if store.is_frozen() {
        return Err(Error::contract("grad_check_store on a frozen store"));
    }
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    scalar_of(&g, out, "<unperturbed>", 0)?;
    g.backward(out)?;
    let analytic = g.param_grads(store);
    let mut rng = Rng::new(opts.seed);
    let mut tr = Tracker { report: GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 }, floor: opts.floor };
    let mut work = store.clone();
    for id in store.ids() {
        let name = store.name(id).to_string();
        let len = store.get(id).len();
        let a = analytic[id.index()].clone().unwrap_or_else(|| vec![0.0; len]);
        for c in coords(len, opts, &mut rng) {
            let mut eval = |delta: f64| -> Result<f64> {
                let orig = store.get(id).data()[c];
                work.get_mut(id).data_mut()[c] = orig + delta;
                let mut g2 = Graph::new();
                let o2 = f(&mut g2, &work);
                work.get_mut(id).data_mut()[c] = orig;
                scalar_of(&g2, o2?, &name, c)
            };
            let num = (eval(opts.step)? - eval(-opts.step)?) / (2.0 * opts.step);
            tr.record(a[c], num, &name, c);
        }
    }
    Ok(tr.report)
}
