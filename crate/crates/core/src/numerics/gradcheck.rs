use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// Result of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |analytic|)` over all checked coordinates.
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coordinates_checked: usize,
}

/// Which coordinates to probe and how far.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates sampled per parameter; parameters at or below this size are checked fully.
    pub max_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-3,
            max_per_param: 24,
            seed: 0,
        }
    }
}

fn eval_loss<F>(params: &ParamStore, forward: &F) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = forward(params, &mut g)?;
    let v = g.value(loss).item() as f64;
    if !v.is_finite() {
        return Err(Error::NonFinite("loss during gradient check".into()));
    }
    Ok(v)
}

/// Runs `forward` once and returns the gradients reverse mode assigns to every parameter.
pub fn analytic_gradients<F>(params: &ParamStore, forward: &F) -> Result<BTreeMap<String, Tensor>>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut store = params.clone();
    store.zero_grads();
    let mut g = Graph::new();
    let loss = forward(&store, &mut g)?;
    if !g.value(loss).item().is_finite() {
        return Err(Error::NonFinite("loss during gradient check".into()));
    }
    g.backward(loss, &mut store)?;
    Ok(store
        .grads()
        .map(|(name, t)| (name.to_string(), t.clone()))
        .collect())
}

/// Compares reverse-mode gradients of `forward` against central differences.
pub fn grad_check<F>(params: &ParamStore, options: GradCheckOptions, forward: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    let analytic = analytic_gradients(params, &forward)?;
    grad_check_against(params, &analytic, options, forward)
}

/// Like [`grad_check`] but with caller-supplied analytic gradients.
pub fn grad_check_against<F>(
    params: &ParamStore,
    analytic: &BTreeMap<String, Tensor>,
    options: GradCheckOptions,
    forward: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    if !(options.eps > 0.0 && options.eps <= 1e-2) {
        return Err(Error::invalid(format!(
            "gradient-check eps must be in (0, 1e-2], got {}",
            options.eps
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coordinates_checked: 0,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let grad = analytic
            .get(&name)
            .ok_or_else(|| Error::invalid(format!("no analytic gradient for `{name}`")))?;
        let n = params.get(&name)?.len();
        let indices: Vec<usize> = if n <= options.max_per_param {
            (0..n).collect()
        } else {
            let mut idx = sample(&mut rng, n, options.max_per_param).into_vec();
            idx.sort_unstable();
            idx
        };
        for i in indices {
            let original = params.get(&name)?.data()[i];
            let plus = (original as f64 + options.eps) as f32;
            let minus = (original as f64 - options.eps) as f32;

            work.get_mut(&name)?.data_mut()[i] = plus;
            let f_plus = eval_loss(&work, &forward)?;
            work.get_mut(&name)?.data_mut()[i] = minus;
            let f_minus = eval_loss(&work, &forward)?;
            work.get_mut(&name)?.data_mut()[i] = original;

            let numeric = (f_plus - f_minus) / (plus as f64 - minus as f64);
            let a = grad.data()[i] as f64;
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            report.coordinates_checked += 1;
            if rel > report.max_relative_error || report.worst_param.is_empty() {
                report.max_relative_error = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
