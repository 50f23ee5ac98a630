use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, NdResult, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub samples: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-3, samples: 24, tolerance: 1e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub max_relative_error: f64,
    pub coordinates_sampled: usize,
    pub passed: bool,
    /// `(param index, flat coordinate, analytic, numeric)` at the worst sample.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Runs `build` on a fresh graph with one gradient-receiving leaf per entry
/// of `params` and returns the loss value and the gradient of every leaf.
pub fn analytic_gradients<'a, F>(params: &[Tensor], build: F) -> NdResult<(f32, Vec<Tensor>)>
where
    F: FnOnce(&mut Graph<'a>, &[Var]) -> NdResult<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let grads = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((g.value(loss).item()?, grads))
}

/// Compares `analytic` gradients against central differences of `f`.
///
/// `f` evaluates the same scalar function from parameter values given as
/// f64 buffers (one per entry of `params`, same layout). Perturbations are
/// applied in f64, so the oracle's resolution is not bounded by f32 output
/// rounding. Coordinates are drawn uniformly over all parameters; the
/// relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F>(
    op: &str,
    params: &[Tensor],
    analytic: &[Tensor],
    cfg: &GradCheckConfig,
    mut f: F,
) -> GradCheckReport
where
    F: FnMut(&[Vec<f64>]) -> f64,
{
    let mut work: Vec<Vec<f64>> =
        params.iter().map(|p| p.data().iter().map(|&v| v as f64).collect()).collect();
    let total: usize = params.iter().map(Tensor::numel).sum();
    let samples = cfg.samples.min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut worst = None;
    let mut max_rel = 0.0f64;
    for _ in 0..samples {
        let mut flat = rng.random_range(0..total);
        let mut pi = 0;
        while flat >= params[pi].numel() {
            flat -= params[pi].numel();
            pi += 1;
        }
        let x = work[pi][flat];
        work[pi][flat] = x + cfg.eps;
        let fp = f(&work);
        work[pi][flat] = x - cfg.eps;
        let fm = f(&work);
        work[pi][flat] = x;
        let numeric = (fp - fm) / (2.0 * cfg.eps);
        let a = analytic[pi].data()[flat] as f64;
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if worst.is_none() || rel > max_rel {
            max_rel = rel;
            worst = Some((pi, flat, a, numeric));
        }
    }
    GradCheckReport {
        op: op.to_string(),
        max_relative_error: max_rel,
        coordinates_sampled: samples,
        passed: max_rel <= cfg.tolerance,
        worst,
    }
}
