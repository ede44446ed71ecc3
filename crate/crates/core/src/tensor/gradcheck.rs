//! Central finite-difference verification of graph gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so gradients that are
    /// numerically zero are compared in absolute terms.
    pub floor: f64,
    /// Check at most this many coordinates per parameter (all if `None`).
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Added to every analytic gradient before comparison; negative-control
    /// testing only.
    pub analytic_offset: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-6,
            tolerance: 1e-5,
            floor: 1e-3,
            max_coords: None,
            seed: 0,
            analytic_offset: 0.0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    /// Coordinates whose perturbation flipped a ReLU.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }
}

fn evaluate<F>(params: &[(String, Tensor)], f: &F) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok((g.value(loss).item()?, g.relu_pattern()))
}

/// Compares the analytic gradient of the scalar built by `f` against
/// central differences for each named parameter group. `f` must be
/// deterministic.
pub fn grad_check<F>(params: &[(String, Tensor)], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let base_pattern = g.relu_pattern();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(&g, v)).collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<(String, Tensor)> = params.to_vec();
    let mut groups = Vec::with_capacity(params.len());
    for (gi, (name, tensor)) in params.iter().enumerate() {
        let n = tensor.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut report = GroupReport {
            name: name.clone(),
            checked: 0,
            skipped_kinks: 0,
            max_rel_error: 0.0,
        };
        for &i in &coords {
            let orig = tensor.data()[i];
            work[gi].1.data_mut()[i] = orig + opts.step;
            let (plus, pat_p) = evaluate(&work, &f)?;
            work[gi].1.data_mut()[i] = orig - opts.step;
            let (minus, pat_m) = evaluate(&work, &f)?;
            work[gi].1.data_mut()[i] = orig;
            if pat_p != base_pattern || pat_m != base_pattern {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[gi].data()[i] + opts.analytic_offset;
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / denom;
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
        groups.push(report);
    }
    let passed = groups
        .iter()
        .all(|g| g.checked > 0 && g.max_rel_error <= opts.tolerance);
    Ok(GradCheckReport {
        groups,
        tolerance: opts.tolerance,
        passed,
    })
}
