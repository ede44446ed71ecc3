//! Task losses and distillation terms.
//!
//! Segmentation terms compare class distributions (softmax over the channel
//! axis, temperature 1). Depth is a regression output, so its distillation
//! terms use the mean absolute difference instead of a divergence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::TaskKind;
use crate::tensor::{Graph, Tensor, Var};

/// Ground truth for one task over a batch.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    /// Labels of shape [N, H, W], flattened.
    Segmentation(&'a [usize]),
    /// Depth map of shape [N, 1, H, W].
    Depth(&'a Tensor),
}

/// Mean per-pixel cross-entropy of `logits` [N, C, H, W].
pub fn task_loss_segmentation(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let logp = g.log_softmax(logits, 1)?;
    g.nll(logp, labels)
}

/// Mean absolute error of `pred` [N, 1, H, W] against a constant map.
pub fn task_loss_depth(g: &mut Graph, pred: Var, gt: &Tensor) -> Result<Var> {
    g.value(pred).expect_shape("depth loss", gt.shape())?;
    let gt = g.constant(gt.clone());
    mean_abs_diff(g, pred, gt)
}

pub fn task_loss(g: &mut Graph, pred: Var, target: Target<'_>) -> Result<Var> {
    match target {
        Target::Segmentation(labels) => task_loss_segmentation(g, pred, labels),
        Target::Depth(gt) => task_loss_depth(g, pred, gt),
    }
}

fn mean_abs_diff(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// Mean per-pixel `KL(softmax(p) || softmax(q))` over the class axis of two
/// [N, C, H, W] logit maps.
pub fn kl_per_pixel(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    let (n, _, h, w) = g.value(p).dims4("kl")?;
    let lp = g.log_softmax(p, 1)?;
    let lq = g.log_softmax(q, 1)?;
    let prob = g.exp(lp);
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(prob, diff)?;
    let total = g.sum(terms);
    Ok(g.scale(total, 1.0 / (n * h * w) as f64))
}

/// Divergence of a learner output from a target output for one task; the
/// target is detached.
pub fn distill_divergence(g: &mut Graph, task: TaskKind, learner: Var, target: Var) -> Result<Var> {
    g.value(learner).expect_shape("distill", g.value(target).shape())?;
    let target = g.detach(target);
    match task {
        TaskKind::Segmentation { .. } => kl_per_pixel(g, learner, target),
        TaskKind::Depth => mean_abs_diff(g, learner, target),
    }
}

fn check_arity(op: &str, tasks: usize, lens: &[usize]) -> Result<()> {
    if lens.iter().any(|&l| l != tasks) {
        return Err(Error::invalid(format!(
            "{op}: expected {tasks} outputs per model, got {lens:?}"
        )));
    }
    Ok(())
}

/// Student-to-connector logits loss, summed over tasks. No gradient reaches
/// the connector outputs.
pub fn logits_distill_loss(g: &mut Graph, tasks: &[TaskKind], student: &[Var], connector: &[Var]) -> Result<Var> {
    check_arity("logits loss", tasks.len(), &[student.len(), connector.len()])?;
    let terms = tasks
        .iter()
        .zip(student.iter().zip(connector))
        .map(|(&t, (&s, &c))| distill_divergence(g, t, s, c))
        .collect::<Result<Vec<_>>>()?;
    g.add_all(&terms)
}

/// Connector-to-teacher loss `Σ ω_i · D_i`; teacher outputs are constants.
pub fn connector_loss(
    g: &mut Graph,
    tasks: &[TaskKind],
    connector: &[Var],
    teacher: &[Var],
    omega: &[f64],
) -> Result<Var> {
    check_arity(
        "connector loss",
        tasks.len(),
        &[connector.len(), teacher.len(), omega.len()],
    )?;
    if let Some(w) = omega.iter().find(|&&w| !(w > 0.0)) {
        return Err(Error::invalid(format!("connector weight must be positive, got {w}")));
    }
    let mut terms = Vec::with_capacity(tasks.len());
    for ((&t, (&c, &p)), &w) in tasks.iter().zip(connector.iter().zip(teacher)).zip(omega) {
        let d = distill_divergence(g, t, c, p)?;
        terms.push(g.scale(d, w));
    }
    g.add_all(&terms)
}

/// Fixed-weight multi-task distillation loss `Σ_i L_task^i + ω_i · L_kd^i`.
pub fn static_baseline_loss(g: &mut Graph, task_losses: &[Var], kd_losses: &[Var], omega: &[f64]) -> Result<Var> {
    check_arity("static loss", task_losses.len(), &[kd_losses.len(), omega.len()])?;
    let mut terms = task_losses.to_vec();
    for (&kd, &w) in kd_losses.iter().zip(omega) {
        terms.push(g.scale(kd, w));
    }
    g.add_all(&terms)
}

/// Scalar values of the student objective at one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: Vec<f64>,
    pub logits: f64,
    pub traj: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn new(task: &[f64], logits: f64, traj: f64, lambda: f64) -> Result<Self> {
        for (i, v) in task.iter().enumerate() {
            finite(&format!("task loss {i}"), *v)?;
        }
        finite("logits loss", logits)?;
        finite("trajectory loss", traj)?;
        finite("lambda", lambda)?;
        let total = task.iter().sum::<f64>() + logits + lambda * traj;
        finite("total loss", total)?;
        Ok(Self {
            task: task.to_vec(),
            logits,
            traj,
            total,
            lambda,
        })
    }
}

fn finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: format!("{what} ({v})"),
        })
    }
}

/// Student objective `Σ task + logits + λ · traj` on the graph, plus its
/// scalar breakdown.
pub fn student_total_loss(
    g: &mut Graph,
    task_losses: &[Var],
    logits: Var,
    traj: Var,
    lambda: f64,
) -> Result<(Var, LossBreakdown)> {
    let task: Vec<f64> = task_losses.iter().map(|&v| g.value(v).item()).collect::<Result<_>>()?;
    let breakdown = LossBreakdown::new(&task, g.value(logits).item()?, g.value(traj).item()?, lambda)?;
    let mut terms = task_losses.to_vec();
    terms.push(logits);
    terms.push(g.scale(traj, lambda));
    Ok((g.add_all(&terms)?, breakdown))
}
