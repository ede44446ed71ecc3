//! Feedback controller for the per-task connector weights ω.
//!
//! Every validation tick the student's score on each task is compared to
//! the teacher's initial score, and ω is pulled toward
//! `mean(ω) · (a_i / mean(a))^α` by one SGD-with-momentum step on the
//! subgradient of `|ω_i − target_i|`, with the target held constant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::optim::{sgd_momentum_step_slice, SgdState};

pub const OMEGA_MIN: f64 = 1e-3;
pub const OMEGA_MAX: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScoreSpec {
    pub task: String,
    pub direction: Direction,
    /// Feedback scores are clamped to `[low, high]`.
    pub low: f64,
    pub high: f64,
}

impl TaskScoreSpec {
    pub fn new(task: impl Into<String>, direction: Direction) -> Self {
        Self {
            task: task.into(),
            direction,
            low: 0.05,
            high: 20.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.low > 0.0 && self.low < self.high) {
            return Err(Error::invalid(format!(
                "{}: feedback bounds [{}, {}] must satisfy 0 < low < high",
                self.task, self.low, self.high
            )));
        }
        Ok(())
    }
}

/// Student progress relative to the teacher: `r_S / r_T0` for
/// higher-is-better criteria and `r_T0 / r_S` for error criteria, so a
/// larger score always means a better student.
pub fn feedback_score(r_student: f64, r_teacher0: f64, spec: &TaskScoreSpec) -> Result<f64> {
    spec.validate()?;
    let (num, den) = match spec.direction {
        Direction::HigherBetter => (r_student, r_teacher0),
        Direction::LowerBetter => (r_teacher0, r_student),
    };
    if !(den > 0.0) || !num.is_finite() {
        return Err(Error::invalid(format!(
            "{}: feedback ratio {num} / {den} needs a positive denominator",
            spec.task
        )));
    }
    Ok((num / den).clamp(spec.low, spec.high))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean taken about the first element, so equal inputs give that value
/// exactly and the symmetric case stays an exact fixed point.
fn mean(v: &[f64]) -> f64 {
    let first = v[0];
    first + v.iter().map(|x| x - first).sum::<f64>() / v.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackState {
    pub omega: Vec<f64>,
    /// Momentum buffer and step settings (β, momentum) of the ω optimizer.
    pub sgd: SgdState,
    pub r_teacher0: Vec<f64>,
    pub a_latest: Vec<f64>,
    pub alpha: f64,
}

/// Values produced by one validation tick.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub r: Vec<f64>,
    pub a: Vec<f64>,
    pub omega: Vec<f64>,
}

impl FeedbackState {
    /// Fresh controller with every ω at 1.
    pub fn new(r_teacher0: Vec<f64>, alpha: f64, beta: f64, momentum: f64) -> Self {
        let n = r_teacher0.len();
        Self {
            omega: vec![1.0; n],
            sgd: SgdState::new(n, beta, momentum),
            a_latest: vec![1.0; n],
            r_teacher0,
            alpha,
        }
    }

    pub fn n_tasks(&self) -> usize {
        self.omega.len()
    }

    /// Targets `mean(ω) · (a_i / mean(a))^α` for the current ω.
    pub fn targets(&self, a: &[f64]) -> Vec<f64> {
        let mw = mean(&self.omega);
        let ma = mean(a);
        a.iter().map(|&ai| mw * (ai / ma).powf(self.alpha)).collect()
    }

    pub fn update_weights(&mut self, a: &[f64]) -> Result<()> {
        if a.len() != self.n_tasks() {
            return Err(Error::ShapeMismatch {
                op: "update_weights",
                axis: 0,
                expected: self.n_tasks(),
                found: a.len(),
            });
        }
        if let Some(v) = a.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!("feedback score {v} must be positive")));
        }
        let targets = self.targets(a);
        let grad: Vec<f64> = self
            .omega
            .iter()
            .zip(&targets)
            .map(|(&w, &t)| w * sign(w - t))
            .collect();
        sgd_momentum_step_slice(&mut self.omega, &grad, &mut self.sgd)?;
        for w in &mut self.omega {
            *w = w.clamp(OMEGA_MIN, OMEGA_MAX);
        }
        self.a_latest = a.to_vec();
        Ok(())
    }

    /// Scores → feedback → weight update for one validation pass.
    pub fn tick(&mut self, r_student: &[f64], specs: &[TaskScoreSpec]) -> Result<TickRecord> {
        if r_student.len() != self.n_tasks() || specs.len() != self.n_tasks() {
            return Err(Error::invalid(format!(
                "tick: {} tasks, got {} scores and {} specs",
                self.n_tasks(),
                r_student.len(),
                specs.len()
            )));
        }
        let a = r_student
            .iter()
            .zip(&self.r_teacher0)
            .zip(specs)
            .map(|((&r, &r0), s)| feedback_score(r, r0, s))
            .collect::<Result<Vec<_>>>()?;
        self.update_weights(&a)?;
        Ok(TickRecord {
            r: r_student.to_vec(),
            a,
            omega: self.omega.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feedback_examples() {
        let seg = TaskScoreSpec::new("seg", Direction::HigherBetter);
        let depth = TaskScoreSpec::new("depth", Direction::LowerBetter);
        assert_eq!(feedback_score(0.41, 0.82, &seg).unwrap(), 0.5);
        assert_eq!(feedback_score(0.3, 0.3, &seg).unwrap(), 1.0);
        assert_eq!(feedback_score(0.3, 0.3, &depth).unwrap(), 1.0);
        assert_eq!(feedback_score(0.4, 0.2, &depth).unwrap(), 0.5);
        assert_eq!(feedback_score(1e-9, 1.0, &seg).unwrap(), 0.05);
        assert!(feedback_score(0.0, 0.2, &depth).is_err());
        assert!(feedback_score(0.5, 0.0, &seg).is_err());
    }

    #[test]
    fn symmetric_equilibrium_is_a_no_op() {
        let mut s = FeedbackState::new(vec![0.8, 0.2], 1.5, 0.001, 0.1);
        s.update_weights(&[1.0, 1.0]).unwrap();
        assert_eq!(s.omega, vec![1.0, 1.0]);
        assert_eq!(s.sgd.velocity, vec![0.0, 0.0]);
    }

    #[test]
    fn hand_step() {
        let mut s = FeedbackState::new(vec![0.8, 0.2], 1.5, 0.001, 0.1);
        let t = s.targets(&[1.2, 0.8]);
        assert!((t[0] - 1.2f64.powf(1.5)).abs() < 1e-15);
        assert!((t[0] - 1.3145).abs() < 1e-4 && (t[1] - 0.7155).abs() < 1e-4);
        s.update_weights(&[1.2, 0.8]).unwrap();
        assert!((s.omega[0] - 1.001).abs() < 1e-12);
        assert!((s.omega[1] - 0.999).abs() < 1e-12);
    }
}
