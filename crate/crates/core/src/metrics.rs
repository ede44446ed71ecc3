//! Segmentation and depth metrics and the multi-task improvement score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            axis: 0,
            expected: a,
            found: b,
        });
    }
    if a == 0 {
        return Err(Error::EmptyAxis { op, axis: 0 });
    }
    Ok(())
}

/// `counts[gt * classes + pred]`, accumulated over any number of maps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        check_len("confusion", gt.len(), pred.len())?;
        let c = self.classes;
        if let Some((i, &l)) = pred.iter().chain(gt).enumerate().find(|(_, &l)| l >= c) {
            return Err(Error::invalid(format!(
                "label {l} at flat index {} of {} outside [0, {c})",
                i % pred.len(),
                if i < pred.len() { "prediction" } else { "ground truth" }
            )));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.counts[g * c + p] += 1;
        }
        Ok(())
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Mean IoU over classes present in the prediction or the ground truth.
    pub fn miou(&self) -> f64 {
        let c = self.classes;
        let mut sum = 0.0;
        let mut present = 0usize;
        for k in 0..c {
            let tp = self.count(k, k);
            let gt_k: u64 = (0..c).map(|p| self.count(k, p)).sum();
            let pred_k: u64 = (0..c).map(|g| self.count(g, k)).sum();
            let union = gt_k + pred_k - tp;
            if union > 0 {
                sum += tp as f64 / union as f64;
                present += 1;
            }
        }
        if present == 0 {
            0.0
        } else {
            sum / present as f64
        }
    }

    pub fn pixel_acc(&self) -> f64 {
        let hits: u64 = (0..self.classes).map(|k| self.count(k, k)).sum();
        hits as f64 / self.total() as f64
    }
}

pub fn miou(pred: &[usize], gt: &[usize], classes: usize) -> Result<f64> {
    let mut m = Confusion::new(classes);
    m.add(pred, gt)?;
    Ok(m.miou())
}

pub fn pixel_acc(pred: &[usize], gt: &[usize]) -> Result<f64> {
    check_len("pixel_acc", gt.len(), pred.len())?;
    let hits = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gt.len() as f64)
}

/// Running sums for mean absolute and mean relative depth error.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DepthErrors {
    abs_sum: f64,
    rel_sum: f64,
    count: usize,
}

impl DepthErrors {
    pub fn add(&mut self, pred: &[f64], gt: &[f64]) -> Result<()> {
        check_len("depth_errors", gt.len(), pred.len())?;
        if let Some((i, g)) = gt.iter().enumerate().find(|(_, &g)| !(g > 0.0)) {
            return Err(Error::invalid(format!(
                "ground-truth depth {g} at flat index {i} must be positive"
            )));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            let d = (p - g).abs();
            self.abs_sum += d;
            self.rel_sum += d / g;
        }
        self.count += gt.len();
        Ok(())
    }

    /// `(mean |Δ|, mean |Δ| / gt)`.
    pub fn finish(&self) -> (f64, f64) {
        let n = self.count as f64;
        (self.abs_sum / n, self.rel_sum / n)
    }
}

pub fn depth_errors(pred: &[f64], gt: &[f64]) -> Result<(f64, f64)> {
    let mut e = DepthErrors::default();
    e.add(pred, gt)?;
    Ok(e.finish())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionValue {
    pub name: String,
    pub value: f64,
    pub higher_better: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub criteria: Vec<CriterionValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_mtl: Option<f64>,
}

impl MetricReport {
    pub fn new(criteria: Vec<CriterionValue>) -> Self {
        Self {
            criteria,
            baseline: None,
            delta_mtl: None,
        }
    }

    /// The four joint-task criteria in reporting order.
    pub fn joint(miou: f64, pixel_acc: f64, abs_err: f64, rel_err: f64) -> Self {
        let c = |name: &str, value, higher_better| CriterionValue {
            name: name.into(),
            value,
            higher_better,
        };
        Self::new(vec![
            c("miou", miou, true),
            c("pixel_acc", pixel_acc, true),
            c("abs_err", abs_err, false),
            c("rel_err", rel_err, false),
        ])
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.criteria.iter().find(|c| c.name == name).map(|c| c.value)
    }

    /// Attaches Δ_MTL against `baseline`, labelled `name`.
    pub fn with_baseline(mut self, name: impl Into<String>, baseline: &MetricReport) -> Result<Self> {
        self.delta_mtl = Some(delta_mtl(&self, baseline)?);
        self.baseline = Some(name.into());
        Ok(self)
    }

    /// One CSV line: criterion values in order, then Δ_MTL (empty if absent).
    pub fn csv_row(&self) -> String {
        let mut cells: Vec<String> = self.criteria.iter().map(|c| format!("{}", c.value)).collect();
        cells.push(self.delta_mtl.map(|d| format!("{d}")).unwrap_or_default());
        cells.join(",")
    }

    pub fn csv_header(&self) -> String {
        let mut cells: Vec<&str> = self.criteria.iter().map(|c| c.name.as_str()).collect();
        cells.push("delta_mtl");
        cells.join(",")
    }
}

/// Mean signed relative change over all criteria, in percent. Gains on
/// higher-is-better criteria and reductions on lower-is-better criteria
/// both count as improvement.
pub fn delta_mtl(report: &MetricReport, baseline: &MetricReport) -> Result<f64> {
    if report.criteria.len() != baseline.criteria.len() || report.criteria.is_empty() {
        return Err(Error::invalid(format!(
            "cannot compare {} criteria against {}",
            report.criteria.len(),
            baseline.criteria.len()
        )));
    }
    let mut sum = 0.0;
    for (r, b) in report.criteria.iter().zip(&baseline.criteria) {
        if r.name != b.name || r.higher_better != b.higher_better {
            return Err(Error::invalid(format!(
                "criterion {:?} does not match baseline criterion {:?}",
                r.name, b.name
            )));
        }
        if b.value == 0.0 {
            return Err(Error::invalid(format!("baseline {} is zero", b.name)));
        }
        let sign = if r.higher_better { 1.0 } else { -1.0 };
        sum += sign * (r.value - b.value) / b.value;
    }
    Ok(100.0 * sum / report.criteria.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_and_half() {
        let gt = [0, 0, 1, 1];
        assert_eq!(miou(&[0, 0, 0, 0], &gt, 2).unwrap(), 0.25);
        assert_eq!(miou(&gt, &gt, 2).unwrap(), 1.0);
        assert_eq!(pixel_acc(&[1, 1, 0, 0], &gt).unwrap(), 0.0);
        assert!(miou(&[0, 0, 0, 2], &gt, 2).is_err());
    }

    #[test]
    fn absent_classes_are_excluded() {
        assert_eq!(miou(&[0, 1], &[0, 1], 5).unwrap(), 1.0);
    }

    #[test]
    fn depth_example() {
        let (a, r) = depth_errors(&[0.6; 3], &[0.5; 3]).unwrap();
        assert!((a - 0.1).abs() < 1e-15 && (r - 0.2).abs() < 1e-15);
        assert!(depth_errors(&[0.6], &[0.0]).is_err());
    }

    #[test]
    fn published_tables() {
        let base = MetricReport::joint(0.8149, 0.9518, 0.0105, 36.8269);
        let ours = MetricReport::joint(0.8173, 0.9528, 0.0114, 20.5076);
        assert!((delta_mtl(&ours, &base).unwrap() - 9.04).abs() < 0.02);
        let base = MetricReport::joint(0.4332, 0.7098, 0.1585, 0.4053);
        let ours = MetricReport::joint(0.4381, 0.7177, 0.1518, 0.3857);
        assert!((delta_mtl(&ours, &base).unwrap() - 2.83).abs() < 0.02);
        assert_eq!(delta_mtl(&base, &base).unwrap(), 0.0);
    }
}
