use std::path::Path;

use super::{load_model, Data, DatasetConfig};
use crate::error::{Error, Result};
use crate::metrics::{Confusion, CriterionValue, DepthErrors, MetricReport};
use crate::nn::{Bind, Mode, ModelGraph, TaskKind};
use crate::synthdata::{Dataset, Split};
use crate::tensor::{Graph, Tensor};

const EVAL_BATCH: usize = 32;

/// Eval-mode head outputs for a batch of images.
pub fn predict(model: &ModelGraph, images: &Tensor) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let out = model.forward(&mut g, x, Mode::Eval, Bind::Frozen)?;
    Ok(out.heads.iter().map(|&h| g.value(h).clone()).collect())
}

/// Per-pixel argmax over the class axis of [N, C, H, W] logits; ties go
/// to the lower class.
pub(crate) fn argmax_classes(logits: &Tensor) -> Result<Vec<usize>> {
    let (n, c, h, w) = logits.dims4("argmax")?;
    let hw = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for s in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if d[(s * c + k) * hw + p] > d[(s * c + best) * hw + p] {
                    best = k;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

enum Acc {
    Seg(Confusion),
    Depth(DepthErrors),
}

fn accumulate(model: &ModelGraph, data: &Dataset) -> Result<Vec<Acc>> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation over an empty split"));
    }
    let mut accs: Vec<Acc> = model
        .spec()
        .heads
        .iter()
        .map(|t| match t {
            TaskKind::Segmentation { classes } => Acc::Seg(Confusion::new(*classes)),
            TaskKind::Depth => Acc::Depth(DepthErrors::default()),
        })
        .collect();
    for batch in data.chunks(EVAL_BATCH) {
        let heads = predict(model, &batch.images)?;
        for (acc, out) in accs.iter_mut().zip(&heads) {
            match acc {
                Acc::Seg(m) => m.add(&argmax_classes(out)?, &batch.labels)?,
                Acc::Depth(e) => e.add(out.data(), batch.depth.data())?,
            }
        }
    }
    Ok(accs)
}

/// All criteria of every head of `model` on `data`, in head order.
pub fn evaluate(model: &ModelGraph, data: &Dataset) -> Result<MetricReport> {
    let c = |name: &str, value, higher_better| CriterionValue {
        name: name.into(),
        value,
        higher_better,
    };
    let mut criteria = Vec::new();
    for acc in accumulate(model, data)? {
        match acc {
            Acc::Seg(m) => {
                criteria.push(c("miou", m.miou(), true));
                criteria.push(c("pixel_acc", m.pixel_acc(), true));
            }
            Acc::Depth(e) => {
                let (abs, rel) = e.finish();
                criteria.push(c("abs_err", abs, false));
                criteria.push(c("rel_err", rel, false));
            }
        }
    }
    Ok(MetricReport::new(criteria))
}

/// Controller score per head: mIoU for segmentation, relative error for
/// depth.
pub fn task_scores(model: &ModelGraph, data: &Dataset) -> Result<Vec<f64>> {
    Ok(accumulate(model, data)?
        .iter()
        .map(|a| match a {
            Acc::Seg(m) => m.miou(),
            Acc::Depth(e) => e.finish().1,
        })
        .collect())
}

/// Reference score of a single-task teacher on the validation split.
pub fn score_teacher_baseline(teacher: &ModelGraph, val: &Dataset) -> Result<f64> {
    match task_scores(teacher, val)?[..] {
        [r] => Ok(r),
        ref s => Err(Error::invalid(format!("teacher has {} heads", s.len()))),
    }
}

/// Evaluates a saved teacher or student on a split regenerated from the
/// dataset recorded in its checkpoint.
pub fn eval_checkpoint(path: &Path, split: Split) -> Result<MetricReport> {
    let (model, meta) = load_model(path)?;
    let dataset: DatasetConfig = serde_json::from_value(meta["dataset"].clone()).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: format!("missing dataset description: {e}"),
    })?;
    let data = Data::generate(&dataset)?;
    evaluate(&model, data.split(split))
}
