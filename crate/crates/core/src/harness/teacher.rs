use std::path::{Path, PathBuf};

use serde_json::json;

use super::logs::{num, CsvLog};
use super::{load_model, save_model, score_teacher_baseline, Data, ExperimentConfig, ModelOptimizer, Sampler, Stream};
use crate::error::{Error, Result};
use crate::losses::{task_loss, Target};
use crate::nn::{build_teacher, Bind, Mode, ModelGraph, TaskKind, TEACHER_WIDTHS};
use crate::tensor::Graph;

pub fn teacher_path(dir: &Path, task: TaskKind) -> PathBuf {
    dir.join(format!("teacher_{}.json", task.name()))
}

fn streams(task: TaskKind) -> (Stream, Stream) {
    match task {
        TaskKind::Segmentation { .. } => (Stream::SegTeacherInit, Stream::SegTeacherBatches),
        TaskKind::Depth => (Stream::DepthTeacherInit, Stream::DepthTeacherBatches),
    }
}

/// Trains one single-task teacher for `teacher_steps` iterations and saves
/// it, with its validation score, under `dir`.
pub fn pretrain_teacher(cfg: &ExperimentConfig, data: &Data, task: TaskKind, dir: &Path) -> Result<ModelGraph> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (init, batches) = streams(task);
    let mut model = build_teacher(task, &TEACHER_WIDTHS, cfg.stream_seed(init))?;
    let mut opt = ModelOptimizer::new(&model, cfg.optimizer.network_lr, cfg.optimizer.network_momentum);
    let mut sampler = Sampler::new(cfg.stream_seed(batches), data.train.len(), cfg.batch_size);
    let log_path = dir.join(format!("teacher_{}_loss.csv", task.name()));
    let mut log = CsvLog::create(&log_path, "iter,loss")?;
    for step in 0..cfg.teacher_steps {
        let iter = step + 1;
        let batch = data.train.batch(&sampler.indices(step));
        let mut g = Graph::new();
        let x = g.constant(batch.images);
        let out = model.forward(&mut g, x, Mode::Train, Bind::Trainable)?;
        let target = match task {
            TaskKind::Segmentation { .. } => Target::Segmentation(&batch.labels),
            TaskKind::Depth => Target::Depth(&batch.depth),
        };
        let loss = task_loss(&mut g, out.heads[0], target)?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::NumericalAbort {
                iteration: iter,
                detail: format!("{} teacher loss {value}", task.name()),
            });
        }
        let grads = g.backward(loss)?;
        opt.schedule(step, cfg.teacher_steps);
        opt.step(&mut model, &out.params, &grads)?;
        model.commit_batch_stats(&out.bn_stats)?;
        log.row(&[iter.to_string(), num(value)])?;
    }
    log.flush()?;
    let score = score_teacher_baseline(&model, &data.val)?;
    log::info!("{} teacher: validation score {score:.4}", task.name());
    save_model(
        &teacher_path(dir, task),
        &model,
        json!({
            "role": "teacher",
            "task": task.name(),
            "dataset": cfg.dataset,
            "seed": cfg.seed,
            "steps": cfg.teacher_steps,
            "val_score": score,
        }),
    )?;
    Ok(model)
}

/// Loads a teacher saved by [`pretrain_teacher`], checking it was trained
/// on the configured dataset.
pub fn load_teacher(dir: &Path, task: TaskKind, cfg: &ExperimentConfig) -> Result<ModelGraph> {
    let path = teacher_path(dir, task);
    let (model, meta) = load_model(&path)?;
    if meta["dataset"] != serde_json::to_value(&cfg.dataset)? {
        return Err(Error::Config(format!(
            "{} was trained on a different dataset than the config describes",
            path.display()
        )));
    }
    if model.spec().heads != [task] {
        return Err(Error::Checkpoint {
            path,
            reason: format!("not a {} teacher", task.name()),
        });
    }
    Ok(model)
}
