//! Experiment orchestration: data, teacher pretraining, distillation runs,
//! evaluation and the ablation report.

pub mod config;
mod distill;
mod eval;
mod logs;
mod report;
mod teacher;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{DatasetConfig, ExperimentConfig, Mode, OptimizerConfig, Stream, N_TASKS};
pub use distill::{run_distill, DistillOptions, DistillOutcome, RunSummary, TeacherSet};
pub use eval::{eval_checkpoint, evaluate, predict, score_teacher_baseline, task_scores};
pub use report::{compare_runs, load_summary, render_table, report_runs, AblationRow, AblationTable};
pub use teacher::{load_teacher, pretrain_teacher, teacher_path};

use crate::error::{Error, Result};
use crate::nn::{ModelGraph, ModelSpec, TaskKind};
use crate::synthdata::{make_splits, Dataset, Split};
use crate::tensor::checkpoint::{self, Checkpoint};
use crate::tensor::optim::{sgd_momentum_step, SgdState};
use crate::tensor::{Gradients, Var};

/// The three generated splits of one configuration.
pub struct Data {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Data {
    pub fn generate(cfg: &DatasetConfig) -> Result<Self> {
        let splits = make_splits(cfg.split_spec(), cfg.base_seed)?;
        let gen = |s: Split| Dataset::generate(splits.get(s), cfg.height, cfg.width, cfg.classes);
        Ok(Self {
            train: gen(Split::Train)?,
            val: gen(Split::Val)?,
            test: gen(Split::Test)?,
        })
    }

    pub fn split(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Batch indices for step `i` are positions `[i * b, (i + 1) * b)` of an
/// endless sequence of per-epoch permutations, each seeded by
/// `(seed, epoch)`. The sampler is stateless apart from a cache, so any
/// step can be regenerated after a resume.
pub(crate) struct Sampler {
    seed: u64,
    n: usize,
    batch: usize,
    cached: Option<(u64, Vec<usize>)>,
}

impl Sampler {
    pub(crate) fn new(seed: u64, n: usize, batch: usize) -> Self {
        Self {
            seed,
            n,
            batch,
            cached: None,
        }
    }

    fn permutation(&mut self, epoch: u64) -> &[usize] {
        if self.cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch);
            let mut perm: Vec<usize> = (0..self.n).collect();
            perm.shuffle(&mut rng);
            self.cached = Some((epoch, perm));
        }
        &self.cached.as_ref().expect("cached permutation").1
    }

    pub(crate) fn indices(&mut self, step: usize) -> Vec<usize> {
        (0..self.batch)
            .map(|j| {
                let p = (step * self.batch + j) as u64;
                let (epoch, at) = (p / self.n as u64, (p % self.n as u64) as usize);
                self.permutation(epoch)[at]
            })
            .collect()
    }
}

/// SGD-with-momentum state for every parameter of one model.
pub(crate) struct ModelOptimizer {
    pub(crate) states: Vec<SgdState>,
    base_lr: f64,
}

/// Cosine decay from the configured rate to zero over `total` steps.
pub(crate) fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

impl ModelOptimizer {
    pub(crate) fn new(model: &ModelGraph, lr: f64, momentum: f64) -> Self {
        Self {
            states: model
                .params()
                .iter()
                .map(|(_, t)| SgdState::new(t.numel(), lr, momentum))
                .collect(),
            base_lr: lr,
        }
    }

    pub(crate) fn schedule(&mut self, step: usize, total: usize) {
        let lr = cosine_lr(self.base_lr, step, total);
        for s in &mut self.states {
            s.learning_rate = lr;
        }
    }

    pub(crate) fn step(&mut self, model: &mut ModelGraph, params: &[Var], grads: &Gradients) -> Result<()> {
        for (i, (&v, state)) in params.iter().zip(&mut self.states).enumerate() {
            let p = model.params_mut().at_mut(i);
            match grads.get(v) {
                Some(g) => sgd_momentum_step(p, g, state)?,
                None => {
                    let zero = vec![0.0; p.numel()];
                    sgd_momentum_step(p, &zero, state)?
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn model_metadata(model: &ModelGraph, extra: serde_json::Value) -> Result<serde_json::Value> {
    let mut meta = serde_json::json!({ "model": model.spec() });
    if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
        m.extend(e);
    }
    Ok(meta)
}

pub fn save_model(path: &Path, model: &ModelGraph, extra: serde_json::Value) -> Result<()> {
    checkpoint::save(
        path,
        &Checkpoint {
            metadata: model_metadata(model, extra)?,
            tensors: model.named_tensors(),
        },
    )
}

/// Loads a model checkpoint, returning the model and the full metadata.
pub fn load_model(path: &Path) -> Result<(ModelGraph, serde_json::Value)> {
    let ckpt = checkpoint::load(path)?;
    let spec: ModelSpec = serde_json::from_value(ckpt.metadata["model"].clone()).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: format!("bad model identity: {e}"),
    })?;
    let mut model = ModelGraph::from_spec(spec)?;
    model.load_named(|name| ckpt.get(name)).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok((model, ckpt.metadata))
}

/// The joint tasks of a configuration: segmentation then depth.
pub fn tasks(cfg: &ExperimentConfig) -> [TaskKind; N_TASKS] {
    crate::nn::joint_tasks(cfg.dataset.classes)
}

/// Everything one seed produces: teachers, all requested modes, a report.
pub struct ExperimentOutcome {
    pub runs: Vec<(Mode, RunSummary)>,
    pub table: AblationTable,
}

pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, modes: &[Mode]) -> Result<ExperimentOutcome> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data = Data::generate(&cfg.dataset)?;
    let teacher_dir = out.join("teachers");
    let tasks = tasks(cfg);
    let seg = pretrain_teacher(cfg, &data, tasks[0], &teacher_dir)?;
    let depth = pretrain_teacher(cfg, &data, tasks[1], &teacher_dir)?;
    let teachers = TeacherSet::new(cfg, &data, seg, depth)?;
    let mut runs = Vec::new();
    let mut dirs: Vec<PathBuf> = Vec::new();
    for &mode in modes {
        let dir = out.join(mode.name());
        let outcome = run_distill(
            &cfg.with_mode(mode),
            &data,
            Some(&teachers),
            &dir,
            &DistillOptions::default(),
        )?;
        match outcome {
            DistillOutcome::Finished(s) => runs.push((mode, *s)),
            DistillOutcome::Stopped { .. } => unreachable!("no stop requested"),
        }
        dirs.push(dir);
    }
    let table = report_runs(&dirs)?;
    let json = serde_json::to_string_pretty(&table)?;
    let path = out.join("report.json");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    let path = out.join("report.md");
    std::fs::write(&path, render_table(&table)).map_err(|e| Error::io(&path, e))?;
    Ok(ExperimentOutcome { runs, table })
}
