use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::logs::{num, CsvLog};
use super::{
    evaluate, save_model, score_teacher_baseline, task_scores, tasks, Data, ExperimentConfig, Mode, ModelOptimizer,
    Sampler, Stream, N_TASKS,
};
use crate::error::{Error, Result};
use crate::feedback::{feedback_score, Direction, FeedbackState, TaskScoreSpec, TickRecord};
use crate::losses::{
    connector_loss, distill_divergence, logits_distill_loss, static_baseline_loss, student_total_loss, task_loss_depth,
    task_loss_segmentation, LossBreakdown,
};
use crate::metrics::MetricReport;
use crate::nn::{self, build_connector, build_student, Bind, ModelGraph, ModelSpec, STUDENT_WIDTHS};
use crate::tensor::checkpoint::{self, Checkpoint};
use crate::tensor::{Graph, Tensor, Var};
use crate::trajectory::{attention_map, soft_points, AttentionMap, Frame, TrajectoryBuffer};

const STATE_FILE: &str = "state.json";

/// Frozen teachers plus their eval-mode outputs on every training scene.
///
/// Eval-mode forward passes treat samples independently, so caching the
/// outputs once gives the same values as recomputing them per batch.
pub struct TeacherSet {
    pub seg: ModelGraph,
    pub depth: ModelGraph,
    /// Validation score of each teacher on its own task.
    pub r_teacher0: Vec<f64>,
    h: usize,
    w: usize,
    fused_channels: usize,
    fused: Vec<f64>,
    head_channels: [usize; N_TASKS],
    logits: [Vec<f64>; N_TASKS],
}

impl TeacherSet {
    pub fn new(cfg: &ExperimentConfig, data: &Data, seg: ModelGraph, depth: ModelGraph) -> Result<Self> {
        let tasks = tasks(cfg);
        if seg.spec().heads != [tasks[0]] || depth.spec().heads != [tasks[1]] {
            return Err(Error::invalid("teachers do not match the configured tasks"));
        }
        let r_teacher0 = vec![
            score_teacher_baseline(&seg, &data.val)?,
            score_teacher_baseline(&depth, &data.val)?,
        ];
        let (h, w) = (cfg.dataset.height, cfg.dataset.width);
        let fused_channels = seg.feature_width() + depth.feature_width();
        let head_channels = [tasks[0].out_channels(), tasks[1].out_channels()];
        let mut fused = Vec::with_capacity(data.train.len() * fused_channels * h * w);
        let mut logits = [Vec::new(), Vec::new()];
        for batch in data.train.chunks(16) {
            let mut g = Graph::new();
            let x = g.constant(batch.images);
            let a = seg.forward(&mut g, x, nn::Mode::Eval, Bind::Frozen)?;
            let b = depth.forward(&mut g, x, nn::Mode::Eval, Bind::Frozen)?;
            let f = nn::fuse_features(&mut g, &[a.features, b.features])?;
            fused.extend_from_slice(g.value(f).data());
            logits[0].extend_from_slice(g.value(a.heads[0]).data());
            logits[1].extend_from_slice(g.value(b.heads[0]).data());
        }
        Ok(Self {
            seg,
            depth,
            r_teacher0,
            h,
            w,
            fused_channels,
            fused,
            head_channels,
            logits,
        })
    }

    fn gather(&self, src: &[f64], channels: usize, idx: &[usize]) -> Tensor {
        let per = channels * self.h * self.w;
        let mut out = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            out.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        Tensor::new(vec![idx.len(), channels, self.h, self.w], out).expect("cached batch shape")
    }

    /// Fused teacher features for the training scenes `idx`.
    pub fn features(&self, idx: &[usize]) -> Tensor {
        self.gather(&self.fused, self.fused_channels, idx)
    }

    /// Teacher outputs for the training scenes `idx`, in task order.
    pub fn logits(&self, idx: &[usize]) -> Vec<Tensor> {
        (0..N_TASKS)
            .map(|t| self.gather(&self.logits[t], self.head_channels[t], idx))
            .collect()
    }

    fn widths(&self) -> Vec<usize> {
        vec![self.seg.feature_width(), self.depth.feature_width()]
    }
}

#[derive(Clone, Debug, Default)]
pub struct DistillOptions {
    /// Continue from `state.json` in the output directory if present.
    pub resume: bool,
    /// Checkpoint and return once this iteration completes.
    pub stop_after: Option<usize>,
}

/// Final record of a completed run. Contains no timing information, so
/// identical configurations produce identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub iterations: usize,
    pub teacher_val_scores: Vec<f64>,
    pub omega: Vec<f64>,
    pub val: MetricReport,
    pub test: MetricReport,
    pub config: ExperimentConfig,
}

pub enum DistillOutcome {
    Finished(Box<RunSummary>),
    Stopped { iteration: usize },
}

struct State {
    iteration: usize,
    student: ModelGraph,
    student_opt: ModelOptimizer,
    connector: Option<(ModelGraph, ModelOptimizer)>,
    controller: FeedbackState,
    traj_connector: TrajectoryBuffer,
    traj_student: TrajectoryBuffer,
}

fn score_specs() -> Vec<TaskScoreSpec> {
    vec![
        TaskScoreSpec::new("seg", Direction::HigherBetter),
        TaskScoreSpec::new("depth", Direction::LowerBetter),
    ]
}

impl State {
    fn fresh(cfg: &ExperimentConfig, teachers: Option<&TeacherSet>) -> Result<Self> {
        let tasks = tasks(cfg);
        let student = build_student(&tasks, &STUDENT_WIDTHS, cfg.stream_seed(Stream::StudentInit))?;
        let student_opt = ModelOptimizer::new(&student, cfg.optimizer.network_lr, cfg.optimizer.network_momentum);
        let connector = match (cfg.mode.uses_connector(), teachers) {
            (true, Some(t)) => {
                let c = build_connector(&t.widths(), &tasks, cfg.stream_seed(Stream::ConnectorInit))?;
                let opt = ModelOptimizer::new(&c, cfg.optimizer.connector_lr, cfg.optimizer.network_momentum);
                Some((c, opt))
            }
            (true, None) => return Err(Error::Config(format!("mode {} needs teachers", cfg.mode))),
            _ => None,
        };
        let r0 = teachers
            .map(|t| t.r_teacher0.clone())
            .unwrap_or_else(|| vec![1.0; N_TASKS]);
        Ok(Self {
            iteration: 0,
            student,
            student_opt,
            connector,
            controller: FeedbackState::new(
                r0,
                cfg.alpha,
                cfg.optimizer.controller_beta,
                cfg.optimizer.controller_momentum,
            ),
            traj_connector: TrajectoryBuffer::new(cfg.window, cfg.k)?,
            traj_student: TrajectoryBuffer::new(cfg.window, cfg.k)?,
        })
    }

    fn save(&self, path: &Path, cfg: &ExperimentConfig) -> Result<()> {
        let mut tensors = Vec::new();
        let mut add_model = |prefix: &str, model: &ModelGraph, opt: &ModelOptimizer| {
            for (name, t) in model.named_tensors() {
                tensors.push((format!("{prefix}/{name}"), t));
            }
            for ((name, p), s) in model.params().iter().zip(&opt.states) {
                let v = Tensor::new(p.shape().to_vec(), s.velocity.clone()).expect("velocity shape");
                tensors.push((format!("{prefix}_velocity/{name}"), v));
            }
        };
        add_model("student", &self.student, &self.student_opt);
        if let Some((c, opt)) = &self.connector {
            add_model("connector", c, opt);
        }
        let ctl = &self.controller;
        for (name, v) in [
            ("omega", &ctl.omega),
            ("velocity", &ctl.sgd.velocity),
            ("r_teacher0", &ctl.r_teacher0),
            ("a_latest", &ctl.a_latest),
        ] {
            tensors.push((format!("controller/{name}"), Tensor::from_vec(v.clone())));
        }
        tensors.push(("trajectory/connector".into(), self.traj_connector.to_tensor()));
        tensors.push(("trajectory/student".into(), self.traj_student.to_tensor()));
        let metadata = json!({
            "iteration": self.iteration,
            "config": cfg,
            "student": self.student.spec(),
            "connector": self.connector.as_ref().map(|(c, _)| c.spec()),
        });
        checkpoint::save(path, &Checkpoint { metadata, tensors })
    }

    fn load(path: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        let ckpt = checkpoint::load(path)?;
        let corrupt = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let saved: ExperimentConfig =
            serde_json::from_value(ckpt.metadata["config"].clone()).map_err(|e| corrupt(e.to_string()))?;
        if &saved != cfg {
            return Err(Error::Config(format!(
                "{} was written by a different configuration",
                path.display()
            )));
        }
        let iteration = ckpt.metadata["iteration"]
            .as_u64()
            .ok_or_else(|| corrupt("missing iteration".into()))? as usize;
        let load_model = |prefix: &str, spec_key: &str, lr: f64| -> Result<(ModelGraph, ModelOptimizer)> {
            let spec: ModelSpec =
                serde_json::from_value(ckpt.metadata[spec_key].clone()).map_err(|e| corrupt(e.to_string()))?;
            let mut model = ModelGraph::from_spec(spec)?;
            model.load_named(|n| ckpt.get(&format!("{prefix}/{n}")))?;
            let mut opt = ModelOptimizer::new(&model, lr, cfg.optimizer.network_momentum);
            for (i, s) in opt.states.iter_mut().enumerate() {
                let name = format!("{prefix}_velocity/{}", model.params().name(i));
                let v = ckpt.require(&name, path)?;
                v.expect_shape("velocity", model.params().at(i).shape())?;
                s.velocity = v.data().to_vec();
            }
            Ok((model, opt))
        };
        let (student, student_opt) = load_model("student", "student", cfg.optimizer.network_lr)?;
        let connector = if ckpt.metadata["connector"].is_null() {
            None
        } else {
            Some(load_model("connector", "connector", cfg.optimizer.connector_lr)?)
        };
        let vec_of = |name: &str| -> Result<Vec<f64>> {
            let t = ckpt.require(&format!("controller/{name}"), path)?;
            if t.numel() != N_TASKS {
                return Err(corrupt(format!("controller/{name} has {} entries", t.numel())));
            }
            Ok(t.data().to_vec())
        };
        let mut controller = FeedbackState::new(
            vec_of("r_teacher0")?,
            cfg.alpha,
            cfg.optimizer.controller_beta,
            cfg.optimizer.controller_momentum,
        );
        controller.omega = vec_of("omega")?;
        controller.sgd.velocity = vec_of("velocity")?;
        controller.a_latest = vec_of("a_latest")?;
        let buffer = |name: &str| -> Result<TrajectoryBuffer> {
            let t = ckpt.require(&format!("trajectory/{name}"), path)?;
            let b = TrajectoryBuffer::from_tensor(cfg.window, t)?;
            if b.k() != cfg.k {
                return Err(corrupt(format!("trajectory/{name} has k = {}", b.k())));
            }
            Ok(b)
        };
        Ok(Self {
            iteration,
            student,
            student_opt,
            connector,
            controller,
            traj_connector: buffer("connector")?,
            traj_student: buffer("student")?,
        })
    }
}

const LOSS_HEADER: &str = "iter,task_seg,task_depth,logits,traj,total";
const CONTROLLER_HEADER: &str = "iter,r_seg,r_depth,a_seg,a_depth,omega_seg,omega_depth";
const TRAJECTORY_HEADER: &str = "iter,source,rank,row,col,value";

struct Logs {
    loss: CsvLog,
    controller: Option<CsvLog>,
    trajectory: Option<CsvLog>,
}

impl Logs {
    fn open(out: &Path, cfg: &ExperimentConfig, resume_at: Option<usize>) -> Result<Self> {
        let open = |name: &str, header: &str| match resume_at {
            Some(it) => CsvLog::resume(&out.join(name), header, it),
            None => CsvLog::create(&out.join(name), header),
        };
        Ok(Self {
            loss: open("loss.csv", LOSS_HEADER)?,
            controller: if cfg.mode.uses_connector() {
                Some(open("controller.csv", CONTROLLER_HEADER)?)
            } else {
                None
            },
            trajectory: if cfg.dump_trajectory && cfg.mode.uses_connector() {
                Some(open("trajectory.csv", TRAJECTORY_HEADER)?)
            } else {
                None
            },
        })
    }

    fn flush(&mut self) -> Result<()> {
        self.loss.flush()?;
        for l in [&mut self.controller, &mut self.trajectory].into_iter().flatten() {
            l.flush()?;
        }
        Ok(())
    }
}

fn controller_row(iter: usize, rec: &TickRecord) -> Vec<String> {
    let mut row = vec![iter.to_string()];
    row.extend(rec.r.iter().chain(&rec.a).chain(&rec.omega).map(|&v| num(v)));
    row
}

fn abort(iteration: usize, what: &str, values: &[(&str, f64)]) -> Error {
    let detail = values
        .iter()
        .map(|(n, v)| format!("{n}={v}"))
        .collect::<Vec<_>>()
        .join(" ");
    Error::NumericalAbort {
        iteration,
        detail: format!("{what}: {detail}"),
    }
}

/// Soft coordinates of a constant map, for the connector stream.
fn connector_frame(cfg: &ExperimentConfig, map: &AttentionMap) -> Result<Frame> {
    let mut g = Graph::new();
    let m = g.constant(Tensor::from_vec(map.values.clone()));
    let sp = soft_points(&mut g, m, map.h, map.w, cfg.k, cfg.gamma)?;
    Frame::from_soft(&g, map, &sp)
}

/// Runs one distillation mode into `out`. Teachers are required by every
/// mode except `naive_mtl`.
pub fn run_distill(
    cfg: &ExperimentConfig,
    data: &Data,
    teachers: Option<&TeacherSet>,
    out: &Path,
    opts: &DistillOptions,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    if cfg.mode.uses_teachers() && teachers.is_none() {
        return Err(Error::Config(format!("mode {} needs teachers", cfg.mode)));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let started = Instant::now();
    let state_path = out.join(STATE_FILE);
    let mut state = if opts.resume && state_path.exists() {
        State::load(&state_path, cfg)?
    } else {
        State::fresh(cfg, teachers)?
    };
    let resumed = state.iteration > 0 || (opts.resume && state_path.exists());
    let cfg_path = out.join("config.json");
    std::fs::write(&cfg_path, cfg.to_json()).map_err(|e| Error::io(&cfg_path, e))?;
    let mut logs = Logs::open(out, cfg, resumed.then_some(state.iteration))?;
    let specs = score_specs();
    if !resumed {
        if let Some(log) = logs.controller.as_mut() {
            let r = task_scores(&state.student, &data.val)?;
            let rec = preview_tick(&state.controller, &r, &specs)?;
            log.row(&controller_row(0, &rec))?;
        }
    }

    let tasks = tasks(cfg);
    let (h, w) = (cfg.dataset.height, cfg.dataset.width);
    let lambda = match cfg.mode {
        Mode::Jointdistill | Mode::JointdistillNoAdapt => cfg.lambda,
        _ => 0.0,
    };
    let mut sampler = Sampler::new(
        cfg.stream_seed(Stream::DistillBatches),
        data.train.len(),
        cfg.batch_size,
    );
    while state.iteration < cfg.distill_steps {
        let step = state.iteration;
        let iter = step + 1;
        let idx = sampler.indices(step);
        let batch = data.train.batch(&idx);

        // Connector step toward the teachers; its pre-update outputs are
        // the student's targets for this iteration.
        let mut targets: Option<(Vec<Tensor>, AttentionMap)> = None;
        if let (Some((connector, opt)), Some(t)) = (state.connector.as_mut(), teachers) {
            let mut g = Graph::new();
            let x = g.constant(t.features(&idx));
            let o = connector.forward(&mut g, x, nn::Mode::Train, Bind::Trainable)?;
            let tl: Vec<Var> = t.logits(&idx).into_iter().map(|l| g.constant(l)).collect();
            let loss = connector_loss(&mut g, &tasks, &o.heads, &tl, &state.controller.omega)?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(abort(iter, "connector loss", &[("loss", value)]));
            }
            let grads = g.backward(loss)?;
            let heads = o.heads.iter().map(|&v| g.value(v).clone()).collect();
            let map = AttentionMap::from_feature(g.value(o.features))?;
            opt.schedule(step, cfg.distill_steps);
            opt.step(connector, &o.params, &grads)?;
            connector.commit_batch_stats(&o.bn_stats)?;
            targets = Some((heads, map));
        }

        let mut g = Graph::new();
        let x = g.constant(batch.images);
        let o = state.student.forward(&mut g, x, nn::Mode::Train, Bind::Trainable)?;
        let seg = task_loss_segmentation(&mut g, o.heads[0], &batch.labels)?;
        let depth = task_loss_depth(&mut g, o.heads[1], &batch.depth)?;
        let task_terms = [seg, depth];
        let (loss, breakdown) = match (&targets, cfg.mode) {
            (Some((heads, cmap)), _) => {
                state.traj_connector.push_frame(connector_frame(cfg, cmap)?)?;
                let amap = attention_map(&mut g, o.features)?;
                let smap = AttentionMap {
                    h,
                    w,
                    values: g.value(amap).data().to_vec(),
                };
                let sp = soft_points(&mut g, amap, h, w, cfg.k, cfg.gamma)?;
                state.traj_student.push_frame(Frame::from_soft(&g, &smap, &sp)?)?;
                if let Some(log) = logs.trajectory.as_mut() {
                    for (source, buf) in [("connector", &state.traj_connector), ("student", &state.traj_student)] {
                        for p in &buf.newest().expect("just pushed").points {
                            log.row(&[
                                iter.to_string(),
                                source.into(),
                                p.rank.to_string(),
                                p.row.to_string(),
                                p.col.to_string(),
                                num(p.value),
                            ])?;
                        }
                    }
                }
                let traj = crate::trajectory::trajectory_loss(
                    &mut g,
                    &state.traj_connector,
                    &state.traj_student,
                    Some(&sp.coords),
                )?;
                let pf: Vec<Var> = heads.iter().map(|t| g.constant(t.clone())).collect();
                let logits = logits_distill_loss(&mut g, &tasks, &o.heads, &pf)?;
                checked_total(&mut g, iter, &task_terms, logits, traj, lambda)?
            }
            (None, Mode::StaticKd) => {
                let t = teachers.expect("checked above");
                let tl: Vec<Var> = t.logits(&idx).into_iter().map(|l| g.constant(l)).collect();
                let kd = tasks
                    .iter()
                    .zip(o.heads.iter().zip(&tl))
                    .map(|(&task, (&s, &p))| distill_divergence(&mut g, task, s, p))
                    .collect::<Result<Vec<_>>>()?;
                let total = static_baseline_loss(&mut g, &task_terms, &kd, &cfg.static_omega)?;
                let kd_value: f64 = kd
                    .iter()
                    .zip(&cfg.static_omega)
                    .map(|(&v, &w)| w * g.value(v).item().unwrap_or(f64::NAN))
                    .sum();
                let task_values = values(&g, &task_terms)?;
                let b = LossBreakdown::new(&task_values, kd_value, 0.0, 0.0)
                    .map_err(|_| abort(iter, "student loss", &named(&task_values, kd_value, 0.0)))?;
                (total, b)
            }
            (None, _) => {
                let zero = g.constant(Tensor::scalar(0.0));
                checked_total(&mut g, iter, &task_terms, zero, zero, 0.0)?
            }
        };
        let grads = g.backward(loss)?;
        state.student_opt.schedule(step, cfg.distill_steps);
        state.student_opt.step(&mut state.student, &o.params, &grads)?;
        state.student.commit_batch_stats(&o.bn_stats)?;
        drop(g);

        let mut row = vec![iter.to_string()];
        row.extend(breakdown.task.iter().map(|&v| num(v)));
        row.extend([num(breakdown.logits), num(breakdown.traj), num(breakdown.total)]);
        logs.loss.row(&row)?;

        state.iteration = iter;
        if let Some(log) = logs.controller.as_mut() {
            if iter % cfg.validation_every == 0 {
                let r = task_scores(&state.student, &data.val)?;
                let rec = if cfg.mode.adapts_weights() {
                    state.controller.tick(&r, &specs)?
                } else {
                    preview_tick(&state.controller, &r, &specs)?
                };
                log.row(&controller_row(iter, &rec))?;
            }
        }
        let stop = opts.stop_after == Some(iter);
        if stop || (cfg.checkpoint_every > 0 && iter % cfg.checkpoint_every == 0) {
            logs.flush()?;
            state.save(&state_path, cfg)?;
        }
        if stop && iter < cfg.distill_steps {
            return Ok(DistillOutcome::Stopped { iteration: iter });
        }
    }
    logs.flush()?;
    state.save(&state_path, cfg)?;

    save_model(
        &out.join("student.json"),
        &state.student,
        json!({
            "role": "student",
            "mode": cfg.mode,
            "seed": cfg.seed,
            "dataset": cfg.dataset,
            "iterations": state.iteration,
        }),
    )?;
    let summary = RunSummary {
        mode: cfg.mode,
        seed: cfg.seed,
        iterations: state.iteration,
        teacher_val_scores: teachers.map(|t| t.r_teacher0.clone()).unwrap_or_default(),
        omega: state.controller.omega.clone(),
        val: evaluate(&state.student, &data.val)?,
        test: evaluate(&state.student, &data.test)?,
        config: cfg.clone(),
    };
    for (name, report) in [("metrics_val.json", &summary.val), ("metrics_test.json", &summary.test)] {
        let p = out.join(name);
        std::fs::write(&p, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&p, e))?;
    }
    let p = out.join("summary.json");
    std::fs::write(&p, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&p, e))?;
    let p = out.join("run_info.json");
    let info = json!({ "elapsed_seconds": started.elapsed().as_secs_f64(), "resumed": resumed });
    std::fs::write(&p, serde_json::to_string_pretty(&info)?).map_err(|e| Error::io(&p, e))?;
    log::info!("{}: test {:?}", cfg.mode, summary.test.criteria);
    Ok(DistillOutcome::Finished(Box::new(summary)))
}

/// Feedback scores for the current student without touching ω.
fn preview_tick(state: &FeedbackState, r: &[f64], specs: &[TaskScoreSpec]) -> Result<TickRecord> {
    let a = r
        .iter()
        .zip(&state.r_teacher0)
        .zip(specs)
        .map(|((&r, &r0), s)| feedback_score(r, r0, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(TickRecord {
        r: r.to_vec(),
        a,
        omega: state.omega.clone(),
    })
}

fn values(g: &Graph, vars: &[Var]) -> Result<Vec<f64>> {
    vars.iter().map(|&v| g.value(v).item()).collect()
}

fn named(task: &[f64], logits: f64, traj: f64) -> Vec<(&'static str, f64)> {
    vec![
        ("task_seg", task[0]),
        ("task_depth", task[1]),
        ("logits", logits),
        ("traj", traj),
    ]
}

fn checked_total(
    g: &mut Graph,
    iter: usize,
    task_terms: &[Var],
    logits: Var,
    traj: Var,
    lambda: f64,
) -> Result<(Var, LossBreakdown)> {
    let task = values(g, task_terms)?;
    let (l, t) = (g.value(logits).item()?, g.value(traj).item()?);
    student_total_loss(g, task_terms, logits, traj, lambda).map_err(|e| match e {
        Error::NonFinite { .. } => abort(iter, "student loss", &named(&task, l, t)),
        other => other,
    })
}
