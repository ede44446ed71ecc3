//! Teacher, student and connector networks.
//!
//! Every network is a stack of `Conv3x3 -> BatchNorm -> ReLU` stages at full
//! spatial resolution followed by one 1x1-convolution head per task. A
//! teacher has one head, the student shares its backbone across all heads,
//! and the connector fuses the teachers' concatenated features through two
//! such stages before its own per-task heads.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Graph, Tensor, Var};

pub const ARCH: &str = "jd-tiny-v1";
pub const TEACHER_WIDTHS: [usize; 3] = [32, 32, 32];
pub const STUDENT_WIDTHS: [usize; 3] = [16, 16, 16];
pub const CONNECTOR_WIDTHS: [usize; 2] = [32, 32];
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TaskKind {
    Segmentation { classes: usize },
    Depth,
}

impl TaskKind {
    pub fn out_channels(self) -> usize {
        match self {
            TaskKind::Segmentation { classes } => classes,
            TaskKind::Depth => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Segmentation { .. } => "seg",
            TaskKind::Depth => "depth",
        }
    }

    fn validate(self) -> Result<()> {
        match self {
            TaskKind::Segmentation { classes } if classes < 2 => Err(Error::invalid(format!(
                "segmentation head needs at least 2 classes, got {classes}"
            ))),
            _ => Ok(()),
        }
    }
}

/// The two tasks of this laboratory, in canonical order.
pub fn joint_tasks(classes: usize) -> [TaskKind; 2] {
    [TaskKind::Segmentation { classes }, TaskKind::Depth]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Teacher,
    Student,
    Connector,
}

/// Model identity, recorded in every checkpoint manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: String,
    pub kind: ModelKind,
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub heads: Vec<TaskKind>,
    pub n_classes: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How parameters enter a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bind {
    Trainable,
    Frozen,
}

/// Ordered name -> tensor collection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.entries.push((name.into(), t));
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn at(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Stage {
    weight: usize,
    bias: usize,
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Head {
    weight: usize,
    bias: usize,
}

/// Outputs of one forward pass.
pub struct ModelOutput {
    /// Last stage's feature map (f_S, f_T or f_F).
    pub features: Var,
    /// One output per head, in head order.
    pub heads: Vec<Var>,
    /// Graph handle of every trainable parameter, in parameter order.
    pub params: Vec<Var>,
    /// Batch statistics per stage (training mode only).
    pub bn_stats: Vec<BatchStats>,
}

/// Parameters, running statistics and forward definition of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    spec: ModelSpec,
    params: ParamStore,
    buffers: ParamStore,
    stages: Vec<Stage>,
    heads: Vec<Head>,
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

impl ModelGraph {
    fn build(spec: ModelSpec) -> Result<Self> {
        if spec.widths.is_empty() || spec.widths.contains(&0) {
            return Err(Error::invalid(format!(
                "widths must be non-empty and positive, got {:?}",
                spec.widths
            )));
        }
        if spec.in_channels == 0 {
            return Err(Error::invalid("in_channels must be positive"));
        }
        for h in &spec.heads {
            h.validate()?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = ParamStore::default();
        let mut buffers = ParamStore::default();
        let mut stages = Vec::new();
        let mut cin = spec.in_channels;
        for (i, &w) in spec.widths.iter().enumerate() {
            let p = format!("stage{i}");
            stages.push(Stage {
                weight: params.push(format!("{p}.conv.weight"), he_uniform(&mut rng, &[w, cin, 3, 3])),
                bias: params.push(format!("{p}.conv.bias"), Tensor::zeros(&[w])),
                gamma: params.push(format!("{p}.bn.gamma"), Tensor::full(&[w], 1.0)),
                beta: params.push(format!("{p}.bn.beta"), Tensor::zeros(&[w])),
                running_mean: buffers.push(format!("{p}.bn.running_mean"), Tensor::zeros(&[w])),
                running_var: buffers.push(format!("{p}.bn.running_var"), Tensor::full(&[w], 1.0)),
            });
            cin = w;
        }
        let mut heads = Vec::new();
        for (j, h) in spec.heads.iter().enumerate() {
            let out = h.out_channels();
            heads.push(Head {
                weight: params.push(format!("head{j}.weight"), he_uniform(&mut rng, &[out, cin, 1, 1])),
                bias: params.push(format!("head{j}.bias"), Tensor::zeros(&[out])),
            });
        }
        Ok(Self {
            spec,
            params,
            buffers,
            stages,
            heads,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut ParamStore {
        &mut self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn feature_width(&self) -> usize {
        *self.spec.widths.last().expect("non-empty widths")
    }

    /// Pure forward pass: reads parameters and (in eval mode) running
    /// statistics, never mutates the model. Training-mode batch statistics are
    /// returned for [`ModelGraph::commit_batch_stats`].
    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode, bind: Bind) -> Result<ModelOutput> {
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|(_, t)| match bind {
                Bind::Trainable => g.param(t.clone()),
                Bind::Frozen => g.constant(t.clone()),
            })
            .collect();
        self.forward_with(g, x, params, mode)
    }

    /// Forward pass over caller-supplied parameter handles, one per entry
    /// of [`ModelGraph::params`] in order.
    pub fn forward_with(&self, g: &mut Graph, x: Var, params: Vec<Var>, mode: Mode) -> Result<ModelOutput> {
        if params.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter handles, got {}",
                self.params.len(),
                params.len()
            )));
        }
        let mut h = x;
        let mut bn_stats = Vec::new();
        for st in &self.stages {
            let z = g.conv2d(h, params[st.weight], params[st.bias])?;
            let (gamma, beta) = (params[st.gamma], params[st.beta]);
            let y = match mode {
                Mode::Train => {
                    let (y, stats) = g.batch_norm_train(z, gamma, beta, BN_EPS)?;
                    bn_stats.push(stats);
                    y
                }
                Mode::Eval => g.batch_norm_eval(
                    z,
                    gamma,
                    beta,
                    self.buffers.at(st.running_mean).data(),
                    self.buffers.at(st.running_var).data(),
                    BN_EPS,
                )?,
            };
            h = g.relu(y);
        }
        let heads = self
            .heads
            .iter()
            .map(|hd| g.conv2d(h, params[hd.weight], params[hd.bias]))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelOutput {
            features: h,
            heads,
            params,
            bn_stats,
        })
    }

    /// Folds training-mode batch statistics into the running estimates
    /// (exponential average with momentum 0.1, unbiased variance).
    pub fn commit_batch_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        if stats.len() != self.stages.len() {
            return Err(Error::invalid(format!(
                "expected {} stage statistics, got {}",
                self.stages.len(),
                stats.len()
            )));
        }
        for (st, s) in self.stages.iter().zip(stats) {
            let unbias = s.count as f64 / (s.count as f64 - 1.0);
            let rm = self.buffers.at_mut(st.running_mean).data_mut();
            for (r, &m) in rm.iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = self.buffers.at_mut(st.running_var).data_mut();
            for (r, &v) in rv.iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
        Ok(())
    }

    /// Replaces parameters and buffers from named tensors (checkpoint load).
    pub fn load_named<'a>(&mut self, mut lookup: impl FnMut(&str) -> Option<&'a Tensor>) -> Result<()> {
        for store in [&mut self.params, &mut self.buffers] {
            for i in 0..store.len() {
                let name = store.name(i).to_string();
                let t = lookup(&name).ok_or_else(|| Error::invalid(format!("missing tensor {name:?}")))?;
                t.expect_shape("load tensor", store.at(i).shape())?;
                *store.at_mut(i) = t.clone();
            }
        }
        Ok(())
    }

    /// All parameters then all buffers, by name.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .chain(self.buffers.iter())
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    pub fn from_spec(spec: ModelSpec) -> Result<Self> {
        Self::build(spec)
    }
}

pub fn build_teacher(task: TaskKind, widths: &[usize], seed: u64) -> Result<ModelGraph> {
    ModelGraph::build(ModelSpec {
        arch: ARCH.into(),
        kind: ModelKind::Teacher,
        in_channels: 3,
        widths: widths.to_vec(),
        heads: vec![task],
        n_classes: classes_of(&[task]),
        seed,
    })
}

pub fn build_student(tasks: &[TaskKind], widths: &[usize], seed: u64) -> Result<ModelGraph> {
    if tasks.len() < 2 {
        return Err(Error::invalid(format!(
            "student needs at least 2 tasks, got {}",
            tasks.len()
        )));
    }
    ModelGraph::build(ModelSpec {
        arch: ARCH.into(),
        kind: ModelKind::Student,
        in_channels: 3,
        widths: widths.to_vec(),
        heads: tasks.to_vec(),
        n_classes: classes_of(tasks),
        seed,
    })
}

/// Connector over the concatenation of teacher features of the given
/// widths: two fusion stages then one head per task.
pub fn build_connector(teacher_widths: &[usize], tasks: &[TaskKind], seed: u64) -> Result<ModelGraph> {
    if teacher_widths.is_empty() {
        return Err(Error::invalid("connector needs at least one teacher"));
    }
    ModelGraph::build(ModelSpec {
        arch: ARCH.into(),
        kind: ModelKind::Connector,
        in_channels: teacher_widths.iter().sum(),
        widths: CONNECTOR_WIDTHS.to_vec(),
        heads: tasks.to_vec(),
        n_classes: classes_of(tasks),
        seed,
    })
}

fn classes_of(tasks: &[TaskKind]) -> usize {
    tasks
        .iter()
        .find_map(|t| match t {
            TaskKind::Segmentation { classes } => Some(*classes),
            TaskKind::Depth => None,
        })
        .unwrap_or(0)
}

/// Channel concatenation of teacher features, the connector's input.
pub fn fuse_features(g: &mut Graph, features: &[Var]) -> Result<Var> {
    g.concat(features, 1)
}
