use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::SplitSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    NaiveMtl,
    StaticKd,
    Jointdistill,
    JointdistillNoTraj,
    JointdistillNoAdapt,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::NaiveMtl,
        Mode::StaticKd,
        Mode::Jointdistill,
        Mode::JointdistillNoTraj,
        Mode::JointdistillNoAdapt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::NaiveMtl => "naive_mtl",
            Mode::StaticKd => "static_kd",
            Mode::Jointdistill => "jointdistill",
            Mode::JointdistillNoTraj => "jointdistill_no_traj",
            Mode::JointdistillNoAdapt => "jointdistill_no_adapt",
        }
    }

    /// Trains a connector and distills the student from it.
    pub fn uses_connector(self) -> bool {
        matches!(
            self,
            Mode::Jointdistill | Mode::JointdistillNoTraj | Mode::JointdistillNoAdapt
        )
    }

    pub fn uses_teachers(self) -> bool {
        self != Mode::NaiveMtl
    }

    pub fn adapts_weights(self) -> bool {
        matches!(self, Mode::Jointdistill | Mode::JointdistillNoTraj)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub base_seed: u64,
}

impl DatasetConfig {
    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            n_train: self.n_train,
            n_val: self.n_val,
            n_test: self.n_test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Step size for teachers and the student.
    pub network_lr: f64,
    pub network_momentum: f64,
    pub connector_lr: f64,
    /// Controller step size β.
    pub controller_beta: f64,
    pub controller_momentum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    /// Root of every model and sampling seed of the run.
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub alpha: f64,
    pub lambda: f64,
    /// Essential points per frame.
    pub k: usize,
    /// Trajectory window in frames.
    pub window: usize,
    /// Soft-argmax sharpening.
    pub gamma: f64,
    pub validation_every: usize,
    pub teacher_steps: usize,
    pub distill_steps: usize,
    pub batch_size: usize,
    pub mode: Mode,
    /// Fixed distillation weights of `static_kd`, one per task.
    pub static_omega: Vec<f64>,
    /// Write a resumable checkpoint every this many distillation steps
    /// (0 disables intermediate checkpoints).
    pub checkpoint_every: usize,
    pub dump_trajectory: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig {
                height: 32,
                width: 32,
                classes: 4,
                n_train: 512,
                n_val: 96,
                n_test: 128,
                base_seed: 20_240_601,
            },
            seed: 0,
            optimizer: OptimizerConfig {
                network_lr: 0.05,
                network_momentum: 0.9,
                connector_lr: 0.05,
                controller_beta: 0.001,
                controller_momentum: 0.1,
            },
            alpha: 1.5,
            lambda: 1.0,
            k: 10,
            window: 10,
            gamma: 50.0,
            validation_every: 50,
            teacher_steps: 2000,
            distill_steps: 2000,
            batch_size: 8,
            mode: Mode::Jointdistill,
            static_omega: vec![1.0, 1.0],
            checkpoint_every: 500,
            dump_trajectory: false,
        }
    }
}

/// Task count of the joint setting.
pub const N_TASKS: usize = 2;

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let d = &self.dataset;
        let counts = [
            ("dataset.height", d.height),
            ("dataset.width", d.width),
            ("dataset.n_train", d.n_train),
            ("dataset.n_val", d.n_val),
            ("dataset.n_test", d.n_test),
            ("k", self.k),
            ("window", self.window),
            ("validation_every", self.validation_every),
            ("teacher_steps", self.teacher_steps),
            ("distill_steps", self.distill_steps),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be at least 1"));
        }
        if d.classes != crate::synthdata::CLASSES {
            return bad(format!(
                "dataset.classes must be {}, got {}",
                crate::synthdata::CLASSES,
                d.classes
            ));
        }
        if d.height < 2 || d.width < 2 {
            return bad("dataset height and width must be at least 2".into());
        }
        if self.k > d.height * d.width {
            return bad(format!("k = {} exceeds the pixel count", self.k));
        }
        if self.batch_size * d.height * d.width < 2 {
            return bad("batch normalization needs at least 2 values per channel".into());
        }
        let o = &self.optimizer;
        let positive = [
            ("optimizer.network_lr", o.network_lr),
            ("optimizer.connector_lr", o.connector_lr),
            ("optimizer.controller_beta", o.controller_beta),
            ("gamma", self.gamma),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return bad(format!("{name} must be positive, got {v}"));
        }
        let unit = [
            ("optimizer.network_momentum", o.network_momentum),
            ("optimizer.controller_momentum", o.controller_momentum),
        ];
        if let Some((name, v)) = unit.iter().find(|(_, v)| !(0.0..1.0).contains(v)) {
            return bad(format!("{name} must lie in [0, 1), got {v}"));
        }
        if !(self.alpha.is_finite() && self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("alpha must be finite and lambda finite and non-negative".into());
        }
        if self.static_omega.len() != N_TASKS || self.static_omega.iter().any(|w| !(*w >= 0.0)) {
            return bad(format!(
                "static_omega needs {N_TASKS} non-negative weights, got {:?}",
                self.static_omega
            ));
        }
        Ok(())
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        Self { mode, ..self.clone() }
    }

    /// Seed of one named stream derived from the run seed.
    pub fn stream_seed(&self, stream: Stream) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(stream as u64 + 1)
    }
}

/// Independent random streams of one run.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    SegTeacherInit,
    DepthTeacherInit,
    ConnectorInit,
    StudentInit,
    SegTeacherBatches,
    DepthTeacherBatches,
    DistillBatches,
}
