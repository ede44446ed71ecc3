use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use jointdistill::harness::{
    eval_checkpoint, load_teacher, pretrain_teacher, render_table, report_runs, run_distill, run_experiment, tasks,
    Data, DistillOptions, DistillOutcome, ExperimentConfig, Mode, TeacherSet,
};
use jointdistill::metrics::{delta_mtl, MetricReport};
use jointdistill::synthdata::{export_split, Split};
use jointdistill::{Error, Result};

#[derive(Parser)]
#[command(
    name = "jointdistill",
    version,
    about = "Multi-teacher distillation for joint segmentation and depth"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Seg,
    Depth,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset splits and write them as binary files.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one single-task teacher.
    PretrainTeacher {
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a student in one mode.
    Distill {
        /// Overrides the mode in the config file.
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding both teachers; not needed for naive_mtl.
        #[arg(long)]
        teachers: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Checkpoint and exit after this iteration.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a saved teacher or student on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the overall improvement of one metric report over another.
    DeltaMtl {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
    },
    /// Build the ablation table from finished run directories.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain both teachers and run every requested mode for one seed.
    RunAll {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Modes to run; all of them by default.
        #[arg(long, num_args = 1..)]
        modes: Vec<Mode>,
    },
}

fn config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_report(path: &Path) -> Result<MetricReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config: c, out } => {
            let cfg = config(c.as_deref())?;
            let data = Data::generate(&cfg.dataset)?;
            for split in [Split::Train, Split::Val, Split::Test] {
                export_split(&out.join(split.name()), data.split(split))?;
            }
            println!(
                "wrote {} / {} / {} scenes to {}",
                data.train.len(),
                data.val.len(),
                data.test.len(),
                out.display()
            );
        }
        Command::PretrainTeacher { task, config: c, out } => {
            let cfg = config(c.as_deref())?;
            let data = Data::generate(&cfg.dataset)?;
            let t = tasks(&cfg)[task as usize];
            pretrain_teacher(&cfg, &data, t, &out)?;
            println!("{} teacher saved to {}", t.name(), out.display());
        }
        Command::Distill {
            mode,
            config: c,
            teachers,
            out,
            resume,
            stop_after,
        } => {
            let mut cfg = config(c.as_deref())?;
            if let Some(m) = mode {
                cfg = cfg.with_mode(m);
            }
            let data = Data::generate(&cfg.dataset)?;
            let set = match (&teachers, cfg.mode.uses_teachers()) {
                (Some(dir), _) => {
                    let [seg, depth] = tasks(&cfg);
                    Some(TeacherSet::new(
                        &cfg,
                        &data,
                        load_teacher(dir, seg, &cfg)?,
                        load_teacher(dir, depth, &cfg)?,
                    )?)
                }
                (None, true) => return Err(Error::Config(format!("mode {} needs --teachers", cfg.mode))),
                (None, false) => None,
            };
            let opts = DistillOptions { resume, stop_after };
            match run_distill(&cfg, &data, set.as_ref(), &out, &opts)? {
                DistillOutcome::Finished(s) => println!("{}", serde_json::to_string_pretty(&s.test)?),
                DistillOutcome::Stopped { iteration } => println!("checkpointed at iteration {iteration}"),
            }
        }
        Command::Eval { checkpoint, split, out } => {
            let report = eval_checkpoint(&checkpoint, split.into())?;
            write_json(&out, &report)?;
            println!("{}", report.csv_header());
            println!("{}", report.csv_row());
        }
        Command::DeltaMtl { report, baseline } => {
            let d = delta_mtl(&read_report(&report)?, &read_report(&baseline)?)?;
            println!("{d:+.2}");
        }
        Command::Report { runs, out } => {
            let table = report_runs(&runs)?;
            write_json(&out, &table)?;
            print!("{}", render_table(&table));
        }
        Command::RunAll { config: c, out, modes } => {
            let cfg = config(c.as_deref())?;
            let modes = if modes.is_empty() { Mode::ALL.to_vec() } else { modes };
            let res = run_experiment(&cfg, &out, &modes)?;
            print!("{}", render_table(&res.table));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::NumericalAbort { .. } => 3,
                _ => 1,
            })
        }
    }
}
