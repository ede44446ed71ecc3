use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Mode, RunSummary};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub run: String,
    pub mode: Mode,
    pub seed: u64,
    /// Test metrics with Δ_MTL against the same-seed baseline.
    pub report: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub baseline_mode: Mode,
    pub rows: Vec<AblationRow>,
}

pub fn load_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join("summary.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// `report` with Δ_MTL relative to `baseline` attached.
pub fn compare_runs(report: &MetricReport, baseline: &MetricReport, baseline_name: &str) -> Result<MetricReport> {
    report.clone().with_baseline(baseline_name, baseline)
}

/// One row per run directory, each compared with the `naive_mtl` run of
/// the same seed among `dirs`.
pub fn report_runs(dirs: &[PathBuf]) -> Result<AblationTable> {
    let runs = dirs
        .iter()
        .map(|d| Ok((d.display().to_string(), load_summary(d)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(runs.len());
    for (name, s) in &runs {
        let base = runs
            .iter()
            .find(|(_, b)| b.mode == Mode::NaiveMtl && b.seed == s.seed)
            .ok_or_else(|| Error::invalid(format!("no naive_mtl run with seed {} among the runs", s.seed)))?;
        rows.push(AblationRow {
            run: name.clone(),
            mode: s.mode,
            seed: s.seed,
            report: compare_runs(&s.test, &base.1.test, Mode::NaiveMtl.name())?,
        });
    }
    Ok(AblationTable {
        baseline_mode: Mode::NaiveMtl,
        rows,
    })
}

/// Markdown table: one row per run, criteria then Δ_MTL in percent.
pub fn render_table(table: &AblationTable) -> String {
    let mut s = String::new();
    let Some(first) = table.rows.first() else {
        return s;
    };
    let names: Vec<&str> = first.report.criteria.iter().map(|c| c.name.as_str()).collect();
    let _ = writeln!(s, "| mode | seed | {} | delta_mtl (%) |", names.join(" | "));
    let _ = writeln!(s, "|{}", "---|".repeat(names.len() + 3));
    for r in &table.rows {
        let cells: Vec<String> = r.report.criteria.iter().map(|c| format!("{:.4}", c.value)).collect();
        let delta = r.report.delta_mtl.map(|d| format!("{d:+.2}")).unwrap_or_default();
        let _ = writeln!(s, "| {} | {} | {} | {} |", r.mode, r.seed, cells.join(" | "), delta);
    }
    s
}
