use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::{ScheduleReport, TrainConfig};

use super::provenance::RunManifest;
use super::ReportArgs;

pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceInfo {
    pub stage: String,
    pub epoch: usize,
    /// Validation accuracy at the failing epoch; absent when it was not finite.
    pub accuracy: Option<f64>,
}

/// Final outcome of a `train` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    /// `ok` or `diverged`.
    pub status: String,
    pub test_acc: Option<f64>,
    pub overflow_rate: Option<f64>,
    pub carry_std: Option<f64>,
    pub divergence: Option<DivergenceInfo>,
    pub schedule: Option<ScheduleReport>,
}

impl TrainSummary {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(SUMMARY_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// One row of the reproduction table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub accumulator_bits: u32,
    pub slope: String,
    pub cyclic: String,
    pub p_target: f64,
    pub lambda_overflow: f64,
    pub lambda_carry: f64,
    pub status: String,
    pub test_acc: Option<f64>,
    pub overflow_rate: Option<f64>,
    pub carry_std: Option<f64>,
}

impl ReportRow {
    pub fn load(dir: &Path) -> Result<Self> {
        let run = RunManifest::read(dir)?;
        if run.command != "train" {
            return Err(Error::Format(format!("{} is a `{}` run, not `train`", dir.display(), run.command)));
        }
        let cfg: TrainConfig = serde_json::from_value(run.parameters.clone())
            .map_err(|e| Error::Format(format!("{}: {e}", dir.display())))?;
        let summary = TrainSummary::read(dir)?;
        Ok(ReportRow {
            run: dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| dir.display().to_string()),
            accumulator_bits: cfg.accumulator_bits,
            slope: cfg.slope,
            cyclic: cfg.cyclic,
            p_target: cfg.p_target,
            lambda_overflow: cfg.lambda_overflow,
            lambda_carry: cfg.lambda_carry,
            status: summary.status,
            test_acc: summary.test_acc,
            overflow_rate: summary.overflow_rate,
            carry_std: summary.carry_std,
        })
    }

    pub fn diverged(&self) -> bool {
        self.status == "diverged"
    }
}

fn opt(v: Option<f64>, scale: f64, digits: usize) -> String {
    v.map(|x| format!("{:.*}", digits, x * scale)).unwrap_or_else(|| "-".into())
}

/// Markdown table; diverged runs show `diverged` instead of an accuracy.
pub fn render_report(rows: &[ReportRow]) -> String {
    let mut s = String::new();
    s.push_str("| run | b | cyclic | k | p (%) | λ_o | λ_c | accuracy (%) | overflow (%) | carry std |\n");
    s.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        let acc = if r.diverged() { "diverged".to_string() } else { opt(r.test_acc, 100.0, 2) };
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            r.run,
            r.accumulator_bits,
            r.cyclic,
            r.slope,
            r.p_target,
            r.lambda_overflow,
            r.lambda_carry,
            acc,
            opt(r.overflow_rate, 100.0, 2),
            opt(r.carry_std, 1.0, 3),
        );
    }
    s
}

pub(super) fn report(a: ReportArgs) -> Result<()> {
    let rows = a.runs.iter().map(|d| ReportRow::load(d)).collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let md = render_report(&rows);
    let md_path = a.out.join("report.md");
    fs::write(&md_path, &md).map_err(|e| Error::io(&md_path, e))?;
    let csv_path = a.out.join("report.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| super::commands::csv_error(&csv_path, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| super::commands::csv_error(&csv_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    print!("{md}");
    let runs: Vec<String> = a.runs.iter().map(|p| p.display().to_string()).collect();
    RunManifest::new("report", 0, serde_json::json!({ "runs": runs }))
        .write(&a.out, &[PathBuf::from("report.md"), PathBuf::from("report.csv")])?;
    Ok(())
}
