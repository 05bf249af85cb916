use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalReport, GapReport, LandscapePair};
use crate::error::{Error, Result};

pub const REPORT_SCHEMA: &str = "wmplanlab-report/1";

/// Everything one command measured. Wall-clock numbers live in a separate
/// `timing.json` so that `report.json` is a pure function of config and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub eval: Option<EvalReport>,
    /// Gap reports keyed by model name.
    pub gaps: BTreeMap<String, GapReport>,
    pub landscapes: Vec<LandscapePair>,
    /// Derived scalar summaries, e.g. the share of landscape tasks where the
    /// adversarial grid is at least as smooth as the baseline's.
    pub metrics: BTreeMap<String, f64>,
}

impl Report {
    pub fn new(command: &str, seed: u64, config_hash: String) -> Self {
        Report {
            schema: REPORT_SCHEMA.into(),
            command: command.into(),
            seed,
            config_hash,
            eval: None,
            gaps: BTreeMap::new(),
            landscapes: Vec::new(),
            metrics: BTreeMap::new(),
        }
    }

    pub fn timing(&self) -> Timing {
        let mut t = Timing::default();
        if let Some(e) = &self.eval {
            t.row_plan_seconds = e.rows.iter().map(|r| r.plan_seconds).collect();
            t.cell_mean_plan_seconds = e.cells.iter().map(|c| c.mean_plan_seconds).collect();
            t.cem_over_gbp = e.wall_clock_ratios("cem", "gbp");
        }
        t
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Aligned with `eval.rows`.
    pub row_plan_seconds: Vec<f64>,
    /// Aligned with `eval.cells`.
    pub cell_mean_plan_seconds: Vec<f64>,
    /// Per model: mean CEM plan time divided by mean GBP plan time.
    pub cem_over_gbp: BTreeMap<String, f64>,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes `report.json`, `timing.json`, `cells.csv` (when the report has an
/// evaluation) and one `landscape_<k>.csv` per landscape into `dir`.
pub fn emit_report(report: &Report, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&report.timing())?)?;
    if let Some(e) = &report.eval {
        let mut csv = String::from("model,planner,mode,task_id,success,plan_seconds,final_loss\n");
        for r in &e.rows {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                csv_field(&r.model),
                csv_field(&r.planner),
                r.mode.as_str(),
                r.task_id,
                r.success,
                r.plan_seconds,
                r.final_loss.map(|l| l.to_string()).unwrap_or_default()
            ));
        }
        fs::write(dir.join("cells.csv"), csv)?;
    }
    for (k, l) in report.landscapes.iter().enumerate() {
        let mut csv = String::from("i,j,u,v,baseline,adversarial\n");
        for (i, u) in l.coords.iter().enumerate() {
            for (j, v) in l.coords.iter().enumerate() {
                csv.push_str(&format!(
                    "{i},{j},{u},{v},{},{}\n",
                    l.baseline.values[i][j], l.adversarial.values[i][j]
                ));
            }
        }
        fs::write(dir.join(format!("landscape_{k}.csv")), csv)?;
    }
    Ok(())
}

/// Reads a report written by [`emit_report`], restoring the wall-clock
/// fields from `timing.json` when present.
pub fn read_report(dir: &Path) -> Result<Report> {
    let path = dir.join("report.json");
    let mut report: Report = serde_json::from_slice(&fs::read(&path)?)?;
    if report.schema != REPORT_SCHEMA {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("unsupported schema {}", report.schema),
        });
    }
    let tpath = dir.join("timing.json");
    if tpath.exists() {
        let t: Timing = serde_json::from_slice(&fs::read(&tpath)?)?;
        if let Some(e) = &mut report.eval {
            for (r, s) in e.rows.iter_mut().zip(t.row_plan_seconds) {
                r.plan_seconds = s;
            }
            for (c, s) in e.cells.iter_mut().zip(t.cell_mean_plan_seconds) {
                c.mean_plan_seconds = s;
            }
        }
    }
    Ok(report)
}
