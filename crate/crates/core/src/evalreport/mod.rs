//! Experiment drivers and metrics: paired success-rate grids, the train-test
//! gap in world-model error, planner wall-clock, loss-landscape grids and a
//! linear probe decoder.

mod emit;
mod gap;
mod landscape;
mod probe;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{hex, Encoder};
use crate::envs::{sample_task, EnvSpec, RawDataset, TaskInstance};
use crate::error::{Error, Result};
use crate::initnet::InitNet;
use crate::planners::{mpc, MpcConfig, Planner};
use crate::rng::derive_seed;
use crate::worldmodel::WorldModel;

pub use emit::{emit_report, read_report, Report, Timing, REPORT_SCHEMA};
pub use gap::{gap_from_actions, train_test_gap, GapConfig, GapReport};
pub use landscape::{landscape, total_variation, LandscapeConfig, LandscapeGrid, LandscapePair};
pub use probe::{train_probe_decoder, ProbeDecoder};

/// SHA-256 of the JSON serialization of `value`.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("in-memory serialization cannot fail");
    hex(&Sha256::digest(&bytes))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    OpenLoop,
    Mpc,
}

impl EvalMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvalMode::OpenLoop => "open-loop",
            EvalMode::Mpc => "mpc",
        }
    }
}

pub struct NamedModel<'a> {
    pub name: String,
    pub model: &'a WorldModel,
    pub initnet: Option<&'a InitNet>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedPlanner {
    pub name: String,
    pub planner: Planner,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n_tasks: usize,
    /// Steps between start and goal on the source trajectory.
    pub horizon_gap: usize,
    pub mode: EvalMode,
    /// Replanning schedule in MPC mode; open-loop always plans once and
    /// executes the whole plan.
    pub mpc: MpcConfig,
    pub seed: u64,
    /// Worker threads for the task pool; 0 uses every available core.
    #[serde(default)]
    pub workers: usize,
}

impl EvalConfig {
    pub fn new(mode: EvalMode, seed: u64) -> Self {
        EvalConfig {
            n_tasks: 100,
            horizon_gap: 25,
            mode,
            mpc: MpcConfig::default(),
            seed,
            workers: 0,
        }
    }
}

/// One (model, planner, task) evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub model: String,
    pub planner: String,
    pub mode: EvalMode,
    pub task_id: usize,
    pub success: bool,
    /// Goal loss of the last plan; absent when planning failed.
    pub final_loss: Option<f64>,
    pub plans: usize,
    pub error: Option<String>,
    /// Mean wall-clock per planner call. Kept out of the report JSON, which
    /// must be reproducible byte for byte.
    #[serde(skip)]
    pub plan_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub model: String,
    pub planner: String,
    pub planner_kind: String,
    pub mode: EvalMode,
    pub n: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Wilson 95% interval of the success rate.
    pub wilson95: [f64; 2],
    /// Elementwise mean over tasks of the first plan's loss trace.
    pub mean_loss_trace: Vec<f64>,
    pub task_set_hash: String,
    pub failures: usize,
    #[serde(skip)]
    pub mean_plan_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub planners: Vec<NamedPlanner>,
    pub config_hash: String,
    pub task_set_hash: String,
    pub task_seeds: Vec<u64>,
    pub cells: Vec<CellSummary>,
    pub rows: Vec<TaskRow>,
}

impl EvalReport {
    pub fn cell(&self, model: &str, planner: &str) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.model == model && c.planner == planner)
    }

    /// `mean_plan_seconds(numerator) / mean_plan_seconds(denominator)` for
    /// every model that has both planners.
    pub fn wall_clock_ratios(&self, numerator: &str, denominator: &str) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for c in &self.cells {
            if c.planner_kind != numerator {
                continue;
            }
            let den = self
                .cells
                .iter()
                .find(|d| d.model == c.model && d.planner_kind == denominator);
            if let Some(d) = den {
                if c.mean_plan_seconds > 0.0 {
                    out.insert(c.model.clone(), c.mean_plan_seconds / d.mean_plan_seconds.max(f64::MIN_POSITIVE));
                }
            }
        }
        out
    }
}

pub fn planner_kind(p: &Planner) -> &'static str {
    match p {
        Planner::Gbp(_) => "gbp",
        Planner::Cem(_) => "cem",
        Planner::GradCem { .. } => "gradcem",
        Planner::Mppi(_) => "mppi",
    }
}

/// Wilson score interval at 95% confidence.
pub fn wilson95(successes: usize, n: usize) -> [f64; 2] {
    if n == 0 {
        return [0.0, 1.0];
    }
    let z = 1.959_963_984_540_054_f64;
    let nf = n as f64;
    let p = successes as f64 / nf;
    let denom = 1.0 + z * z / nf;
    let center = (p + z * z / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z * z / (4.0 * nf * nf)).sqrt();
    [(center - half).max(0.0), (center + half).min(1.0)]
}

/// The paired task set: task `i` is drawn with `derive_seed(seed, "task", i)`.
pub fn task_set(data: &RawDataset, n: usize, horizon_gap: usize, seed: u64) -> Result<(Vec<TaskInstance>, Vec<u64>)> {
    let seeds: Vec<u64> = (0..n as u64).map(|i| derive_seed(seed, "task", i)).collect();
    let tasks = seeds
        .iter()
        .map(|&s| sample_task(data, horizon_gap, s))
        .collect::<Result<Vec<_>>>()?;
    Ok((tasks, seeds))
}

pub(crate) fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Runs every (model, planner) cell on the same task set. Task failures are
/// logged and counted as unsuccessful; they never abort the grid.
pub fn evaluate(
    spec: &EnvSpec,
    enc: &Encoder,
    data: &RawDataset,
    models: &[NamedModel<'_>],
    planners: &[NamedPlanner],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if cfg.n_tasks == 0 {
        return Err(Error::Config("evaluation needs n_tasks >= 1".into()));
    }
    for p in planners {
        if p.planner.horizon() < 1 {
            return Err(Error::Config(format!("planner {} has horizon 0", p.name)));
        }
    }
    let (tasks, task_seeds) = task_set(data, cfg.n_tasks, cfg.horizon_gap, cfg.seed)?;
    let task_set_hash = json_hash(&tasks);
    let mpc_cfg = match cfg.mode {
        EvalMode::OpenLoop => MpcConfig::open_loop(),
        EvalMode::Mpc => cfg.mpc.clone(),
    };
    let model_ids: Vec<String> = models
        .iter()
        .map(|m| format!("{}:{}", m.name, json_hash(&m.model.mlp.params().iter().map(|t| t.data()).collect::<Vec<_>>())))
        .collect();
    let config_hash = json_hash(&(cfg, planners, &model_ids));

    let (nm, np, nt) = (models.len(), planners.len(), tasks.len());
    let jobs: Vec<(usize, usize, usize)> = (0..nm * np * nt).map(|k| (k / (np * nt), (k / nt) % np, k % nt)).collect();
    let run = |&(mi, pi, ti): &(usize, usize, usize)| -> (TaskRow, Vec<f64>) {
        let m = &models[mi];
        let p = &planners[pi];
        let planner = p.planner.with_seed(derive_seed(cfg.seed, "plan", ti as u64));
        let mut row = TaskRow {
            model: m.name.clone(),
            planner: p.name.clone(),
            mode: cfg.mode,
            task_id: ti,
            success: false,
            final_loss: None,
            plans: 0,
            error: None,
            plan_seconds: 0.0,
        };
        let mut trace = Vec::new();
        match mpc(spec, m.model, enc, &tasks[ti], &planner, &mpc_cfg, m.initnet) {
            Ok(out) => {
                row.success = out.success;
                row.plans = out.plans.len();
                row.final_loss = out.plans.last().map(|r| r.final_loss).filter(|l| l.is_finite());
                row.plan_seconds =
                    out.plans.iter().map(|r| r.wall_seconds).sum::<f64>() / out.plans.len().max(1) as f64;
                row.error = out.plans.iter().find_map(|r| r.failure.clone());
                if let Some(first) = out.plans.first() {
                    trace = first.loss_trace.clone();
                }
            }
            Err(e) => {
                log::warn!("task {ti} ({} / {}) failed: {e}", m.name, p.name);
                row.error = Some(e.to_string());
            }
        }
        (row, trace)
    };
    let results: Vec<(TaskRow, Vec<f64>)> = if cfg.workers == 1 {
        jobs.iter().map(run).collect()
    } else {
        pool(cfg.workers)?.install(|| jobs.par_iter().map(run).collect())
    };

    let mut cells = Vec::with_capacity(models.len() * planners.len());
    for (c, chunk) in results.chunks(tasks.len()).enumerate() {
        let (m, p) = (&models[c / planners.len()], &planners[c % planners.len()]);
        let n = chunk.len();
        let successes = chunk.iter().filter(|(r, _)| r.success).count();
        cells.push(CellSummary {
            model: m.name.clone(),
            planner: p.name.clone(),
            planner_kind: planner_kind(&p.planner).into(),
            mode: cfg.mode,
            n,
            successes,
            success_rate: successes as f64 / n as f64,
            wilson95: wilson95(successes, n),
            mean_loss_trace: mean_trace(chunk.iter().map(|(_, t)| t.as_slice())),
            task_set_hash: task_set_hash.clone(),
            failures: chunk.iter().filter(|(r, _)| r.error.is_some()).count(),
            mean_plan_seconds: chunk.iter().map(|(r, _)| r.plan_seconds).sum::<f64>() / n as f64,
        });
    }
    Ok(EvalReport {
        config: cfg.clone(),
        planners: planners.to_vec(),
        config_hash,
        task_set_hash,
        task_seeds,
        cells,
        rows: results.into_iter().map(|(r, _)| r).collect(),
    })
}

/// Elementwise mean of traces; shorter traces are padded with their last
/// value and non-finite entries are skipped.
fn mean_trace<'a>(traces: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    let traces: Vec<&[f64]> = traces.filter(|t| !t.is_empty()).collect();
    let len = traces.iter().map(|t| t.len()).max().unwrap_or(0);
    (0..len)
        .map(|i| {
            let vals: Vec<f64> = traces
                .iter()
                .map(|t| t[i.min(t.len() - 1)])
                .filter(|v| v.is_finite())
                .collect();
            if vals.is_empty() {
                0.0
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        })
        .collect()
}
