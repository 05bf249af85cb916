use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::envs::{sample_task, EnvSpec, RawDataset, TaskInstance};
use crate::error::{Error, Result};
use crate::planners::{gbp, PlanConfig};
use crate::rng::derive_seed;
use crate::worldmodel::{wm_error, WorldModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapConfig {
    pub rollouts: usize,
    pub plan: PlanConfig,
    pub seed: u64,
}

impl GapConfig {
    /// 50 rollouts of 300-step gradient descent, horizon 25.
    pub fn new(seed: u64) -> Self {
        GapConfig {
            rollouts: 50,
            plan: PlanConfig::sgd(25),
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub n: usize,
    /// Mean world-model error along the stored expert actions.
    pub mean_expert: f64,
    /// Mean world-model error along the planner's actions.
    pub mean_planned: f64,
    /// `mean_expert - mean_planned`; negative when the model is worse on the
    /// states the planner visits.
    pub difference: f64,
    pub expert: Vec<f64>,
    pub planned: Vec<f64>,
}

/// Averages per-rollout errors: each rollout's per-step mean first, then the
/// mean across rollouts.
pub fn gap_from_actions(
    model: &WorldModel,
    spec: &EnvSpec,
    enc: &Encoder,
    tasks: &[TaskInstance],
    planned: &[Vec<Vec<f64>>],
) -> Result<GapReport> {
    if tasks.len() != planned.len() {
        return Err(Error::Contract(format!(
            "{} tasks but {} planned action sequences",
            tasks.len(),
            planned.len()
        )));
    }
    let mut expert = Vec::with_capacity(tasks.len());
    let mut plan = Vec::with_capacity(tasks.len());
    for (t, a) in tasks.iter().zip(planned) {
        expert.push(wm_error(model, enc, spec, &t.start, &t.expert_actions)?.mean);
        plan.push(wm_error(model, enc, spec, &t.start, a)?.mean);
    }
    let n = tasks.len();
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let (mean_expert, mean_planned) = (mean(&expert), mean(&plan));
    Ok(GapReport {
        n,
        mean_expert,
        mean_planned,
        difference: mean_expert - mean_planned,
        expert,
        planned: plan,
    })
}

/// Samples `rollouts` start/goal pairs `H` steps apart from the training
/// trajectories, plans between them with GBP, and compares the model's error
/// on the expert actions against its error on the planned actions.
pub fn train_test_gap(
    model: &WorldModel,
    spec: &EnvSpec,
    enc: &Encoder,
    data: &RawDataset,
    cfg: &GapConfig,
) -> Result<GapReport> {
    cfg.plan.validate()?;
    let h = cfg.plan.horizon;
    let mut tasks = Vec::with_capacity(cfg.rollouts);
    let mut planned = Vec::with_capacity(cfg.rollouts);
    for i in 0..cfg.rollouts as u64 {
        let task = sample_task(data, h, derive_seed(cfg.seed, "gap-task", i))?;
        let z1 = enc.encode(&spec.observe(&task.start))?;
        let zg = enc.encode(&task.goal_obs)?;
        let mut pc = cfg.plan.clone();
        pc.seed = derive_seed(cfg.seed, "gap-plan", i);
        let plan = gbp(model, &z1, &zg, &pc)?;
        tasks.push(task);
        planned.push(plan.actions);
    }
    gap_from_actions(model, spec, enc, &tasks, &planned)
}
