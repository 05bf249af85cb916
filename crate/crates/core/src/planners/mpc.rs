use serde::{Deserialize, Serialize};

use super::{
    cem_observed, gbp_from, initial_actions, mppi, CemConfig, MppiConfig, PlanConfig, PlanInit, PlanResult,
    RefineConfig,
};
use crate::encoder::Encoder;
use crate::envs::{step, success, EnvSpec, EnvState, TaskInstance};
use crate::error::{Error, Result};
use crate::initnet::InitNet;
use crate::rng::derive_seed;
use crate::worldmodel::WorldModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Planner {
    Gbp(PlanConfig),
    Cem(CemConfig),
    GradCem { cem: CemConfig, refine: RefineConfig },
    Mppi(MppiConfig),
}

impl Planner {
    pub fn horizon(&self) -> usize {
        match self {
            Planner::Gbp(c) => c.horizon,
            Planner::Cem(c) | Planner::GradCem { cem: c, .. } => c.horizon,
            Planner::Mppi(c) => c.horizon,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Planner::Gbp(c) => c.seed,
            Planner::Cem(c) | Planner::GradCem { cem: c, .. } => c.seed,
            Planner::Mppi(c) => c.seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Planner {
        let mut p = self.clone();
        match &mut p {
            Planner::Gbp(c) => c.seed = seed,
            Planner::Cem(c) | Planner::GradCem { cem: c, .. } => c.seed = seed,
            Planner::Mppi(c) => c.seed = seed,
        }
        p
    }

    /// Plans from `z1` towards `goal`. `init` replaces the configured
    /// initialization (GBP start, CEM mean, MPPI nominal).
    pub fn plan(
        &self,
        model: &WorldModel,
        initnet: Option<&InitNet>,
        z1: &[f64],
        goal: &[f64],
        init: Option<&[Vec<f64>]>,
    ) -> Result<PlanResult> {
        match self {
            Planner::Gbp(cfg) => {
                let start = match init {
                    Some(a) => a.to_vec(),
                    None => initial_actions(cfg, model.action_dim, initnet.map(|n| (n, z1, goal)))?,
                };
                gbp_from(model, z1, goal, cfg, &start)
            }
            Planner::Cem(cfg) => cem_observed(model, z1, goal, cfg, None, init, &mut |_| {}),
            Planner::GradCem { cem, refine } => cem_observed(model, z1, goal, cem, Some(refine), init, &mut |_| {}),
            Planner::Mppi(cfg) => mppi(model, z1, goal, cfg, init),
        }
    }

    fn uses_initnet(&self) -> bool {
        matches!(self, Planner::Gbp(c) if c.init == PlanInit::InitNet)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcConfig {
    pub steps: usize,
    /// Actions executed per replanning step; `None` executes the whole plan.
    pub k_exec: Option<usize>,
    /// Start each plan from the unexecuted tail of the previous one.
    pub warm_start: bool,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            steps: 10,
            k_exec: None,
            warm_start: false,
        }
    }
}

impl MpcConfig {
    pub fn open_loop() -> Self {
        MpcConfig {
            steps: 1,
            k_exec: None,
            warm_start: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcOutcome {
    pub success: bool,
    pub executed: Vec<Vec<f64>>,
    pub plans: Vec<PlanResult>,
    pub final_state: EnvState,
}

/// Plan, execute the first `k_exec` actions in the simulator, re-encode the
/// reached observation, repeat. Success is judged on the state reached at the
/// end of each executed segment; the loop stops at the first success.
/// Step 0 plans with the planner's own seed; later steps derive theirs.
pub fn mpc(
    spec: &EnvSpec,
    model: &WorldModel,
    enc: &Encoder,
    task: &TaskInstance,
    planner: &Planner,
    cfg: &MpcConfig,
    initnet: Option<&InitNet>,
) -> Result<MpcOutcome> {
    let h = planner.horizon();
    let k_exec = cfg.k_exec.unwrap_or(h);
    if cfg.steps == 0 || k_exec == 0 || k_exec > h {
        return Err(Error::Config(format!(
            "mpc needs steps >= 1 and 1 <= k_exec <= H (got {}, {k_exec}, H={h})",
            cfg.steps
        )));
    }
    if planner.uses_initnet() && initnet.is_none() {
        return Err(Error::Config("planner init is initnet but no network was given".into()));
    }
    let goal = enc.encode(&task.goal_obs)?;
    let mut s = task.start;
    let mut done = false;
    let mut executed = Vec::new();
    let mut plans = Vec::new();
    let mut carry: Option<Vec<Vec<f64>>> = None;
    let base = planner.seed();
    for k in 0..cfg.steps {
        if done {
            break;
        }
        let seed = if k == 0 { base } else { derive_seed(base, "mpc-step", k as u64) };
        let p = planner.with_seed(seed);
        let z1 = enc.encode(&spec.observe(&s))?;
        let init = if cfg.warm_start { carry.as_deref() } else { None };
        let res = p.plan(model, initnet, &z1, &goal, init)?;
        if let Some(f) = &res.failure {
            log::warn!("mpc step {k}: {f}");
        }
        for u in &res.actions[..k_exec] {
            s = step(spec, &s, spec.to_world(u));
            executed.push(u.clone());
        }
        done = success(spec, &s, task);
        let mut tail = res.actions[k_exec..].to_vec();
        tail.resize(h, vec![0.0; model.action_dim]);
        carry = Some(tail);
        plans.push(res);
    }
    Ok(MpcOutcome {
        success: done,
        executed,
        plans,
        final_state: s,
    })
}
