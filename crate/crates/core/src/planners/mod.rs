//! Test-time planners over a world model: gradient descent on the action
//! sequence, CEM, GradCEM, MPPI, and the MPC loop that executes their plans in
//! the simulator.
//!
//! Actions are in normalized units (`[-1, 1]` per component, scaled by `a_max`
//! inside the environment). Batches of action sequences are stored as
//! `[B, H * d_a]` row-major buffers.

mod mpc;
mod sampling;

use std::time::Instant;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use mpc::{mpc, MpcConfig, MpcOutcome, Planner};
pub use sampling::{
    cem, cem_observed, gradcem, mppi, CemConfig, CemIteration, CovarianceMode, MppiConfig, RefineConfig,
};

use crate::diffcore::{AdamState, Tensor, Var};
use crate::error::{Error, Result};
use crate::initnet::InitNet;
use crate::rng;
use crate::worldmodel::WorldModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum GoalLoss {
    /// `||z_{H+1} - z_goal||^2`.
    Final,
    /// `(1/H) sum_i (w_i / sum w) ||z_i - z_goal||^2` over `i = 2..H+1`.
    Weighted { weights: Vec<f64> },
}

impl GoalLoss {
    /// `w_i = base^i` for `i = 2..H+1`; `base = 2` for navigation and `0.5`
    /// for the decaying preset.
    pub fn geometric(horizon: usize, base: f64) -> Self {
        GoalLoss::Weighted {
            weights: (2..horizon + 2).map(|i| base.powi(i as i32)).collect(),
        }
    }

    /// Multiplier of each predicted state's squared distance.
    pub fn coefficients(&self, horizon: usize) -> Result<Vec<f64>> {
        match self {
            GoalLoss::Final => {
                let mut c = vec![0.0; horizon];
                c[horizon - 1] = 1.0;
                Ok(c)
            }
            GoalLoss::Weighted { weights } => {
                if weights.len() != horizon {
                    return Err(Error::Contract(format!(
                        "goal loss has {} weights for horizon {horizon}",
                        weights.len()
                    )));
                }
                if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
                    return Err(Error::Contract("goal-loss weights must be positive".into()));
                }
                let total: f64 = weights.iter().sum();
                Ok(weights.iter().map(|w| w / total / horizon as f64).collect())
            }
        }
    }

    /// Loss of one predicted sequence `z_2..z_{H+1}`.
    pub fn value(&self, latents: &[Vec<f64>], goal: &[f64]) -> Result<f64> {
        if latents.is_empty() {
            return Err(Error::Contract("goal loss needs H >= 1".into()));
        }
        let flat: Vec<Vec<f64>> = latents.to_vec();
        Ok(self.row_values(&flat, goal, 1)?[0])
    }

    /// Per-row losses of a batch rollout (`latents[t]` is `[B, d_z]`).
    pub fn row_values(&self, latents: &[Vec<f64>], goal: &[f64], rows: usize) -> Result<Vec<f64>> {
        let c = self.coefficients(latents.len())?;
        let dz = goal.len();
        let mut out = vec![0.0; rows];
        for (r, o) in out.iter_mut().enumerate() {
            for (t, z) in latents.iter().enumerate() {
                if c[t] == 0.0 {
                    continue;
                }
                let d = sq_dist(&z[r * dz..(r + 1) * dz], goal);
                *o += if matches!(self, GoalLoss::Final) { d } else { c[t] * d };
            }
        }
        Ok(out)
    }

    /// Sum over batch rows of the loss, recorded on the tape. `goal` is `[B, d_z]`.
    pub fn on_tape<'t>(&self, latents: &[Var<'t>], goal: &Var<'t>) -> Result<Var<'t>> {
        if latents.is_empty() {
            return Err(Error::Contract("goal loss needs H >= 1".into()));
        }
        match self {
            GoalLoss::Final => latents.last().unwrap().dist_sq(goal),
            GoalLoss::Weighted { .. } => {
                let c = self.coefficients(latents.len())?;
                let mut total: Option<Var<'t>> = None;
                for (z, ci) in latents.iter().zip(c) {
                    let term = z.dist_sq(goal)?.scale(ci);
                    total = Some(match total {
                        None => term,
                        Some(acc) => acc.add(&term)?,
                    });
                }
                Ok(total.unwrap())
            }
        }
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanInit {
    /// `N(0, I)` draws, clamped when clamping is on.
    Gaussian,
    Zeros,
    /// Output of a trained initialization network.
    InitNet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanConfig {
    pub horizon: usize,
    pub iterations: usize,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub goal_loss: GoalLoss,
    pub init: PlanInit,
    /// Clamp actions to `[-1, 1]` after every step.
    pub clamp: bool,
    /// Return the lowest-loss iterate instead of the last one.
    pub best_iterate: bool,
    /// Per-call seed; drivers overwrite it per task and MPC step.
    #[serde(default)]
    pub seed: u64,
}

impl PlanConfig {
    pub fn sgd(horizon: usize) -> Self {
        PlanConfig {
            horizon,
            iterations: 300,
            optimizer: Optimizer::Sgd,
            lr: 1.0,
            goal_loss: GoalLoss::Final,
            init: PlanInit::Gaussian,
            clamp: true,
            best_iterate: true,
            seed: 0,
        }
    }

    pub fn adam(horizon: usize) -> Self {
        PlanConfig {
            optimizer: Optimizer::Adam,
            lr: 0.3,
            ..PlanConfig::sgd(horizon)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.iterations == 0 || !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "planner needs horizon >= 1, iterations >= 1 and lr > 0 (got {}, {}, {})",
                self.horizon, self.iterations, self.lr
            )));
        }
        self.goal_loss.coefficients(self.horizon).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub actions: Vec<Vec<f64>>,
    /// Loss of each evaluated iterate, in order.
    pub loss_trace: Vec<f64>,
    /// Goal loss of the returned actions.
    pub final_loss: f64,
    pub iterations: usize,
    pub wall_seconds: f64,
    /// Set when the optimization stopped on a non-finite loss.
    pub failure: Option<String>,
}

pub(crate) fn to_rows(flat: &[f64], horizon: usize, da: usize) -> Vec<Vec<f64>> {
    (0..horizon).map(|t| flat[t * da..(t + 1) * da].to_vec()).collect()
}

pub(crate) fn flatten(actions: &[Vec<f64>]) -> Vec<f64> {
    actions.iter().flatten().copied().collect()
}

pub(crate) fn clamp_unit(x: &mut [f64]) {
    for v in x {
        *v = v.clamp(-1.0, 1.0);
    }
}

fn repeat_row(row: &[f64], rows: usize) -> Tensor {
    let mut data = Vec::with_capacity(row.len() * rows);
    for _ in 0..rows {
        data.extend_from_slice(row);
    }
    Tensor::from_parts(vec![rows, row.len()], data)
}

/// Gradient descent settings shared by GBP and the GradCEM refinement.
pub(crate) struct Descent<'a> {
    pub optimizer: Optimizer,
    pub lr: f64,
    pub iterations: usize,
    pub clamp: bool,
    pub best_iterate: bool,
    pub goal_loss: &'a GoalLoss,
}

pub(crate) struct DescentOut {
    pub actions: Vec<f64>,
    pub traces: Vec<Vec<f64>>,
    pub failure: Option<String>,
}

/// Runs descent on `rows` independent action sequences at once. The batch
/// loss is the sum of the row losses, so every row sees exactly its own
/// gradient, and the elementwise optimizers keep rows independent.
///
/// In best-iterate mode `iterations` iterates are evaluated (the initial one
/// plus `iterations - 1` updates); otherwise `iterations` updates are applied
/// and the last iterate is returned.
pub(crate) fn descend(
    model: &WorldModel,
    z1: &[f64],
    goal: &[f64],
    init: Vec<f64>,
    rows: usize,
    horizon: usize,
    d: &Descent<'_>,
) -> Result<DescentOut> {
    let da = model.action_dim;
    let width = horizon * da;
    let mut x = init;
    let mut best = x.clone();
    let mut best_loss = vec![f64::INFINITY; rows];
    let mut traces = vec![Vec::with_capacity(d.iterations); rows];
    let mut adam = AdamState::new(x.len());
    let updates = if d.best_iterate {
        d.iterations.saturating_sub(1)
    } else {
        d.iterations
    };
    let coefficients = d.goal_loss.coefficients(horizon)?;
    let mut failure = None;
    for it in 0..d.iterations {
        let (losses, g) = model.goal_loss_and_grad(z1, goal, &x, rows, &coefficients);
        if losses.iter().any(|l| !l.is_finite()) {
            failure = Some(format!("non-finite goal loss at iteration {it}"));
            break;
        }
        for r in 0..rows {
            traces[r].push(losses[r]);
            if losses[r] < best_loss[r] {
                best_loss[r] = losses[r];
                best[r * width..(r + 1) * width].copy_from_slice(&x[r * width..(r + 1) * width]);
            }
        }
        if it >= updates {
            continue;
        }
        if g.iter().any(|v| !v.is_finite()) {
            failure = Some(format!("non-finite action gradient at iteration {it}"));
            break;
        }
        match d.optimizer {
            Optimizer::Sgd => {
                for (xi, gi) in x.iter_mut().zip(&g) {
                    *xi -= d.lr * gi;
                }
            }
            Optimizer::Adam => adam.update(&mut x, &g, d.lr)?,
        }
        if d.clamp {
            clamp_unit(&mut x);
        }
    }
    let actions = if d.best_iterate || failure.is_some() { best } else { x };
    Ok(DescentOut {
        actions,
        traces,
        failure,
    })
}

/// Initial action sequence for gradient-based planning.
pub fn initial_actions(
    cfg: &PlanConfig,
    action_dim: usize,
    initnet: Option<(&InitNet, &[f64], &[f64])>,
) -> Result<Vec<Vec<f64>>> {
    let h = cfg.horizon;
    let mut flat = match cfg.init {
        PlanInit::Zeros => vec![0.0; h * action_dim],
        PlanInit::Gaussian => {
            let mut r = rng::stream(cfg.seed, "gbp-init");
            let n = Normal::new(0.0, 1.0).expect("unit normal");
            (0..h * action_dim).map(|_| n.sample(&mut r)).collect()
        }
        PlanInit::InitNet => {
            let (net, z1, zg) = initnet
                .ok_or_else(|| Error::Config("planner init is initnet but no network was given".into()))?;
            if net.horizon != h {
                return Err(Error::Config(format!(
                    "initnet horizon {} does not match planner horizon {h}",
                    net.horizon
                )));
            }
            flatten(&net.init_actions(z1, zg)?)
        }
    };
    if cfg.clamp {
        clamp_unit(&mut flat);
    }
    Ok(to_rows(&flat, h, action_dim))
}

/// Gradient-based planning from the configured initialization.
pub fn gbp(model: &WorldModel, z1: &[f64], goal: &[f64], cfg: &PlanConfig) -> Result<PlanResult> {
    let init = initial_actions(cfg, model.action_dim, None)?;
    gbp_from(model, z1, goal, cfg, &init)
}

/// Gradient-based planning from an explicit initial action sequence.
pub fn gbp_from(
    model: &WorldModel,
    z1: &[f64],
    goal: &[f64],
    cfg: &PlanConfig,
    init: &[Vec<f64>],
) -> Result<PlanResult> {
    cfg.validate()?;
    check_plan_dims(model, z1, goal)?;
    if init.len() != cfg.horizon || init.iter().any(|a| a.len() != model.action_dim) {
        return Err(Error::shape(
            "gbp init",
            &[cfg.horizon, model.action_dim],
            &[init.len(), init.first().map_or(0, Vec::len)],
        ));
    }
    let start = Instant::now();
    let out = descend(
        model,
        z1,
        goal,
        flatten(init),
        1,
        cfg.horizon,
        &Descent {
            optimizer: cfg.optimizer,
            lr: cfg.lr,
            iterations: cfg.iterations,
            clamp: cfg.clamp,
            best_iterate: cfg.best_iterate,
            goal_loss: &cfg.goal_loss,
        },
    )?;
    let final_loss = sequence_cost(model, z1, goal, &out.actions, cfg.horizon, &cfg.goal_loss)?;
    let trace = out.traces.into_iter().next().unwrap_or_default();
    Ok(PlanResult {
        actions: to_rows(&out.actions, cfg.horizon, model.action_dim),
        iterations: trace.len(),
        loss_trace: trace,
        final_loss,
        wall_seconds: start.elapsed().as_secs_f64(),
        failure: out.failure,
    })
}

pub(crate) fn check_plan_dims(model: &WorldModel, z1: &[f64], goal: &[f64]) -> Result<()> {
    if z1.len() != model.latent_dim || goal.len() != model.latent_dim {
        return Err(Error::shape("plan", &[model.latent_dim], &[z1.len(), goal.len()]));
    }
    Ok(())
}

/// Tape-free goal loss of one flat action sequence.
pub(crate) fn sequence_cost(
    model: &WorldModel,
    z1: &[f64],
    goal: &[f64],
    actions: &[f64],
    horizon: usize,
    goal_loss: &GoalLoss,
) -> Result<f64> {
    let latents = model.rollout_batch(z1, actions, 1, horizon);
    Ok(goal_loss.row_values(&latents, goal, 1)?[0])
}

/// Per-row costs of a batch of flat sequences.
pub(crate) fn batch_costs(
    model: &WorldModel,
    z1: &[f64],
    goal: &[f64],
    actions: &[f64],
    rows: usize,
    horizon: usize,
    goal_loss: &GoalLoss,
) -> Result<Vec<f64>> {
    let z1_rows = repeat_row(z1, rows);
    let latents = model.rollout_batch(z1_rows.data(), actions, rows, horizon);
    let mut c = goal_loss.row_values(&latents, goal, rows)?;
    for v in &mut c {
        if !v.is_finite() {
            *v = f64::INFINITY;
        }
    }
    Ok(c)
}
