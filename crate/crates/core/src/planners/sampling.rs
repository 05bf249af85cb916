use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    batch_costs, check_plan_dims, clamp_unit, descend, flatten, to_rows, Descent, GoalLoss, Optimizer,
    PlanResult,
};
use crate::error::{Error, Result};
use crate::rng;
use crate::worldmodel::WorldModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceMode {
    /// Full elite covariance plus `jitter * I`.
    Full,
    Diagonal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CemConfig {
    pub horizon: usize,
    pub population: usize,
    pub elites: usize,
    pub iterations: usize,
    pub sigma0: f64,
    pub covariance: CovarianceMode,
    pub jitter: f64,
    pub clamp: bool,
    /// Per-call seed; drivers overwrite it per task and MPC step.
    #[serde(default)]
    pub seed: u64,
}

impl CemConfig {
    pub fn new(horizon: usize) -> Self {
        CemConfig {
            horizon,
            population: 300,
            elites: 30,
            iterations: 30,
            sigma0: 1.0,
            covariance: CovarianceMode::Full,
            jitter: 1e-6,
            clamp: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0
            || self.iterations == 0
            || self.elites == 0
            || self.elites > self.population
            || !(self.sigma0 >= 0.0)
            || !(self.jitter >= 0.0)
        {
            return Err(Error::Config(format!(
                "cem needs horizon >= 1, iterations >= 1, 1 <= elites <= population, sigma0 >= 0 \
                 (got H={}, I={}, K={}, N={}, sigma0={})",
                self.horizon, self.iterations, self.elites, self.population, self.sigma0
            )));
        }
        Ok(())
    }
}

/// Gradient refinement applied to every CEM candidate before scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig { steps: 2, lr: 0.3 }
    }
}

/// Snapshot handed to the CEM observer after each elite refit.
pub struct CemIteration<'a> {
    pub iteration: usize,
    /// Scored candidates, `[population, H * d_a]`.
    pub samples: &'a [f64],
    pub costs: &'a [f64],
    /// Candidate indices, lowest cost first.
    pub elites: &'a [usize],
    /// Refitted mean.
    pub mean: &'a [f64],
    /// Refitted covariance, `(H d_a)^2` row-major.
    pub covariance: &'a [f64],
}

/// Cross-entropy method; returns the final mean.
pub fn cem(model: &WorldModel, z1: &[f64], goal: &[f64], cfg: &CemConfig) -> Result<PlanResult> {
    cem_observed(model, z1, goal, cfg, None, None, &mut |_| {})
}

/// CEM whose candidates each get `refine.steps` Adam steps on the final-state
/// loss before scoring.
pub fn gradcem(
    model: &WorldModel,
    z1: &[f64],
    goal: &[f64],
    cfg: &CemConfig,
    refine: &RefineConfig,
) -> Result<PlanResult> {
    cem_observed(model, z1, goal, cfg, Some(refine), None, &mut |_| {})
}

/// CEM with an optional refinement stage, an optional initial mean and an
/// observer called after every iteration.
pub fn cem_observed(
    model: &WorldModel,
    z1: &[f64],
    goal: &[f64],
    cfg: &CemConfig,
    refine: Option<&RefineConfig>,
    init_mean: Option<&[Vec<f64>]>,
    observer: &mut dyn FnMut(&CemIteration<'_>),
) -> Result<PlanResult> {
    cfg.validate()?;
    check_plan_dims(model, z1, goal)?;
    let start = Instant::now();
    let da = model.action_dim;
    let h = cfg.horizon;
    let dim = h * da;
    let (pop, k) = (cfg.population, cfg.elites);
    let mut mean = match init_mean {
        Some(m) => flatten(m),
        None => vec![0.0; dim],
    };
    if mean.len() != dim {
        return Err(Error::shape("cem init", &[dim], &[mean.len()]));
    }
    // Lower-triangular factor of the sampling covariance.
    let mut chol = DMatrix::<f64>::identity(dim, dim) * cfg.sigma0;
    let mut r = rng::stream(cfg.seed, "cem");
    let goal_loss = GoalLoss::Final;
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut samples = vec![0.0; pop * dim];
    for it in 0..cfg.iterations {
        let mu = DVector::from_column_slice(&mean);
        for j in 0..pop {
            let eps = DVector::<f64>::from_fn(dim, |_, _| StandardNormal.sample(&mut r));
            let x = &mu + &chol * eps;
            samples[j * dim..(j + 1) * dim].copy_from_slice(x.as_slice());
        }
        if cfg.clamp {
            clamp_unit(&mut samples);
        }
        if let Some(rc) = refine.filter(|rc| rc.steps > 0) {
            let out = descend(
                model,
                z1,
                goal,
                std::mem::take(&mut samples),
                pop,
                h,
                &Descent {
                    optimizer: Optimizer::Adam,
                    lr: rc.lr,
                    iterations: rc.steps,
                    clamp: cfg.clamp,
                    best_iterate: false,
                    goal_loss: &goal_loss,
                },
            )?;
            samples = out.actions;
        }
        let costs = batch_costs(model, z1, goal, &samples, pop, h, &goal_loss)?;
        let mut order: Vec<usize> = (0..pop).collect();
        order.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)));
        let elites = &order[..k];

        let mut m = vec![0.0; dim];
        for &e in elites {
            for (mi, x) in m.iter_mut().zip(&samples[e * dim..(e + 1) * dim]) {
                *mi += x;
            }
        }
        for mi in &mut m {
            *mi /= k as f64;
        }
        let mut c = DMatrix::<f64>::zeros(dim, dim);
        for &e in elites {
            let d = DVector::from_iterator(dim, samples[e * dim..(e + 1) * dim].iter().zip(&m).map(|(x, mi)| x - mi));
            c.ger(1.0 / k as f64, &d, &d, 1.0);
        }
        match cfg.covariance {
            CovarianceMode::Full => {
                c += DMatrix::<f64>::identity(dim, dim) * cfg.jitter;
                chol = match c.clone().cholesky() {
                    Some(l) => l.l(),
                    None => {
                        log::warn!("cem: covariance not positive definite at iteration {it}; using its diagonal");
                        diagonal_factor(&c)
                    }
                };
            }
            CovarianceMode::Diagonal => {
                let d = DMatrix::from_diagonal(&(c.diagonal() + DVector::repeat(dim, cfg.jitter)));
                chol = diagonal_factor(&d);
                c = d;
            }
        }
        mean = m;
        observer(&CemIteration {
            iteration: it,
            samples: &samples,
            costs: &costs,
            elites,
            mean: &mean,
            covariance: c.as_slice(),
        });
        trace.push(batch_costs(model, z1, goal, &mean, 1, h, &goal_loss)?[0]);
    }
    Ok(PlanResult {
        actions: to_rows(&mean, h, da),
        final_loss: *trace.last().unwrap(),
        iterations: trace.len(),
        loss_trace: trace,
        wall_seconds: start.elapsed().as_secs_f64(),
        failure: None,
    })
}

fn diagonal_factor(c: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(&c.diagonal().map(|v| v.max(0.0).sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MppiConfig {
    pub horizon: usize,
    pub samples: usize,
    pub noise_std: f64,
    pub temperature: f64,
    pub iterations: usize,
    /// Let the unperturbed nominal compete as an extra candidate.
    pub include_nominal: bool,
    pub clamp: bool,
    /// Per-call seed; drivers overwrite it per task and MPC step.
    #[serde(default)]
    pub seed: u64,
}

impl MppiConfig {
    pub fn new(horizon: usize) -> Self {
        MppiConfig {
            horizon,
            samples: 300,
            noise_std: 0.5,
            temperature: 0.01,
            iterations: 30,
            include_nominal: true,
            clamp: true,
            seed: 0,
        }
    }
}

/// Single-shot MPPI: repeated softmin-weighted averaging of Gaussian
/// perturbations of a nominal sequence.
pub fn mppi(
    model: &WorldModel,
    z1: &[f64],
    goal: &[f64],
    cfg: &MppiConfig,
    init: Option<&[Vec<f64>]>,
) -> Result<PlanResult> {
    if cfg.horizon == 0 || cfg.samples == 0 || cfg.iterations == 0 || !(cfg.temperature > 0.0) {
        return Err(Error::Config(
            "mppi needs horizon, samples and iterations >= 1 and temperature > 0".into(),
        ));
    }
    check_plan_dims(model, z1, goal)?;
    let start = Instant::now();
    let da = model.action_dim;
    let h = cfg.horizon;
    let dim = h * da;
    let mut nominal = match init {
        Some(a) => flatten(a),
        None => vec![0.0; dim],
    };
    if nominal.len() != dim {
        return Err(Error::shape("mppi init", &[dim], &[nominal.len()]));
    }
    let goal_loss = GoalLoss::Final;
    let mut r = rng::stream(cfg.seed, "mppi");
    let n = cfg.samples + usize::from(cfg.include_nominal);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let mut cand = Vec::with_capacity(n * dim);
        for _ in 0..cfg.samples {
            for &x in &nominal {
                let e: f64 = StandardNormal.sample(&mut r);
                cand.push(x + cfg.noise_std * e);
            }
        }
        if cfg.include_nominal {
            cand.extend_from_slice(&nominal);
        }
        if cfg.clamp {
            clamp_unit(&mut cand);
        }
        let costs = batch_costs(model, z1, goal, &cand, n, h, &goal_loss)?;
        let cmin = costs.iter().copied().fold(f64::INFINITY, f64::min);
        let w: Vec<f64> = costs.iter().map(|c| (-(c - cmin) / cfg.temperature).exp()).collect();
        let total: f64 = w.iter().sum();
        let mut next = nominal.clone();
        for (j, wj) in w.iter().enumerate() {
            let wj = wj / total;
            for (d, nx) in next.iter_mut().enumerate() {
                *nx += wj * (cand[j * dim + d] - nominal[d]);
            }
        }
        nominal = next;
        trace.push(batch_costs(model, z1, goal, &nominal, 1, h, &goal_loss)?[0]);
    }
    Ok(PlanResult {
        actions: to_rows(&nominal, h, da),
        final_loss: *trace.last().unwrap(),
        iterations: trace.len(),
        loss_trace: trace,
        wall_seconds: start.elapsed().as_secs_f64(),
        failure: None,
    })
}
