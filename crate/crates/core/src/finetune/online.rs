use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Adam, Tensor};
use crate::encoder::Encoder;
use crate::envs::{rollout_normalized, EnvSpec, EnvState, Provenance};
use crate::error::{Error, Result};
use crate::planners::{gbp, PlanConfig};
use crate::rng::{self, derive_seed};
use crate::worldmodel::{check_dims, supervised_step, LatentDataset, Trajectory, WorldModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineConfig {
    /// Number of plan-execute-finetune rounds.
    pub iterations: usize,
    /// Planner used to propose action sequences; its horizon and iteration
    /// count set the window length and planning budget.
    pub plan: PlanConfig,
    /// Fraction of every finetuning batch replayed from the original dataset;
    /// the rest comes from the corrected trajectories. 0 trains on corrected
    /// data only.
    pub replay_fraction: f64,
    pub lr: f64,
    pub steps_per_iteration: usize,
    pub batch_size: usize,
}

impl OnlineConfig {
    pub fn new(horizon: usize) -> Self {
        OnlineConfig {
            iterations: 50,
            plan: PlanConfig::adam(horizon),
            replay_fraction: 0.5,
            lr: 1e-4,
            steps_per_iteration: 50,
            batch_size: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        if !(0.0..=1.0).contains(&self.replay_fraction) || !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config(
                "online finetuning needs replay_fraction in [0, 1], lr > 0 and batch_size >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OnlineTrace {
    /// Goal loss the planner reached in each round.
    pub plan_losses: Vec<f64>,
    /// Mean finetuning loss of each round.
    pub finetune_losses: Vec<f64>,
}

/// Executes `actions` from `s1` in the simulator and encodes every reached
/// state.
pub fn correct_trajectory(spec: &EnvSpec, enc: &Encoder, s1: &EnvState, actions: &[Vec<f64>]) -> Result<Trajectory> {
    let mut states = vec![*s1];
    states.extend(rollout_normalized(spec, s1, actions));
    let latents = states
        .iter()
        .map(|s| enc.encode(&spec.observe(s)))
        .collect::<Result<Vec<_>>>()?;
    Trajectory::new(latents, actions.to_vec(), Some(states))
}

/// Plans between the ends of expert windows, replaces the model's imagined
/// states by the simulator's, and finetunes on a mix of the corrected and the
/// original transitions. Returns the model and the corrected dataset.
pub fn online_wm(
    model: &WorldModel,
    spec: &EnvSpec,
    enc: &Encoder,
    data: &LatentDataset,
    cfg: &OnlineConfig,
    seed: u64,
) -> Result<(WorldModel, LatentDataset, OnlineTrace)> {
    cfg.validate()?;
    data.require_nonempty()?;
    check_dims(model, data)?;
    let h = cfg.plan.horizon;
    let eligible: Vec<usize> = (0..data.trajectories.len())
        .filter(|&i| {
            let t = &data.trajectories[i];
            t.len() >= h && t.env_states.is_some()
        })
        .collect();
    let skipped = data.trajectories.len() - eligible.len();
    if skipped > 0 {
        log::warn!("online finetuning skips {skipped} trajectories that are too short or lack simulator states");
    }
    if eligible.is_empty() && cfg.iterations > 0 {
        return Err(Error::DatasetTooShort {
            needed: h + 1,
            longest: data.trajectories.iter().map(|t| t.latents.len()).max().unwrap_or(0),
        });
    }
    let mut model = model.clone();
    let mut adam = Adam::new(&model.mlp.params(), cfg.lr);
    let mut r = rng::stream(seed, "online");
    let original = data.transitions();
    let mut corrected = LatentDataset {
        trajectories: Vec::new(),
        provenance: Provenance::Corrected,
    };
    let mut trace = OnlineTrace::default();
    for it in 0..cfg.iterations {
        let ti = eligible[r.random_range(0..eligible.len())];
        let t = &data.trajectories[ti];
        let o = r.random_range(0..=t.len() - h);
        let s1 = t.env_states.as_ref().expect("eligible trajectories have states")[o];
        let mut plan_cfg = cfg.plan.clone();
        plan_cfg.seed = derive_seed(seed, "online-plan", it as u64);
        let plan = gbp(&model, &t.latents[o], &t.latents[o + h], &plan_cfg)?;
        trace.plan_losses.push(plan.final_loss);
        corrected
            .trajectories
            .push(correct_trajectory(spec, enc, &s1, &plan.actions)?);

        let fresh = corrected.transitions();
        let n_replay = (cfg.replay_fraction * cfg.batch_size as f64).round() as usize;
        let mut total = 0.0;
        for _ in 0..cfg.steps_per_iteration {
            let mut rows: Vec<(&Trajectory, usize)> = Vec::with_capacity(cfg.batch_size);
            for j in 0..cfg.batch_size {
                let (src, pool) = if j < n_replay {
                    (data, &original)
                } else {
                    (&corrected, &fresh)
                };
                let (i, s) = pool[r.random_range(0..pool.len())];
                rows.push((&src.trajectories[i], s));
            }
            let (z, a, y) = stack(&rows, model.latent_dim, model.action_dim);
            total += supervised_step(&mut model, &mut adam, z, a, y)?;
        }
        trace
            .finetune_losses
            .push(total / cfg.steps_per_iteration.max(1) as f64);
    }
    Ok((model, corrected, trace))
}

fn stack(rows: &[(&Trajectory, usize)], dz: usize, da: usize) -> (Tensor, Tensor, Tensor) {
    let b = rows.len();
    let (mut z, mut a, mut y) = (Vec::with_capacity(b * dz), Vec::with_capacity(b * da), Vec::with_capacity(b * dz));
    for (t, s) in rows {
        z.extend_from_slice(&t.latents[*s]);
        a.extend_from_slice(&t.actions[*s]);
        y.extend_from_slice(&t.latents[s + 1]);
    }
    (
        Tensor::from_parts(vec![b, dz], z),
        Tensor::from_parts(vec![b, da], a),
        Tensor::from_parts(vec![b, dz], y),
    )
}
