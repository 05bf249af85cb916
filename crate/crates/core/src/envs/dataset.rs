use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::policy::{sample_free, GoalSeeker};
use super::{step, EnvSpec, EnvState};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, derive_seed};

pub const DATASET_SCHEMA: &str = "wmplanlab-dataset/1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Policy {
    Random,
    GoalSeekingNoisy { noise: f64 },
}

impl Default for Policy {
    fn default() -> Self {
        Policy::GoalSeekingNoisy { noise: 0.3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Expert,
    Corrected,
    Adversarial,
}

/// Observations `o_1..o_{T+1}` and normalized actions `u_1..u_T`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTrajectory {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
}

impl RawTrajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn states(&self, spec: &EnvSpec) -> Vec<EnvState> {
        self.observations.iter().map(|o| spec.state_from_obs(o)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    pub spec: EnvSpec,
    pub trajectories: Vec<RawTrajectory>,
    pub provenance: Provenance,
    pub seed: u64,
    pub policy: Policy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema: String,
    pub env: EnvSpec,
    pub n_traj: usize,
    pub traj_len: usize,
    pub seed: u64,
    pub policy: Policy,
    pub provenance: Provenance,
    pub action_units: String,
}

/// Start state, goal, and the stored expert actions connecting them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub start: EnvState,
    pub goal_obs: Vec<f64>,
    pub goal_state: EnvState,
    pub horizon_gap: usize,
    pub expert_actions: Vec<Vec<f64>>,
    pub traj_index: usize,
    pub offset: usize,
}

/// Rolls out `n_traj` trajectories, each with `traj_len` observations and
/// `traj_len - 1` actions. Every trajectory has its own seeded stream.
pub fn generate_dataset(
    spec: &EnvSpec,
    n_traj: usize,
    traj_len: usize,
    policy: Policy,
    seed: u64,
) -> Result<RawDataset> {
    if n_traj < 1 || traj_len < 2 {
        return Err(Error::Config(format!(
            "need n_traj >= 1 and traj_len >= 2, got {n_traj} and {traj_len}"
        )));
    }
    spec.validate()?;
    let trajectories = (0..n_traj)
        .map(|i| {
            let mut rng = rng::stream(derive_seed(seed, "trajectory", i as u64), "dataset");
            let mut s = EnvState {
                pos: sample_free(spec, &mut rng),
                vel: [0.0, 0.0],
            };
            let mut seeker = match policy {
                Policy::GoalSeekingNoisy { noise } => Some(GoalSeeker::new(spec, &mut rng, noise)),
                Policy::Random => None,
            };
            let mut observations = vec![spec.observe(&s)];
            let mut actions = Vec::with_capacity(traj_len - 1);
            for _ in 1..traj_len {
                let u = match seeker.as_mut() {
                    Some(p) => p.act(spec, &s, &mut rng),
                    None => vec![rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)],
                };
                s = step(spec, &s, spec.to_world(&u));
                observations.push(spec.observe(&s));
                actions.push(u);
            }
            RawTrajectory {
                observations,
                actions,
            }
        })
        .collect();
    Ok(RawDataset {
        spec: spec.clone(),
        trajectories,
        provenance: Provenance::Expert,
        seed,
        policy,
    })
}

/// Picks a start and a goal `horizon_gap` steps apart on one stored trajectory.
pub fn sample_task(dataset: &RawDataset, horizon_gap: usize, seed: u64) -> Result<TaskInstance> {
    let eligible: Vec<usize> = (0..dataset.trajectories.len())
        .filter(|&i| dataset.trajectories[i].observations.len() > horizon_gap)
        .collect();
    if eligible.is_empty() {
        return Err(Error::DatasetTooShort {
            needed: horizon_gap + 1,
            longest: dataset
                .trajectories
                .iter()
                .map(|t| t.observations.len())
                .max()
                .unwrap_or(0),
        });
    }
    let mut rng = rng::stream(seed, "sample-task");
    let traj_index = eligible[rng.random_range(0..eligible.len())];
    let traj = &dataset.trajectories[traj_index];
    let offset = rng.random_range(0..traj.observations.len() - horizon_gap);
    let spec = &dataset.spec;
    let goal_obs = traj.observations[offset + horizon_gap].clone();
    Ok(TaskInstance {
        start: spec.state_from_obs(&traj.observations[offset]),
        goal_state: spec.state_from_obs(&goal_obs),
        goal_obs,
        horizon_gap,
        expert_actions: traj.actions[offset..offset + horizon_gap].to_vec(),
        traj_index,
        offset,
    })
}

/// Closed-ball position test against the task's held-out goal state.
pub fn success(spec: &EnvSpec, s: &EnvState, task: &TaskInstance) -> bool {
    let d = ((s.pos[0] - task.goal_state.pos[0]).powi(2)
        + (s.pos[1] - task.goal_state.pos[1]).powi(2))
    .sqrt();
    d <= spec.success_radius
}

fn rows_tensor(rows: &[Vec<f64>], width: usize) -> Result<Tensor> {
    Tensor::new(vec![rows.len(), width], rows.iter().flatten().copied().collect())
}

fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

pub fn save_dataset(ds: &RawDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = DatasetManifest {
        schema: DATASET_SCHEMA.into(),
        env: ds.spec.clone(),
        n_traj: ds.trajectories.len(),
        traj_len: ds.trajectories.first().map_or(0, |t| t.observations.len()),
        seed: ds.seed,
        policy: ds.policy,
        provenance: ds.provenance,
        action_units: "normalized".into(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    for (i, t) in ds.trajectories.iter().enumerate() {
        let mut w = BufWriter::new(fs::File::create(dir.join(format!("traj_{i}.bin")))?);
        rows_tensor(&t.observations, ds.spec.obs_dim())?.write_wmt1(&mut w)?;
        rows_tensor(&t.actions, ds.spec.action_dim())?.write_wmt1(&mut w)?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<RawDataset> {
    let manifest: DatasetManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.schema != DATASET_SCHEMA {
        return Err(Error::Format {
            path: dir.display().to_string(),
            reason: format!("unknown schema {}", manifest.schema),
        });
    }
    let mut trajectories = Vec::with_capacity(manifest.n_traj);
    for i in 0..manifest.n_traj {
        let path = dir.join(format!("traj_{i}.bin"));
        let mut r = BufReader::new(fs::File::open(&path)?);
        let obs = Tensor::read_wmt1(&mut r)?;
        let act = Tensor::read_wmt1(&mut r)?;
        if obs.rows() != act.rows() + 1 {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: "observation count must be action count + 1".into(),
            });
        }
        trajectories.push(RawTrajectory {
            observations: tensor_rows(&obs),
            actions: tensor_rows(&act),
        });
    }
    Ok(RawDataset {
        spec: manifest.env,
        trajectories,
        provenance: manifest.provenance,
        seed: manifest.seed,
        policy: manifest.policy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::rollout_normalized;

    #[test]
    fn minimal_dataset_has_one_transition() {
        let ds = generate_dataset(&EnvSpec::wall2d(), 1, 2, Policy::Random, 3).unwrap();
        assert_eq!(ds.trajectories.len(), 1);
        assert_eq!(ds.trajectories[0].observations.len(), 2);
        assert_eq!(ds.trajectories[0].actions.len(), 1);
        assert!(generate_dataset(&EnvSpec::wall2d(), 0, 2, Policy::Random, 3).is_err());
        assert!(generate_dataset(&EnvSpec::wall2d(), 1, 1, Policy::Random, 3).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        for policy in [Policy::Random, Policy::default()] {
            let a = generate_dataset(&EnvSpec::point_mass_maze(), 4, 20, policy, 11).unwrap();
            let b = generate_dataset(&EnvSpec::point_mass_maze(), 4, 20, policy, 11).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn task_sampling() {
        let ds = generate_dataset(&EnvSpec::wall2d(), 8, 40, Policy::default(), 5).unwrap();
        let t = sample_task(&ds, 25, 9).unwrap();
        assert_eq!(t, sample_task(&ds, 25, 9).unwrap());
        assert_eq!(t.expert_actions.len(), 25);
        // Replaying the stored actions reaches the goal exactly.
        let end = *rollout_normalized(&ds.spec, &t.start, &t.expert_actions).last().unwrap();
        assert_eq!(end, t.goal_state);
        assert!(success(&ds.spec, &end, &t));

        let t0 = sample_task(&ds, 0, 1).unwrap();
        assert_eq!(t0.start, t0.goal_state);

        assert!(matches!(
            sample_task(&ds, 40, 1),
            Err(Error::DatasetTooShort { needed: 41, longest: 40 })
        ));
    }

    #[test]
    fn success_uses_a_closed_ball() {
        let mut spec = EnvSpec::wall2d();
        spec.success_radius = 0.0625;
        let goal = EnvState::at(0.25, 0.25);
        let task = TaskInstance {
            start: EnvState::at(0.1, 0.1),
            goal_obs: spec.observe(&goal),
            goal_state: goal,
            horizon_gap: 1,
            expert_actions: vec![vec![0.0, 0.0]],
            traj_index: 0,
            offset: 0,
        };
        assert!(success(&spec, &goal, &task));
        assert!(success(&spec, &EnvState::at(0.25, 0.3125), &task));
        assert!(!success(&spec, &EnvState::at(0.25, 0.3126), &task));
        // symmetric in which of two equal states is the goal
        let other = EnvState::at(0.25, 0.25);
        let mut swapped = task.clone();
        swapped.goal_state = other;
        assert_eq!(success(&spec, &other, &task), success(&spec, &goal, &swapped));
    }

    #[test]
    fn disk_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&EnvSpec::point_mass_maze(), 3, 6, Policy::default(), 2).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert!(dir.path().join("traj_2.bin").exists());
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }
}
