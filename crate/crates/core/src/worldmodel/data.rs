use crate::encoder::Encoder;
use crate::envs::{EnvState, Provenance, RawDataset};
use crate::error::{Error, Result};

/// Latent trajectory `(z_1, a_1, ..., a_T, z_{T+1})`, optionally with the true
/// simulator states that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub latents: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub env_states: Option<Vec<EnvState>>,
}

impl Trajectory {
    pub fn new(
        latents: Vec<Vec<f64>>,
        actions: Vec<Vec<f64>>,
        env_states: Option<Vec<EnvState>>,
    ) -> Result<Self> {
        if latents.len() != actions.len() + 1 {
            return Err(Error::Contract(format!(
                "trajectory with {} latents and {} actions",
                latents.len(),
                actions.len()
            )));
        }
        if let Some(s) = &env_states {
            if s.len() != latents.len() {
                return Err(Error::Contract("env_states must match latents".into()));
            }
        }
        Ok(Trajectory {
            latents,
            actions,
            env_states,
        })
    }

    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentDataset {
    pub trajectories: Vec<Trajectory>,
    pub provenance: Provenance,
}

impl LatentDataset {
    /// Encodes every observation of `raw` and keeps the simulator states.
    pub fn from_raw(raw: &RawDataset, enc: &Encoder) -> Result<Self> {
        let trajectories = raw
            .trajectories
            .iter()
            .map(|t| {
                Trajectory::new(
                    enc.encode_all(&t.observations)?,
                    t.actions.clone(),
                    Some(t.states(&raw.spec)),
                )
            })
            .collect::<Result<_>>()?;
        Ok(LatentDataset {
            trajectories,
            provenance: raw.provenance,
        })
    }

    pub fn transition_count(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// `(trajectory, step)` index of every transition in storage order.
    pub fn transitions(&self) -> Vec<(usize, usize)> {
        self.trajectories
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len()).map(move |s| (i, s)))
            .collect()
    }

    pub fn latent_dim(&self) -> Option<usize> {
        self.trajectories.first().map(|t| t.latents[0].len())
    }

    pub fn action_dim(&self) -> Option<usize> {
        self.trajectories
            .iter()
            .find_map(|t| t.actions.first().map(Vec::len))
    }

    pub(crate) fn require_nonempty(&self) -> Result<()> {
        if self.transition_count() == 0 {
            Err(Error::EmptyDataset)
        } else {
            Ok(())
        }
    }
}
