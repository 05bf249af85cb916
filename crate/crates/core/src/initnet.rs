//! Action-sequence initialization network `g(z_1, z_goal) -> u_1..u_H`,
//! regressed onto expert action windows.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffcore::{grad, Adam, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng;
use crate::worldmodel::{join, load_mlp, save_mlp, LatentDataset, Mlp};

pub const INITNET_SCHEMA: &str = "wmplanlab-initnet/1";

/// The last layer is squashed by `tanh`, so outputs stay in the normalized
/// action range `[-1, 1]` (that is `[-a_max, a_max]` in world units).
#[derive(Clone, Debug, PartialEq)]
pub struct InitNet {
    pub mlp: Mlp,
    pub latent_dim: usize,
    pub action_dim: usize,
    pub horizon: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitNetConfig {
    pub horizon: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl InitNetConfig {
    pub fn new(horizon: usize) -> Self {
        InitNetConfig {
            horizon,
            hidden: vec![128, 128],
            epochs: 1,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InitNetTrace {
    pub batch_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct InitNetDescriptor {
    schema: String,
    sizes: Vec<usize>,
    latent_dim: usize,
    action_dim: usize,
    horizon: usize,
}

impl InitNet {
    pub fn new(latent_dim: usize, action_dim: usize, horizon: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut sizes = vec![2 * latent_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(horizon * action_dim);
        let mut r = rng::stream(seed, "initnet-init");
        Ok(InitNet {
            mlp: Mlp::new(&sizes, &mut r, false)?,
            latent_dim,
            action_dim,
            horizon,
        })
    }

    pub fn zeros(latent_dim: usize, action_dim: usize, horizon: usize, hidden: &[usize]) -> Self {
        let mut sizes = vec![2 * latent_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(horizon * action_dim);
        InitNet {
            mlp: Mlp::zeros(&sizes),
            latent_dim,
            action_dim,
            horizon,
        }
    }

    pub fn init_actions(&self, z1: &[f64], goal: &[f64]) -> Result<Vec<Vec<f64>>> {
        if z1.len() != self.latent_dim || goal.len() != self.latent_dim {
            return Err(Error::shape("init_actions", &[self.latent_dim], &[z1.len(), goal.len()]));
        }
        let x: Vec<f64> = z1.iter().chain(goal).copied().collect();
        let out = self.mlp.forward(&x, 1);
        Ok(out
            .chunks(self.action_dim)
            .map(|c| c.iter().map(|v| v.tanh()).collect())
            .collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_mlp(&self.mlp, dir)?;
        let d = InitNetDescriptor {
            schema: INITNET_SCHEMA.into(),
            sizes: self.mlp.sizes(),
            latent_dim: self.latent_dim,
            action_dim: self.action_dim,
            horizon: self.horizon,
        };
        fs::write(dir.join("initnet.json"), serde_json::to_string_pretty(&d)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let d: InitNetDescriptor = serde_json::from_str(&fs::read_to_string(dir.join("initnet.json"))?)?;
        if d.schema != INITNET_SCHEMA {
            return Err(Error::Format {
                path: dir.display().to_string(),
                reason: format!("unknown schema {}", d.schema),
            });
        }
        Ok(InitNet {
            mlp: load_mlp(dir, &d.sizes)?,
            latent_dim: d.latent_dim,
            action_dim: d.action_dim,
            horizon: d.horizon,
        })
    }
}

/// Every `(trajectory, offset)` with `H` actions available after `offset`.
fn windows(data: &LatentDataset, h: usize) -> Vec<(usize, usize)> {
    data.trajectories
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..(t.len() + 1).saturating_sub(h)).map(move |o| (i, o)))
        .collect()
}

/// Minibatch Adam regression from `(z_1, z_{H+1})` to the expert actions
/// `u_1..u_H` of every window in the dataset.
pub fn train_initnet(data: &LatentDataset, cfg: &InitNetConfig) -> Result<(InitNet, InitNetTrace)> {
    let h = cfg.horizon;
    if h == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("initnet needs horizon, batch_size >= 1 and lr > 0".into()));
    }
    let wins = windows(data, h);
    if wins.is_empty() {
        return Err(Error::DatasetTooShort {
            needed: h + 1,
            longest: data.trajectories.iter().map(|t| t.latents.len()).max().unwrap_or(0),
        });
    }
    let dz = data.latent_dim().unwrap_or(0);
    let da = data.action_dim().unwrap_or(0);
    let mut net = InitNet::new(dz, da, h, &cfg.hidden, cfg.seed)?;
    let mut adam = Adam::new(&net.mlp.params(), cfg.lr);
    let mut shuffle = rng::stream(cfg.seed, "initnet-shuffle");
    let mut trace = InitNetTrace::default();
    for _ in 0..cfg.epochs {
        let mut order = wins.clone();
        order.shuffle(&mut shuffle);
        for batch in order.chunks(cfg.batch_size) {
            let b = batch.len();
            let (mut z1, mut zg, mut y) = (Vec::new(), Vec::new(), Vec::new());
            for &(i, o) in batch {
                let t = &data.trajectories[i];
                z1.extend_from_slice(&t.latents[o]);
                zg.extend_from_slice(&t.latents[o + h]);
                for a in &t.actions[o..o + h] {
                    y.extend_from_slice(a);
                }
            }
            let tape = Tape::new();
            let params = net.mlp.bind(&tape, true);
            let x = join(
                &tape.constant(Tensor::from_parts(vec![b, dz], z1)),
                &tape.constant(Tensor::from_parts(vec![b, dz], zg)),
            )?;
            let pred = Mlp::forward_on(&params, &x)?.tanh();
            let target = tape.constant(Tensor::from_parts(vec![b, h * da], y));
            let loss = pred.dist_sq(&target)?.scale(1.0 / b as f64);
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch: 0,
                    batch: trace.batch_losses.len(),
                    loss: value,
                });
            }
            let grads = grad(&loss, &params)?;
            drop(tape);
            let mut p = net.mlp.params();
            adam.step(&mut p, &grads)?;
            net.mlp.set_params(p)?;
            trace.batch_losses.push(value);
        }
    }
    Ok((net, trace))
}
