//! Latent transition model `f(z, a)`, teacher-forcing training, multi-step
//! rollouts and the per-step model error along true simulator states.

mod bptt;
mod data;
mod mlp;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use data::{LatentDataset, Trajectory};
pub use mlp::Mlp;
pub(crate) use mlp::join;

use crate::diffcore::{grad, Adam, Tape, Tensor, Var};
use crate::encoder::{latent_distance, Encoder};
use crate::envs::{step, EnvSpec, EnvState};
use crate::error::{Error, Result};
use crate::rng;

pub const MODEL_SCHEMA: &str = "wmplanlab-model/1";

#[derive(Clone, Debug, PartialEq)]
pub struct WorldModel {
    pub mlp: Mlp,
    pub latent_dim: usize,
    pub action_dim: usize,
    /// When set the net predicts `z_{t+1} - z_t`.
    pub residual: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub schema: String,
    pub sizes: Vec<usize>,
    pub residual: bool,
    pub latent_dim: usize,
    pub action_dim: usize,
    pub param_count: usize,
    pub encoder_hash: Option<String>,
    pub training: serde_json::Value,
}

impl WorldModel {
    /// Residual models start with a zero output layer, so the untrained model is
    /// the identity map on `z`.
    pub fn new(
        latent_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        residual: bool,
        seed: u64,
    ) -> Result<Self> {
        let mut sizes = vec![latent_dim + action_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(latent_dim);
        let mut r = rng::stream(seed, "worldmodel-init");
        Ok(WorldModel {
            mlp: Mlp::new(&sizes, &mut r, residual)?,
            latent_dim,
            action_dim,
            residual,
        })
    }

    /// All-zero parameters.
    pub fn zeros(latent_dim: usize, action_dim: usize, hidden: &[usize], residual: bool) -> Self {
        let mut sizes = vec![latent_dim + action_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(latent_dim);
        WorldModel {
            mlp: Mlp::zeros(&sizes),
            latent_dim,
            action_dim,
            residual,
        }
    }

    /// `f(z, a) = z + B a` with `b: [d_z, d_a]`.
    pub fn linear(b: &Tensor) -> Result<Self> {
        if b.rank() != 2 {
            return Err(Error::shape("linear", &[0, 0], b.shape()));
        }
        let (dz, da) = (b.shape()[0], b.shape()[1]);
        let mut w = Tensor::zeros(&[dz + da, dz]);
        for j in 0..da {
            for i in 0..dz {
                w.data_mut()[(dz + j) * dz + i] = b.data()[i * da + j];
            }
        }
        Ok(WorldModel {
            mlp: Mlp {
                weights: vec![w],
                biases: vec![Tensor::zeros(&[dz])],
            },
            latent_dim: dz,
            action_dim: da,
            residual: true,
        })
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }

    fn check(&self, z: &[f64], a: &[f64]) -> Result<()> {
        if z.len() != self.latent_dim || a.len() != self.action_dim {
            return Err(Error::shape(
                "predict",
                &[self.latent_dim, self.action_dim],
                &[z.len(), a.len()],
            ));
        }
        Ok(())
    }

    pub fn predict(&self, z: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        self.check(z, a)?;
        Ok(self.predict_batch(z, a, 1))
    }

    /// Tape-free prediction for `rows` stacked `(z, a)` pairs.
    pub fn predict_batch(&self, z: &[f64], a: &[f64], rows: usize) -> Vec<f64> {
        let (dz, da) = (self.latent_dim, self.action_dim);
        let mut x = Vec::with_capacity(rows * (dz + da));
        for r in 0..rows {
            x.extend_from_slice(&z[r * dz..(r + 1) * dz]);
            x.extend_from_slice(&a[r * da..(r + 1) * da]);
        }
        let mut out = self.mlp.forward(&x, rows);
        if self.residual {
            for (o, zi) in out.iter_mut().zip(z) {
                *o += zi;
            }
        }
        out
    }

    /// Differentiable prediction for `z: [B, d_z]`, `a: [B, d_a]`.
    pub fn predict_on<'t>(bound: &[Var<'t>], residual: bool, z: &Var<'t>, a: &Var<'t>) -> Result<Var<'t>> {
        let out = Mlp::forward_on(bound, &join(z, a)?)?;
        if residual {
            out.add(z)
        } else {
            Ok(out)
        }
    }

    /// `z_2..z_{H+1}` from `z_1` by recursive prediction.
    pub fn rollout_model(&self, z1: &[f64], actions: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if actions.is_empty() {
            return Err(Error::Contract("rollout needs at least one action".into()));
        }
        let mut z = z1.to_vec();
        let mut out = Vec::with_capacity(actions.len());
        for (t, a) in actions.iter().enumerate() {
            self.check(&z, a)?;
            z = self.predict_batch(&z, a, 1);
            if z.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteStep { step: t + 1 });
            }
            out.push(z.clone());
        }
        Ok(out)
    }

    /// Batched tape-free rollout. `actions` is `[B, H * d_a]` row-major with the
    /// action of step `t` in columns `t*d_a..(t+1)*d_a`; `z1` is `[B, d_z]`.
    /// Returns the `H` predicted latent batches.
    pub fn rollout_batch(&self, z1: &[f64], actions: &[f64], rows: usize, horizon: usize) -> Vec<Vec<f64>> {
        let da = self.action_dim;
        let mut z = z1.to_vec();
        let mut out = Vec::with_capacity(horizon);
        let mut a = vec![0.0; rows * da];
        for t in 0..horizon {
            for r in 0..rows {
                let src = r * horizon * da + t * da;
                a[r * da..(r + 1) * da].copy_from_slice(&actions[src..src + da]);
            }
            z = self.predict_batch(&z, &a, rows);
            out.push(z.clone());
        }
        out
    }

    /// Differentiable rollout: `z1: [B, d_z]`, `actions: [B, H * d_a]`.
    pub fn rollout_on<'t>(
        bound: &[Var<'t>],
        residual: bool,
        action_dim: usize,
        z1: &Var<'t>,
        actions: &Var<'t>,
    ) -> Result<Vec<Var<'t>>> {
        let horizon = actions.shape().last().copied().unwrap_or(0) / action_dim;
        let mut z = *z1;
        let mut out = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let a = actions.slice(t * action_dim, (t + 1) * action_dim)?;
            z = Self::predict_on(bound, residual, &z, &a)?;
            out.push(z);
        }
        Ok(out)
    }

    pub fn descriptor(&self, encoder_hash: Option<String>, training: serde_json::Value) -> ModelDescriptor {
        ModelDescriptor {
            schema: MODEL_SCHEMA.into(),
            sizes: self.mlp.sizes(),
            residual: self.residual,
            latent_dim: self.latent_dim,
            action_dim: self.action_dim,
            param_count: self.param_count(),
            encoder_hash,
            training,
        }
    }

    pub fn save(&self, dir: &Path, encoder_hash: Option<String>, training: serde_json::Value) -> Result<()> {
        save_mlp(&self.mlp, dir)?;
        let d = self.descriptor(encoder_hash, training);
        fs::write(dir.join("model.json"), serde_json::to_string_pretty(&d)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, ModelDescriptor)> {
        let d: ModelDescriptor = serde_json::from_str(&fs::read_to_string(dir.join("model.json"))?)?;
        if d.schema != MODEL_SCHEMA {
            return Err(Error::Format {
                path: dir.display().to_string(),
                reason: format!("unknown schema {}", d.schema),
            });
        }
        let mlp = load_mlp(dir, &d.sizes)?;
        Ok((
            WorldModel {
                mlp,
                latent_dim: d.latent_dim,
                action_dim: d.action_dim,
                residual: d.residual,
            },
            d,
        ))
    }
}

pub(crate) fn save_mlp(mlp: &Mlp, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, p) in mlp.params().iter().enumerate() {
        fs::write(dir.join(format!("param_{i}.bin")), p.to_wmt1_bytes())?;
    }
    Ok(())
}

pub(crate) fn load_mlp(dir: &Path, sizes: &[usize]) -> Result<Mlp> {
    let mut mlp = Mlp::zeros(sizes);
    let params = (0..2 * (sizes.len() - 1))
        .map(|i| Tensor::read_wmt1(fs::read(dir.join(format!("param_{i}.bin")))?.as_slice()))
        .collect::<Result<Vec<_>>>()?;
    mlp.set_params(params)?;
    Ok(mlp)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("training needs batch_size >= 1 and lr > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Mean minibatch loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Shuffled minibatches of transition indices for one epoch.
pub(crate) fn epoch_batches(
    transitions: &[(usize, usize)],
    batch_size: usize,
    r: &mut rng::Rng,
) -> Vec<Vec<(usize, usize)>> {
    let mut order = transitions.to_vec();
    order.shuffle(r);
    order.chunks(batch_size).map(<[_]>::to_vec).collect()
}

/// Stacks `(z_t, a_t, z_{t+1})` for the given transitions.
pub(crate) fn gather(data: &LatentDataset, idx: &[(usize, usize)]) -> (Tensor, Tensor, Tensor) {
    let dz = data.latent_dim().unwrap_or(0);
    let da = data.action_dim().unwrap_or(0);
    let b = idx.len();
    let (mut z, mut a, mut y) = (
        Vec::with_capacity(b * dz),
        Vec::with_capacity(b * da),
        Vec::with_capacity(b * dz),
    );
    for &(i, t) in idx {
        let tr = &data.trajectories[i];
        z.extend_from_slice(&tr.latents[t]);
        a.extend_from_slice(&tr.actions[t]);
        y.extend_from_slice(&tr.latents[t + 1]);
    }
    (
        Tensor::from_parts(vec![b, dz], z),
        Tensor::from_parts(vec![b, da], a),
        Tensor::from_parts(vec![b, dz], y),
    )
}

/// One Adam step on the batch-mean squared prediction error.
pub(crate) fn supervised_step(
    model: &mut WorldModel,
    adam: &mut Adam,
    z: Tensor,
    a: Tensor,
    target: Tensor,
) -> Result<f64> {
    let b = z.rows() as f64;
    let tape = Tape::new();
    let params = model.mlp.bind(&tape, true);
    let zv = tape.constant(z);
    let av = tape.constant(a);
    let yv = tape.constant(target);
    let pred = WorldModel::predict_on(&params, model.residual, &zv, &av)?;
    let loss = pred.dist_sq(&yv)?.scale(1.0 / b);
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::NonFiniteOp { op: "loss" });
    }
    let grads = grad(&loss, &params)?;
    drop(tape);
    let mut current = model.mlp.params();
    adam.step(&mut current, &grads)?;
    model.mlp.set_params(current)?;
    Ok(value)
}

pub(crate) fn check_dims(model: &WorldModel, data: &LatentDataset) -> Result<()> {
    let (dz, da) = (data.latent_dim().unwrap_or(0), data.action_dim().unwrap_or(0));
    if dz != model.latent_dim || da != model.action_dim {
        return Err(Error::shape(
            "dataset vs model",
            &[model.latent_dim, model.action_dim],
            &[dz, da],
        ));
    }
    Ok(())
}

/// Teacher forcing: minimizes the mean one-step error over shuffled
/// transitions with Adam on the model parameters only.
pub fn train_teacher_forcing(
    model: &WorldModel,
    data: &LatentDataset,
    cfg: &TrainConfig,
) -> Result<(WorldModel, TrainTrace)> {
    cfg.validate()?;
    data.require_nonempty()?;
    check_dims(model, data)?;
    let mut model = model.clone();
    let mut adam = Adam::new(&model.mlp.params(), cfg.lr);
    let mut shuffle = rng::stream(cfg.seed, "teacher-forcing");
    let transitions = data.transitions();
    let mut trace = TrainTrace::default();
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(&transitions, cfg.batch_size, &mut shuffle);
        let mut total = 0.0;
        for (bi, idx) in batches.iter().enumerate() {
            let (z, a, y) = gather(data, idx);
            let loss = supervised_step(&mut model, &mut adam, z, a, y).map_err(|e| match e {
                Error::NonFiniteOp { .. } => Error::Diverged {
                    epoch,
                    batch: bi,
                    loss: f64::NAN,
                },
                other => other,
            })?;
            total += loss;
            trace.steps += 1;
        }
        let mean = total / batches.len() as f64;
        log::debug!("teacher forcing epoch {epoch}: loss {mean:.3e}");
        trace.epoch_losses.push(mean);
    }
    Ok((model, trace))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WmErrorSeries {
    pub errors: Vec<f64>,
    pub mean: f64,
}

impl WmErrorSeries {
    pub fn from_errors(errors: Vec<f64>) -> Self {
        let mean = if errors.is_empty() {
            0.0
        } else {
            errors.iter().sum::<f64>() / errors.len() as f64
        };
        WmErrorSeries { errors, mean }
    }
}

/// Per-step error `||f(Phi(s_t), u_t) - Phi(s_{t+1})||^2` along the true state
/// chain driven by the normalized actions `actions`.
pub fn wm_error(
    model: &WorldModel,
    enc: &Encoder,
    spec: &EnvSpec,
    s1: &EnvState,
    actions: &[Vec<f64>],
) -> Result<WmErrorSeries> {
    let mut s = *s1;
    let mut z = enc.encode(&spec.observe(&s))?;
    let mut errors = Vec::with_capacity(actions.len());
    for u in actions {
        let pred = model.predict(&z, u)?;
        s = step(spec, &s, spec.to_world(u));
        let next = enc.encode(&spec.observe(&s))?;
        errors.push(latent_distance(&pred, &next)?);
        z = next;
    }
    Ok(WmErrorSeries::from_errors(errors))
}
