use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffcore::{grad, sign, Adam, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::worldmodel::{
    check_dims, epoch_batches, gather, supervised_step, LatentDataset, TrainConfig, TrainTrace, Trajectory,
    WorldModel,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Attack {
    /// One signed-gradient step.
    Fgsm,
    /// `steps` signed-gradient steps, each followed by the box projection.
    Pgd { steps: usize },
}

impl Attack {
    pub fn steps(self) -> usize {
        match self {
            Attack::Fgsm => 1,
            Attack::Pgd { steps } => steps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackInit {
    /// Uniform draw from the box.
    Uniform,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RadiusMode {
    /// Computed from the first minibatch and reused.
    Fixed,
    /// Recomputed for every minibatch.
    Adaptive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationConfig {
    pub lambda_a: f64,
    pub lambda_z: f64,
    pub attack: Attack,
    pub init: AttackInit,
    pub radius_mode: RadiusMode,
    /// Attack step as a multiple of the radius.
    pub step_scale: f64,
    /// Use one radius per coordinate instead of a scalar over all entries.
    pub per_dimension: bool,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            lambda_a: 0.2,
            lambda_z: 0.2,
            attack: Attack::Fgsm,
            init: AttackInit::Uniform,
            radius_mode: RadiusMode::Fixed,
            step_scale: 1.25,
            per_dimension: false,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_a >= 0.0) || !(self.lambda_z >= 0.0) || !(self.step_scale >= 0.0) || self.attack.steps() == 0
        {
            return Err(Error::Config(
                "perturbation needs lambda_a, lambda_z, step_scale >= 0 and at least one attack step".into(),
            ));
        }
        Ok(())
    }
}

/// Per-coordinate radii and step sizes (a scalar radius is repeated).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Radii {
    pub eps_a: Vec<f64>,
    pub eps_z: Vec<f64>,
    pub alpha_a: Vec<f64>,
    pub alpha_z: Vec<f64>,
}

impl Radii {
    pub fn uniform(eps_a: f64, eps_z: f64, da: usize, dz: usize, step_scale: f64) -> Self {
        Radii {
            eps_a: vec![eps_a; da],
            eps_z: vec![eps_z; dz],
            alpha_a: vec![step_scale * eps_a; da],
            alpha_z: vec![step_scale * eps_z; dz],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.eps_a.iter().chain(&self.eps_z).all(|&e| e == 0.0)
    }

    /// Mean radius over coordinates, for reporting.
    pub fn mean(&self) -> (f64, f64) {
        let m = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        (m(&self.eps_a), m(&self.eps_z))
    }
}

/// Population standard deviation of all entries.
fn std_all(rows: &[Vec<f64>]) -> f64 {
    let n = rows.iter().map(Vec::len).sum::<usize>();
    if n == 0 {
        return 0.0;
    }
    let mean = rows.iter().flatten().sum::<f64>() / n as f64;
    (rows.iter().flatten().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64).sqrt()
}

/// Population standard deviation of each coordinate over time.
fn std_per_dim(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows.first().map_or(0, Vec::len);
    let n = rows.len().max(1) as f64;
    (0..d)
        .map(|j| {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            (rows.iter().map(|r| (r[j] - mean) * (r[j] - mean)).sum::<f64>() / n).sqrt()
        })
        .collect()
}

/// `eps = lambda * mean_j std(sequence_j)` for actions and latents of the given
/// trajectories.
pub fn compute_radii(batch: &[&Trajectory], cfg: &PerturbationConfig) -> Result<Radii> {
    let first = batch.first().ok_or(Error::EmptyDataset)?;
    let (da, dz) = (first.actions.first().map_or(0, Vec::len), first.latents[0].len());
    let n = batch.len() as f64;
    let (eps_a, eps_z) = if cfg.per_dimension {
        let mut a = vec![0.0; da];
        let mut z = vec![0.0; dz];
        for t in batch {
            for (acc, s) in a.iter_mut().zip(std_per_dim(&t.actions)) {
                *acc += s / n;
            }
            for (acc, s) in z.iter_mut().zip(std_per_dim(&t.latents)) {
                *acc += s / n;
            }
        }
        (a, z)
    } else {
        let a = batch.iter().map(|t| std_all(&t.actions)).sum::<f64>() / n;
        let z = batch.iter().map(|t| std_all(&t.latents)).sum::<f64>() / n;
        (vec![a; da], vec![z; dz])
    };
    let eps_a: Vec<f64> = eps_a.into_iter().map(|e| cfg.lambda_a * e).collect();
    let eps_z: Vec<f64> = eps_z.into_iter().map(|e| cfg.lambda_z * e).collect();
    if eps_a.iter().chain(&eps_z).all(|&e| e == 0.0) && (cfg.lambda_a > 0.0 || cfg.lambda_z > 0.0) {
        log::warn!("perturbation radii are zero; the attack is a no-op");
    }
    Ok(Radii {
        alpha_a: eps_a.iter().map(|e| cfg.step_scale * e).collect(),
        alpha_z: eps_z.iter().map(|e| cfg.step_scale * e).collect(),
        eps_a,
        eps_z,
    })
}

fn init_delta(rows: usize, eps: &[f64], init: AttackInit, r: &mut Rng) -> Vec<f64> {
    let d = eps.len();
    (0..rows * d)
        .map(|i| {
            let e = eps[i % d];
            match init {
                AttackInit::Uniform if e > 0.0 => r.random_range(-e..=e),
                _ => 0.0,
            }
        })
        .collect()
}

/// Signed-gradient ascent on `||f(z + dz, a + da) - z_next||^2` inside the
/// l-infinity boxes given by `radii`. Rows are independent transitions.
/// Returns `(delta_a, delta_z)`.
pub fn attack_perturb(
    model: &WorldModel,
    z: &Tensor,
    a: &Tensor,
    z_next: &Tensor,
    radii: &Radii,
    attack: Attack,
    init: AttackInit,
    r: &mut Rng,
) -> Result<(Tensor, Tensor)> {
    let rows = z.rows();
    let (da, dz) = (model.action_dim, model.latent_dim);
    if z.shape() != [rows, dz] || a.shape() != [rows, da] || z_next.shape() != [rows, dz] {
        return Err(Error::shape("attack_perturb", &[rows, dz, da], &[z.len(), a.len(), z_next.len()]));
    }
    if radii.eps_a.len() != da || radii.eps_z.len() != dz {
        return Err(Error::shape("attack radii", &[da, dz], &[radii.eps_a.len(), radii.eps_z.len()]));
    }
    let mut delta_a = init_delta(rows, &radii.eps_a, init, r);
    let mut delta_z = init_delta(rows, &radii.eps_z, init, r);
    for _ in 0..attack.steps() {
        let tape = Tape::new();
        let params = model.mlp.bind(&tape, false);
        let dav = tape.var(Tensor::from_parts(vec![rows, da], delta_a.clone()));
        let dzv = tape.var(Tensor::from_parts(vec![rows, dz], delta_z.clone()));
        let zp = tape.constant(z.clone()).add(&dzv)?;
        let ap = tape.constant(a.clone()).add(&dav)?;
        let pred = WorldModel::predict_on(&params, model.residual, &zp, &ap)?;
        let loss = pred.dist_sq(&tape.constant(z_next.clone()))?;
        let g = grad(&loss, &[dav, dzv])?;
        ascend(&mut delta_a, g[0].data(), &radii.alpha_a, &radii.eps_a);
        ascend(&mut delta_z, g[1].data(), &radii.alpha_z, &radii.eps_z);
    }
    Ok((
        Tensor::from_parts(vec![rows, da], delta_a),
        Tensor::from_parts(vec![rows, dz], delta_z),
    ))
}

fn ascend(delta: &mut [f64], g: &[f64], alpha: &[f64], eps: &[f64]) {
    let d = eps.len();
    for (i, (x, gi)) in delta.iter_mut().zip(g).enumerate() {
        let e = eps[i % d];
        *x = (*x + alpha[i % d] * sign(*gi)).clamp(-e, e);
    }
}

fn add_into(base: &Tensor, delta: &Tensor) -> Tensor {
    let data = base.data().iter().zip(delta.data()).map(|(x, d)| x + d).collect();
    Tensor::from_parts(base.shape().to_vec(), data)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdversarialTrace {
    pub train: TrainTrace,
    /// Mean radii `(eps_a, eps_z)` of every minibatch.
    pub radii: Vec<(f64, f64)>,
}

/// Trains on perturbed inputs with clean next-state targets. Minibatches are
/// drawn exactly as in teacher forcing; attack noise uses its own stream, so
/// zero scaling factors reproduce teacher forcing step for step.
pub fn adversarial_wm(
    model: &WorldModel,
    data: &LatentDataset,
    pcfg: &PerturbationConfig,
    tcfg: &TrainConfig,
) -> Result<(WorldModel, AdversarialTrace)> {
    pcfg.validate()?;
    tcfg.validate()?;
    data.require_nonempty()?;
    check_dims(model, data)?;
    let mut model = model.clone();
    let mut adam = Adam::new(&model.mlp.params(), tcfg.lr);
    let mut shuffle = rng::stream(tcfg.seed, "teacher-forcing");
    let mut attack_rng = rng::stream(tcfg.seed, "attack");
    let transitions = data.transitions();
    let mut trace = AdversarialTrace::default();
    let mut fixed: Option<Radii> = None;
    for epoch in 0..tcfg.epochs {
        let batches = epoch_batches(&transitions, tcfg.batch_size, &mut shuffle);
        let mut total = 0.0;
        for (bi, idx) in batches.iter().enumerate() {
            let radii = match (&fixed, pcfg.radius_mode) {
                (Some(r), RadiusMode::Fixed) => r.clone(),
                _ => {
                    let mut src: Vec<usize> = idx.iter().map(|&(i, _)| i).collect();
                    src.sort_unstable();
                    src.dedup();
                    let trajs: Vec<&Trajectory> = src.iter().map(|&i| &data.trajectories[i]).collect();
                    let r = compute_radii(&trajs, pcfg)?;
                    fixed.get_or_insert_with(|| r.clone());
                    r
                }
            };
            trace.radii.push(radii.mean());
            let (z, a, y) = gather(data, idx);
            let (z, a) = if radii.is_zero() {
                (z, a)
            } else {
                let (da, dz) = attack_perturb(&model, &z, &a, &y, &radii, pcfg.attack, pcfg.init, &mut attack_rng)?;
                (add_into(&z, &dz), add_into(&a, &da))
            };
            let loss = supervised_step(&mut model, &mut adam, z, a, y).map_err(|e| match e {
                Error::NonFiniteOp { .. } => Error::Diverged {
                    epoch,
                    batch: bi,
                    loss: f64::NAN,
                },
                other => other,
            })?;
            total += loss;
            trace.train.steps += 1;
        }
        trace.train.epoch_losses.push(total / batches.len() as f64);
    }
    Ok((model, trace))
}
