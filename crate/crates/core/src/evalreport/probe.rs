use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::error::{Error, Result};

const RIDGE: f64 = 1e-6;

/// Affine least-squares map from latents back to observations, for
/// inspecting predicted states. Not used by any planner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeDecoder {
    pub latent_dim: usize,
    pub obs_dim: usize,
    /// `[latent_dim + 1, obs_dim]`, bias in the last row.
    pub weights: Vec<f64>,
    pub rmse: f64,
    pub ridge: f64,
}

impl ProbeDecoder {
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.latent_dim {
            return Err(Error::shape("probe decode", &[self.latent_dim], &[z.len()]));
        }
        let d = self.obs_dim;
        let mut o = self.weights[self.latent_dim * d..].to_vec();
        for (i, zi) in z.iter().enumerate() {
            for (k, ok) in o.iter_mut().enumerate() {
                *ok += zi * self.weights[i * d + k];
            }
        }
        Ok(o)
    }

    /// CSV of decoded positions, one row per latent: `step,x0,x1,...`.
    pub fn decode_csv(&self, latents: &[Vec<f64>]) -> Result<String> {
        let mut out = String::from("step");
        for k in 0..self.obs_dim {
            out.push_str(&format!(",o{k}"));
        }
        out.push('\n');
        for (t, z) in latents.iter().enumerate() {
            out.push_str(&t.to_string());
            for v in self.decode(z)? {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        Ok(out)
    }
}

/// Fits the probe on `observations` encoded by `enc`. The normal equations are
/// solved by Cholesky; a rank-deficient Gram matrix gets a small ridge.
pub fn train_probe_decoder(enc: &Encoder, observations: &[Vec<f64>]) -> Result<ProbeDecoder> {
    if observations.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (dz, d_o) = (enc.latent_dim(), enc.obs_dim());
    let n = observations.len();
    let latents = enc.encode_all(observations)?;
    let x = DMatrix::from_fn(n, dz + 1, |r, c| if c < dz { latents[r][c] } else { 1.0 });
    let y = DMatrix::from_fn(n, d_o, |r, c| observations[r][c]);
    let gram = x.transpose() * &x;
    let rhs = x.transpose() * &y;
    let (w, ridge) = match gram.clone().cholesky() {
        Some(ch) if well_conditioned(&ch.l()) => (ch.solve(&rhs), 0.0),
        _ => {
            log::warn!("probe features are rank deficient; using ridge {RIDGE}");
            let reg = gram + DMatrix::identity(dz + 1, dz + 1) * RIDGE;
            let ch = reg
                .cholesky()
                .ok_or_else(|| Error::Contract("ridge-regularized probe system is not positive definite".into()))?;
            (ch.solve(&rhs), RIDGE)
        }
    };
    let resid = &x * &w - &y;
    let rmse = (resid.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let mut weights = Vec::with_capacity((dz + 1) * d_o);
    for r in 0..=dz {
        weights.extend((0..d_o).map(|k| w[(r, k)]));
    }
    Ok(ProbeDecoder {
        latent_dim: dz,
        obs_dim: d_o,
        weights,
        rmse,
        ridge,
    })
}

/// Rejects factorizations whose pivots collapse relative to the largest one.
fn well_conditioned(l: &DMatrix<f64>) -> bool {
    let diag: Vec<f64> = l.diagonal().iter().map(|v| v.abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    diag.iter().all(|&d| d > max * 1e-7)
}
