//! Frozen observation featurizer.
//!
//! The random-Fourier kind lifts a low-dimensional observation `o` to
//! `sqrt(2/d_f) [sin(Wo + b); cos(Wo + b)]`, a fixed nonlinear feature space in
//! which world models are learned. The identity kind passes `o` through.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Identity,
    RandomFourier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderDescriptor {
    pub kind: EncoderKind,
    pub obs_dim: usize,
    pub features: usize,
    pub latent_dim: usize,
    pub sigma: f64,
    pub seed: u64,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    kind: EncoderKind,
    obs_dim: usize,
    sigma: f64,
    seed: u64,
    /// `[d_f, d_o]`
    w: Tensor,
    /// `[d_f]`
    b: Tensor,
}

impl Encoder {
    pub fn identity(obs_dim: usize) -> Self {
        Encoder {
            kind: EncoderKind::Identity,
            obs_dim,
            sigma: 0.0,
            seed: 0,
            w: Tensor::zeros(&[0, obs_dim]),
            b: Tensor::zeros(&[0]),
        }
    }

    /// `features` frequency rows drawn from `Normal(0, sigma^2)`, phases from
    /// `Uniform[0, 2pi)`. Latent dimension is `2 * features`.
    pub fn random_fourier(obs_dim: usize, features: usize, sigma: f64, seed: u64) -> Result<Self> {
        if features == 0 || !(sigma > 0.0) {
            return Err(Error::Config("random-fourier encoder needs features > 0 and sigma > 0".into()));
        }
        let mut r = rng::stream(seed, "encoder");
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
        let w = Tensor::from_fn(&[features, obs_dim], |_| normal.sample(&mut r));
        let b = Tensor::from_fn(&[features], |_| r.random_range(0.0..std::f64::consts::TAU));
        Ok(Encoder {
            kind: EncoderKind::RandomFourier,
            obs_dim,
            sigma,
            seed,
            w,
            b,
        })
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn features(&self) -> usize {
        self.b.len()
    }

    pub fn latent_dim(&self) -> usize {
        match self.kind {
            EncoderKind::Identity => self.obs_dim,
            EncoderKind::RandomFourier => 2 * self.features(),
        }
    }

    /// Output scale `sqrt(2 / d_f)` (1 for identity).
    pub fn scale(&self) -> f64 {
        match self.kind {
            EncoderKind::Identity => 1.0,
            EncoderKind::RandomFourier => (2.0 / self.features() as f64).sqrt(),
        }
    }

    pub fn encode(&self, o: &[f64]) -> Result<Vec<f64>> {
        if o.len() != self.obs_dim {
            return Err(Error::shape("encode", &[self.obs_dim], &[o.len()]));
        }
        if let Some(x) = o.iter().find(|x| !x.is_finite()) {
            return Err(Error::InvalidTensor(format!("observation entry {x} is not finite")));
        }
        Ok(match self.kind {
            EncoderKind::Identity => o.to_vec(),
            EncoderKind::RandomFourier => {
                let d_f = self.features();
                let scale = self.scale();
                let proj: Vec<f64> = (0..d_f)
                    .map(|i| {
                        self.w.row_slice(i).iter().zip(o).map(|(w, x)| w * x).sum::<f64>()
                            + self.b.data()[i]
                    })
                    .collect();
                let mut z = Vec::with_capacity(2 * d_f);
                z.extend(proj.iter().map(|p| scale * p.sin()));
                z.extend(proj.iter().map(|p| scale * p.cos()));
                z
            }
        })
    }

    pub fn encode_all(&self, obs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        obs.iter().map(|o| self.encode(o)).collect()
    }

    /// SHA-256 over the frozen parameters and kind; recorded in checkpoints.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}:{}", self.kind, self.obs_dim).as_bytes());
        h.update(self.w.to_wmt1_bytes());
        h.update(self.b.to_wmt1_bytes());
        hex(&h.finalize())
    }

    pub fn descriptor(&self) -> EncoderDescriptor {
        EncoderDescriptor {
            kind: self.kind,
            obs_dim: self.obs_dim,
            features: self.features(),
            latent_dim: self.latent_dim(),
            sigma: self.sigma,
            seed: self.seed,
            hash: self.hash(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("encoder.json"), serde_json::to_string_pretty(&self.descriptor())?)?;
        fs::write(dir.join("W.bin"), self.w.to_wmt1_bytes())?;
        fs::write(dir.join("b.bin"), self.b.to_wmt1_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let d: EncoderDescriptor = serde_json::from_str(&fs::read_to_string(dir.join("encoder.json"))?)?;
        let w = Tensor::read_wmt1(fs::read(dir.join("W.bin"))?.as_slice())?;
        let b = Tensor::read_wmt1(fs::read(dir.join("b.bin"))?.as_slice())?;
        let enc = Encoder {
            kind: d.kind,
            obs_dim: d.obs_dim,
            sigma: d.sigma,
            seed: d.seed,
            w,
            b,
        };
        if enc.hash() != d.hash {
            return Err(Error::Format {
                path: dir.display().to_string(),
                reason: "encoder hash does not match its parameters".into(),
            });
        }
        Ok(enc)
    }
}

/// Squared l2 distance between two latents.
pub fn latent_distance(z1: &[f64], z2: &[f64]) -> Result<f64> {
    if z1.len() != z2.len() {
        return Err(Error::shape("latent_distance", &[z1.len()], &[z2.len()]));
    }
    Ok(z1.iter().zip(z2).map(|(a, b)| (a - b) * (a - b)).sum())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_passes_through() {
        let e = Encoder::identity(2);
        assert_eq!(e.encode(&[0.3, 0.7]).unwrap(), vec![0.3, 0.7]);
        assert!(e.encode(&[0.3]).is_err());
    }

    #[test]
    fn fourier_features_are_frozen_and_bounded() {
        let e = Encoder::random_fourier(2, 32, 4.0, 1).unwrap();
        assert_eq!(e.latent_dim(), 64);
        let o = [0.31, 0.62];
        assert_eq!(e.encode(&o).unwrap(), e.encode(&o).unwrap());
        let bound = 2f64.sqrt() * (e.features() as f64).sqrt() * e.scale();
        for i in 0..50 {
            let o = [i as f64 * 0.37 - 3.0, (i as f64).sin() * 10.0];
            let n = e.encode(&o).unwrap().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(n <= bound + 1e-12);
        }
        // sin^2 + cos^2 = 1 per feature, so the norm is exactly sqrt(2)
        let n2: f64 = e.encode(&o).unwrap().iter().map(|x| x * x).sum();
        assert!((n2 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn distances() {
        assert_eq!(latent_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
        assert_eq!(latent_distance(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        assert!(latent_distance(&[1.0], &[1.0, 2.0]).is_err());
        let a = [0.1, -0.4, 2.0];
        let b = [1.5, 0.25, -1.0];
        let mut oracle = 0.0;
        for i in 0..3 {
            oracle += (a[i] - b[i]) * (a[i] - b[i]);
        }
        assert_eq!(latent_distance(&a, &b).unwrap(), oracle);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let e = Encoder::random_fourier(4, 8, 4.0, 3).unwrap();
        e.save(dir.path()).unwrap();
        assert_eq!(Encoder::load(dir.path()).unwrap(), e);
    }
}
