use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wmplanlab::encoder::{Encoder, EncoderKind};
use wmplanlab::envs::{EnvKind, Policy};
use wmplanlab::evalreport::{EvalMode, NamedPlanner};
use wmplanlab::finetune::{OnlineConfig, PerturbationConfig};
use wmplanlab::planners::{MpcConfig, PlanConfig};

use crate::CliError;

pub const PRESETS: &[(&str, &str)] = &[
    ("wall-baseline", include_str!("../presets/wall-baseline.toml")),
    ("pointmass-baseline", include_str!("../presets/pointmass-baseline.toml")),
    ("wall-awm", include_str!("../presets/wall-awm.toml")),
    ("wall-owm", include_str!("../presets/wall-owm.toml")),
    ("longhorizon", include_str!("../presets/longhorizon.toml")),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stream in a run derives from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub env: EnvKind,
    pub encoder: EncoderConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub adversarial: Option<AdversarialConfig>,
    #[serde(default)]
    pub online: Option<OnlineConfig>,
    #[serde(default)]
    pub initnet: Option<InitNetSection>,
    #[serde(default)]
    pub planners: Vec<NamedPlanner>,
    #[serde(default)]
    pub eval: Option<EvalSection>,
    #[serde(default)]
    pub gap: Option<GapSection>,
    #[serde(default)]
    pub landscape: Option<LandscapeSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Number of random frequencies; the latent has twice as many entries.
    #[serde(default)]
    pub features: usize,
    #[serde(default)]
    pub sigma: f64,
}

impl EncoderConfig {
    pub fn build(&self, obs_dim: usize, seed: u64) -> wmplanlab::Result<Encoder> {
        match self.kind {
            EncoderKind::Identity => Ok(Encoder::identity(obs_dim)),
            EncoderKind::RandomFourier => Encoder::random_fourier(obs_dim, self.features, self.sigma, seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_traj: usize,
    /// Observations per trajectory.
    pub traj_len: usize,
    pub policy: Policy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub residual: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdversarialConfig {
    pub perturbation: PerturbationConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitNetSection {
    pub horizon: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub n_tasks: usize,
    pub horizon_gap: usize,
    pub mode: EvalMode,
    pub mpc: MpcConfig,
    /// Checkpoint names under `models/`.
    pub models: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapSection {
    pub rollouts: usize,
    pub plan: PlanConfig,
    pub models: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeSection {
    pub tasks: usize,
    pub resolution: usize,
    pub range: [f64; 2],
    pub plan: PlanConfig,
    pub baseline: String,
    pub adversarial: String,
}

impl RunConfig {
    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn encoder_dir(&self) -> PathBuf {
        self.out_dir.join("encoder")
    }

    pub fn model_dir(&self, name: &str) -> PathBuf {
        self.out_dir.join("models").join(name)
    }

    pub fn initnet_dir(&self) -> PathBuf {
        self.out_dir.join("initnet")
    }

    pub fn report_dir(&self, name: &str) -> PathBuf {
        self.out_dir.join("reports").join(name)
    }

    /// Structural checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, why: &str| Err(CliError::Config(format!("{field}: {why}")));
        if self.encoder.kind == EncoderKind::RandomFourier {
            if self.encoder.features == 0 {
                return bad("encoder.features", "must be >= 1 for random-fourier");
            }
            if !(self.encoder.sigma > 0.0) {
                return bad("encoder.sigma", "must be > 0 for random-fourier");
            }
        }
        if self.data.n_traj == 0 {
            return bad("data.n_traj", "must be >= 1");
        }
        if self.data.traj_len < 2 {
            return bad("data.traj_len", "must be >= 2");
        }
        if self.model.hidden.contains(&0) {
            return bad("model.hidden", "layer sizes must be >= 1");
        }
        if self.model.batch_size == 0 || !(self.model.lr > 0.0) {
            return bad("model", "batch_size >= 1 and lr > 0 required");
        }
        let mut names: Vec<&str> = self.planners.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("planners", "names must be unique");
        }
        for (i, p) in self.planners.iter().enumerate() {
            if p.planner.horizon() == 0 {
                return bad(&format!("planners[{i}].planner.horizon"), "must be >= 1");
            }
        }
        if let Some(e) = &self.eval {
            if e.n_tasks == 0 {
                return bad("eval.n_tasks", "must be >= 1");
            }
            if e.horizon_gap >= self.data.traj_len {
                return bad("eval.horizon_gap", "must be shorter than data.traj_len");
            }
        }
        if let Some(l) = &self.landscape {
            if l.resolution == 0 || !(l.range[0] <= l.range[1]) {
                return bad("landscape", "resolution >= 1 and range[0] <= range[1] required");
            }
        }
        Ok(())
    }
}

pub fn preset(name: &str) -> Result<&'static str, CliError> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let known: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            CliError::Config(format!("unknown preset {name:?}; known presets: {}", known.join(", ")))
        })
}

/// Parses an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key was just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `key.path=value` to a parsed config table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key {key:?} is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?}: {p:?} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Loads a config from a file or a preset, applies overrides and the seed
/// override, and validates it.
pub fn load(
    path: Option<&Path>,
    preset_name: Option<&str>,
    overrides: &[String],
    seed_override: Option<u64>,
) -> Result<RunConfig, CliError> {
    let text = match (path, preset_name) {
        (Some(p), None) => std::fs::read_to_string(p)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?,
        (None, Some(n)) => preset(n)?.to_string(),
        (Some(_), Some(_)) => return Err(CliError::Config("give either --config or --preset, not both".into())),
        (None, None) => return Err(CliError::Config("a config file (--config) or --preset is required".into())),
    };
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    if let Some(s) = seed_override {
        table.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_parses_and_validates() {
        for (name, _) in PRESETS {
            let cfg = load(None, Some(name), &[], None).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(!cfg.planners.is_empty(), "{name}");
        }
    }

    #[test]
    fn overrides_reach_nested_fields_and_seed_wins() {
        let cfg = load(
            None,
            Some("wall-baseline"),
            &["data.n_traj=7".into(), "out_dir=somewhere".into(), "seed=3".into()],
            Some(11),
        )
        .unwrap();
        assert_eq!(cfg.data.n_traj, 7);
        assert_eq!(cfg.out_dir, PathBuf::from("somewhere"));
        assert_eq!(cfg.seed, 11);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = load(None, Some("wall-baseline"), &["model.epoch=3".into()], None).unwrap_err();
        assert!(matches!(err, CliError::Config(ref m) if m.contains("epoch")), "{err}");
        let err = load(None, Some("wall-baseline"), &["data.n_traj=0".into()], None).unwrap_err();
        assert!(matches!(err, CliError::Config(ref m) if m.contains("data.n_traj")), "{err}");
        assert!(load(None, Some("nope"), &[], None).is_err());
    }

    #[test]
    fn reference_wall_preset_has_1920_trajectories() {
        let cfg = load(None, Some("wall-baseline"), &[], None).unwrap();
        assert_eq!(cfg.data.n_traj, 1920);
        assert_eq!(cfg.env, EnvKind::Wall2d);
        let l = load(None, Some("wall-awm"), &[], None).unwrap().landscape.unwrap();
        assert_eq!((l.resolution, l.range), (50, [-1.25, 1.25]));
    }
}
