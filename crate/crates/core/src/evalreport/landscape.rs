use serde::{Deserialize, Serialize};

use crate::encoder::Encoder;
use crate::envs::{EnvSpec, TaskInstance};
use crate::error::{Error, Result};
use crate::planners::{batch_costs, flatten, gbp, PlanConfig};
use crate::worldmodel::WorldModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeConfig {
    pub resolution: usize,
    pub range: [f64; 2],
    /// Planner producing the two anchors. Both runs share its seed, so both
    /// start from the same initial actions.
    pub plan: PlanConfig,
}

impl LandscapeConfig {
    /// 50 x 50 grid over `[-1.25, 1.25]`; anchors from 300 Adam steps at
    /// learning rate 1e-3, returning the last iterate.
    pub fn new(horizon: usize, seed: u64) -> Self {
        let mut plan = PlanConfig::adam(horizon);
        plan.lr = 1e-3;
        plan.iterations = 300;
        plan.best_iterate = false;
        plan.seed = seed;
        LandscapeConfig {
            resolution: 50,
            range: [-1.25, 1.25],
            plan,
        }
    }

    pub fn coords(&self) -> Vec<f64> {
        let r = self.resolution;
        let [lo, hi] = self.range;
        if r == 1 {
            return vec![(lo + hi) / 2.0];
        }
        (0..r).map(|i| lo + (hi - lo) * i as f64 / (r - 1) as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub model: String,
    /// `values[i][j]` is the goal loss at `a_gt + coords[i] * alpha + coords[j] * beta`.
    pub values: Vec<Vec<f64>>,
    pub total_variation: f64,
    pub loss_at_ground_truth: f64,
    pub loss_at_baseline_plan: f64,
    pub loss_at_adversarial_plan: f64,
}

/// Both models' grids over one shared set of action points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapePair {
    pub resolution: usize,
    pub range: [f64; 2],
    pub coords: Vec<f64>,
    pub ground_truth: Vec<f64>,
    /// Baseline GBP solution minus the ground truth.
    pub alpha: Vec<f64>,
    /// Adversarial-model GBP solution minus the ground truth.
    pub beta: Vec<f64>,
    /// Set when either direction has near-zero norm.
    pub degenerate: bool,
    pub baseline: LandscapeGrid,
    pub adversarial: LandscapeGrid,
}

/// Sum of absolute differences between horizontally and vertically adjacent
/// cells.
pub fn total_variation(values: &[Vec<f64>]) -> f64 {
    let mut tv = 0.0;
    for (i, row) in values.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if j + 1 < row.len() {
                tv += (row[j + 1] - v).abs();
            }
            if i + 1 < values.len() {
                tv += (values[i + 1][j] - v).abs();
            }
        }
    }
    tv
}

/// Plans with both models from the same fixed initialization, then evaluates
/// each model's goal loss on the plane through the expert actions spanned by
/// the two solutions' offsets from them.
pub fn landscape(
    baseline: &WorldModel,
    adversarial: &WorldModel,
    spec: &EnvSpec,
    enc: &Encoder,
    task: &TaskInstance,
    cfg: &LandscapeConfig,
) -> Result<LandscapePair> {
    cfg.plan.validate()?;
    let h = cfg.plan.horizon;
    if cfg.resolution == 0 || !(cfg.range[0] <= cfg.range[1]) {
        return Err(Error::Config("landscape needs resolution >= 1 and range[0] <= range[1]".into()));
    }
    if baseline.latent_dim != adversarial.latent_dim || baseline.action_dim != adversarial.action_dim {
        return Err(Error::Contract("landscape models must share latent and action dimensions".into()));
    }
    if task.expert_actions.len() != h {
        return Err(Error::Contract(format!(
            "task has {} expert actions but the planning horizon is {h}",
            task.expert_actions.len()
        )));
    }
    let z1 = enc.encode(&spec.observe(&task.start))?;
    let goal = enc.encode(&task.goal_obs)?;
    let gt = flatten(&task.expert_actions);
    let a_base = flatten(&gbp(baseline, &z1, &goal, &cfg.plan)?.actions);
    let a_adv = flatten(&gbp(adversarial, &z1, &goal, &cfg.plan)?.actions);
    let alpha: Vec<f64> = a_base.iter().zip(&gt).map(|(a, g)| a - g).collect();
    let beta: Vec<f64> = a_adv.iter().zip(&gt).map(|(a, g)| a - g).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let degenerate = norm(&alpha) < 1e-9 || norm(&beta) < 1e-9;
    if degenerate {
        log::warn!("landscape axis has near-zero norm; the grid is degenerate along it");
    }

    let coords = cfg.coords();
    let r = coords.len();
    let n = gt.len();
    let mut points = Vec::with_capacity((r * r + 3) * n);
    for &u in &coords {
        for &v in &coords {
            points.extend((0..n).map(|k| gt[k] + u * alpha[k] + v * beta[k]));
        }
    }
    points.extend_from_slice(&gt);
    points.extend_from_slice(&a_base);
    points.extend_from_slice(&a_adv);

    let grid = |model: &WorldModel, name: &str| -> Result<LandscapeGrid> {
        let costs: Vec<f64> = batch_costs(model, &z1, &goal, &points, r * r + 3, h, &cfg.plan.goal_loss)?
            .into_iter()
            .map(|c| if c.is_finite() { c } else { f64::MAX })
            .collect();
        let values: Vec<Vec<f64>> = costs[..r * r].chunks(r).map(|c| c.to_vec()).collect();
        Ok(LandscapeGrid {
            model: name.into(),
            total_variation: total_variation(&values),
            values,
            loss_at_ground_truth: costs[r * r],
            loss_at_baseline_plan: costs[r * r + 1],
            loss_at_adversarial_plan: costs[r * r + 2],
        })
    };
    Ok(LandscapePair {
        resolution: r,
        range: cfg.range,
        coords,
        baseline: grid(baseline, "baseline")?,
        adversarial: grid(adversarial, "adversarial")?,
        ground_truth: gt,
        alpha,
        beta,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{generate_dataset, sample_task, Policy};

    #[test]
    fn total_variation_hand_value() {
        let g = vec![vec![0.0, 1.0], vec![3.0, 1.0]];
        // horizontal 1 + 2, vertical 3 + 0
        assert_eq!(total_variation(&g), 6.0);
        assert_eq!(total_variation(&vec![vec![2.0; 4]; 4]), 0.0);
    }

    #[test]
    fn center_and_axis_points_match_anchors() {
        let spec = EnvSpec::wall2d();
        let enc = Encoder::random_fourier(2, 8, 4.0, 0).unwrap();
        let raw = generate_dataset(&spec, 3, 20, Policy::default(), 4).unwrap();
        let task = sample_task(&raw, 4, 1).unwrap();
        let base = WorldModel::new(16, 2, &[16], true, 3).unwrap();
        let adv = WorldModel::new(16, 2, &[16], true, 4).unwrap();
        let mut cfg = LandscapeConfig::new(4, 0);
        cfg.resolution = 9;
        cfg.range = [-1.0, 1.0];
        cfg.plan.iterations = 20;
        cfg.plan.lr = 0.1;
        let p = landscape(&base, &adv, &spec, &enc, &task, &cfg).unwrap();
        assert_eq!(p.coords[4], 0.0);
        assert_eq!(p.coords[8], 1.0);
        for g in [&p.baseline, &p.adversarial] {
            assert_eq!(g.values.len(), 9);
            assert!(g.values.iter().all(|r| r.len() == 9 && r.iter().all(|&v| v >= 0.0)));
            assert!((g.values[4][4] - g.loss_at_ground_truth).abs() < 1e-12);
            assert!((g.values[8][4] - g.loss_at_baseline_plan).abs() < 1e-12);
            assert!((g.values[4][8] - g.loss_at_adversarial_plan).abs() < 1e-12);
        }
        assert!(!p.degenerate);
    }

    #[test]
    fn identical_models_give_identical_grids_and_defaults_hold() {
        let spec = EnvSpec::wall2d();
        let enc = Encoder::random_fourier(2, 8, 4.0, 0).unwrap();
        let raw = generate_dataset(&spec, 3, 20, Policy::default(), 4).unwrap();
        let task = sample_task(&raw, 3, 2).unwrap();
        let m = WorldModel::new(16, 2, &[16], true, 3).unwrap();
        let mut cfg = LandscapeConfig::new(3, 0);
        assert_eq!(cfg.resolution, 50);
        assert_eq!(cfg.range, [-1.25, 1.25]);
        cfg.plan.iterations = 5;
        let p = landscape(&m, &m, &spec, &enc, &task, &cfg).unwrap();
        assert_eq!(p.alpha, p.beta);
        assert_eq!(p.baseline.values, p.adversarial.values);
        assert_eq!(p.baseline.values.len(), 50);
    }
}
