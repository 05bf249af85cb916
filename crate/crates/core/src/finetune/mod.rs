//! Robustness finetuning of a trained world model: adversarial perturbation
//! training on latents and actions, and online correction of planner-proposed
//! trajectories with the true simulator.

mod adversarial;
mod online;

pub use adversarial::{
    adversarial_wm, attack_perturb, compute_radii, AdversarialTrace, Attack, AttackInit, PerturbationConfig,
    RadiusMode, Radii,
};
pub use online::{correct_trajectory, online_wm, OnlineConfig, OnlineTrace};
