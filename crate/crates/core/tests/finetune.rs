use rand::Rng as _;
use wmplanlab::diffcore::Tensor;
use wmplanlab::encoder::Encoder;
use wmplanlab::envs::{generate_dataset, EnvSpec, Policy};
use wmplanlab::evalreport::{train_test_gap, GapConfig};
use wmplanlab::finetune::{adversarial_wm, attack_perturb, online_wm, Attack, AttackInit, OnlineConfig, PerturbationConfig, Radii};
use wmplanlab::planners::PlanConfig;
use wmplanlab::rng::{stream, Rng};
use wmplanlab::worldmodel::{train_teacher_forcing, LatentDataset, Mlp, TrainConfig, WorldModel};

fn random_model(seed: u64, dz: usize, da: usize) -> WorldModel {
    let mut r = stream(seed, "model");
    WorldModel {
        mlp: Mlp::new(&[dz + da, 12, dz], &mut r, false).unwrap(),
        latent_dim: dz,
        action_dim: da,
        residual: r.random_bool(0.5),
    }
}

fn random(r: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(&[rows, cols], |_| r.random_range(-1.0..1.0))
}

fn loss(m: &WorldModel, z: &Tensor, a: &Tensor, zn: &Tensor) -> f64 {
    let rows = z.rows();
    m.predict_batch(z.data(), a.data(), rows)
        .iter()
        .zip(zn.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum()
}

fn shifted(t: &Tensor, d: &Tensor) -> Tensor {
    Tensor::from_fn(t.shape(), |i| t.data()[i] + d.data()[i])
}

#[test]
fn ten_thousand_attacks_stay_inside_the_box() {
    let mut r = stream(0, "ball");
    for call in 0..10_000u64 {
        let (dz, da) = (r.random_range(1..6), r.random_range(1..3));
        let m = random_model(call, dz, da);
        let rows = r.random_range(1..4);
        let (z, a, zn) = (random(&mut r, rows, dz), random(&mut r, rows, da), random(&mut r, rows, dz));
        let (ea, ez) = (r.random_range(0.0..0.5), r.random_range(0.0..0.5));
        let radii = Radii::uniform(ea, ez, da, dz, r.random_range(0.0..3.0));
        let attack = match call % 3 {
            0 => Attack::Fgsm,
            1 => Attack::Pgd { steps: 2 },
            _ => Attack::Pgd { steps: 3 },
        };
        let init = if call % 2 == 0 { AttackInit::Uniform } else { AttackInit::Zero };
        let (d_a, d_z) = attack_perturb(&m, &z, &a, &zn, &radii, attack, init, &mut r).unwrap();
        assert!(d_a.max_abs() <= ea, "call {call}: {} > {ea}", d_a.max_abs());
        assert!(d_z.max_abs() <= ez, "call {call}: {} > {ez}", d_z.max_abs());
    }
}

#[test]
fn one_step_pgd_from_zero_is_the_signed_gradient() {
    let mut r = stream(1, "fgsm");
    let h = 1e-6;
    for seed in 0..50 {
        let m = random_model(seed, 4, 2);
        let (z, a, zn) = (random(&mut r, 3, 4), random(&mut r, 3, 2), random(&mut r, 3, 4));
        let radii = Radii::uniform(0.1, 0.05, 2, 4, 1.0);
        let (d_a, d_z) = attack_perturb(&m, &z, &a, &zn, &radii, Attack::Pgd { steps: 1 }, AttackInit::Zero, &mut r).unwrap();
        let (fa, fz) = attack_perturb(&m, &z, &a, &zn, &radii, Attack::Fgsm, AttackInit::Zero, &mut r).unwrap();
        assert_eq!((&d_a, &d_z), (&fa, &fz));
        // Finite-difference signs as the oracle.
        for (is_action, input, delta, eps) in [(true, &a, &d_a, 0.1), (false, &z, &d_z, 0.05)] {
            for i in 0..input.len() {
                let bump = |s: f64| {
                    let mut t = input.clone();
                    t.data_mut()[i] += s;
                    if is_action { loss(&m, &z, &t, &zn) } else { loss(&m, &t, &a, &zn) }
                };
                let g = (bump(h) - bump(-h)) / (2.0 * h);
                if g.abs() > 1e-6 {
                    assert_eq!(delta.data()[i], eps * g.signum(), "seed {seed}, entry {i}");
                }
            }
        }
    }
}

#[test]
fn attacks_increase_the_loss_on_most_transitions() {
    let mut r = stream(2, "ascent");
    let m = random_model(2, 6, 2);
    let mut up = 0;
    for _ in 0..200 {
        let (z, a, zn) = (random(&mut r, 1, 6), random(&mut r, 1, 2), random(&mut r, 1, 6));
        let radii = Radii::uniform(0.05, 0.05, 2, 6, 1.25);
        let (d_a, d_z) = attack_perturb(&m, &z, &a, &zn, &radii, Attack::Fgsm, AttackInit::Uniform, &mut r).unwrap();
        if loss(&m, &shifted(&z, &d_z), &shifted(&a, &d_a), &zn) >= loss(&m, &z, &a, &zn) {
            up += 1;
        }
    }
    assert!(up >= 180, "{up}/200");
}

#[test]
fn adversarial_training_keeps_targets_clean() {
    let enc = Encoder::identity(2);
    let raw = generate_dataset(&EnvSpec::wall2d(), 6, 11, Policy::default(), 1).unwrap();
    let data = LatentDataset::from_raw(&raw, &enc).unwrap();
    let before = data.clone();
    let m = WorldModel::new(2, 2, &[8], true, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        lr: 1e-3,
        seed: 0,
    };
    let (_, trace) = adversarial_wm(&m, &data, &PerturbationConfig::default(), &cfg).unwrap();
    assert_eq!(data, before);
    assert!(trace.radii.iter().all(|&(a, z)| a > 0.0 && z > 0.0));
}

#[test]
fn online_finetuning_shrinks_the_error_on_planned_actions() {
    let spec = EnvSpec::wall2d();
    let enc = Encoder::random_fourier(2, 16, 4.0, 0).unwrap();
    let raw = generate_dataset(&spec, 300, 31, Policy::default(), 0).unwrap();
    let held = generate_dataset(&spec, 100, 31, Policy::default(), 1).unwrap();
    let data = LatentDataset::from_raw(&raw, &enc).unwrap();
    let init = WorldModel::new(32, 2, &[64, 64], true, 0).unwrap();
    let tcfg = TrainConfig {
        epochs: 5,
        batch_size: 64,
        lr: 1e-3,
        seed: 0,
    };
    let (base, _) = train_teacher_forcing(&init, &data, &tcfg).unwrap();
    let h = 10;
    let ocfg = OnlineConfig {
        iterations: 30,
        plan: PlanConfig {
            iterations: 100,
            ..PlanConfig::adam(h)
        },
        steps_per_iteration: 20,
        batch_size: 32,
        ..OnlineConfig::new(h)
    };
    let (tuned, _, _) = online_wm(&base, &spec, &enc, &data, &ocfg, 2).unwrap();
    let gcfg = GapConfig {
        rollouts: 50,
        plan: PlanConfig {
            iterations: 100,
            ..PlanConfig::adam(h)
        },
        seed: 3,
    };
    let before = train_test_gap(&base, &spec, &enc, &held, &gcfg).unwrap().mean_planned;
    let after = train_test_gap(&tuned, &spec, &enc, &held, &gcfg).unwrap().mean_planned;
    assert!(after <= 0.8 * before, "planned-action error {before:.3e} -> {after:.3e}");
}
