//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero when a criterion fails that is not listed in `KNOWN_RED`.
//! Numeric arguments (`cargo test --test acceptance -- 1 4`) select criteria.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use wmplanlab::diffcore::{grad, Tape, Tensor};
use wmplanlab::encoder::Encoder;
use wmplanlab::envs::{generate_dataset, sample_task, EnvSpec, Policy};
use wmplanlab::evalreport::{read_report, EvalMode, Report, Timing};
use wmplanlab::finetune::{adversarial_wm, attack_perturb, Attack, AttackInit, PerturbationConfig, Radii};
use wmplanlab::planners::{cem, gbp, gradcem, mpc, CemConfig, GoalLoss, MpcConfig, PlanConfig, PlanResult, Planner, RefineConfig};
use wmplanlab::rng::{stream, Rng};
use wmplanlab::worldmodel::{train_teacher_forcing, LatentDataset, Mlp, TrainConfig, WorldModel};
use wmplanlab_cli::{dir_hash, load, run, Command, Options, RunConfig};

/// Criteria that fail at this scale for reasons documented in the README.
const KNOWN_RED: &[u32] = &[];

/// Overrides for the success-rate comparison. At the preset scale the baseline
/// already solves nearly every task, leaving no room for a 10-point gain.
const SUCCESS_SCALE: &[&str] = &["data.n_traj=500", "model.epochs=3"];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

type Check = Result<Verdict, String>;

fn random_model(seed: u64, dz: usize, da: usize, hidden: &[usize]) -> WorldModel {
    let mut r = stream(seed, "model");
    let mut sizes = vec![dz + da];
    sizes.extend_from_slice(hidden);
    sizes.push(dz);
    WorldModel {
        mlp: Mlp::new(&sizes, &mut r, false).unwrap(),
        latent_dim: dz,
        action_dim: da,
        residual: true,
    }
}

fn random(r: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(&[rows, cols], |_| r.random_range(-1.0..1.0))
}

fn c1_gradients() -> Check {
    let (dz, da, h, fd) = (16, 2, 5, 1e-5);
    let loss = GoalLoss::Final;
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let m = random_model(seed, dz, da, &[32, 32]);
        let mut r = stream(seed, "c1");
        let z1 = random(&mut r, 1, dz);
        let goal = random(&mut r, 1, dz);
        let actions = random(&mut r, 1, h * da);
        let tape = Tape::new();
        let bound = m.mlp.bind(&tape, false);
        let a = tape.var(actions.clone());
        let zs = WorldModel::rollout_on(&bound, m.residual, da, &tape.constant(z1.clone()), &a).map_err(|e| e.to_string())?;
        let l = loss.on_tape(&zs, &tape.constant(goal.clone())).map_err(|e| e.to_string())?;
        let g = grad(&l, &[a]).map_err(|e| e.to_string())?.remove(0);
        let eval = |x: &[f64]| {
            let rows: Vec<Vec<f64>> = x.chunks(da).map(|c| c.to_vec()).collect();
            loss.value(&m.rollout_model(z1.data(), &rows).unwrap(), goal.data()).unwrap()
        };
        for i in 0..actions.len() {
            let mut x = actions.data().to_vec();
            x[i] += fd;
            let up = eval(&x);
            x[i] -= 2.0 * fd;
            let down = eval(&x);
            let f = (up - down) / (2.0 * fd);
            let rel = (g.data()[i] - f).abs() / g.data()[i].abs().max(f.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(verdict(worst < 1e-4, format!("max relative error {worst:.2e} over 20 seeds")))
}

fn c2_oracles() -> Check {
    let (dz, da) = (6, 2);
    let mut worst_gbp = f64::MIN;
    for seed in 0..10u64 {
        let mut r = stream(seed, "c2");
        let mut b = DMatrix::from_fn(dz, da, |_, _| r.random_range(-0.1..0.1));
        for j in 0..da {
            b[(j, j)] += 0.5;
        }
        let z1 = DVector::from_fn(dz, |_, _| r.random_range(-1.0..1.0));
        let goal = DVector::from_fn(dz, |_, _| r.random_range(-0.3..0.3)) + &z1;
        let a_opt = (b.transpose() * &b).cholesky().unwrap().solve(&(b.transpose() * (&goal - &z1)));
        if a_opt.amax() >= 1.0 {
            return Err(format!("seed {seed}: optimum outside the action box"));
        }
        let opt = (&z1 + &b * &a_opt - &goal).norm_squared();
        let bt = Tensor::matrix(dz, da, (0..dz * da).map(|k| b[(k / da, k % da)]).collect()).map_err(|e| e.to_string())?;
        let m = WorldModel::linear(&bt).map_err(|e| e.to_string())?;
        let cfg = PlanConfig { seed, ..PlanConfig::sgd(1) };
        let res = gbp(&m, z1.as_slice(), goal.as_slice(), &cfg).map_err(|e| e.to_string())?;
        worst_gbp = worst_gbp.max(res.final_loss - opt);
    }

    let ident = WorldModel::linear(&Tensor::from_fn(&[2, 2], |i| if i % 3 == 0 { 1.0 } else { 0.0 })).map_err(|e| e.to_string())?;
    let mut worst_cem = 0.0f64;
    for seed in 0..10u64 {
        let mut r = stream(seed, "c2-cem");
        let z1 = [r.random_range(-0.5..0.5), r.random_range(-0.5..0.5)];
        let target = [r.random_range(-0.8..0.8), r.random_range(-0.8..0.8)];
        let goal = [z1[0] + target[0], z1[1] + target[1]];
        let cfg = CemConfig { seed, ..CemConfig::new(1) };
        let res = cem(&ident, &z1, &goal, &cfg).map_err(|e| e.to_string())?;
        let d = res.actions[0].iter().zip(&target).map(|(a, t)| (a - t).abs()).fold(0.0, f64::max);
        worst_cem = worst_cem.max(d);
    }
    Ok(verdict(
        worst_gbp < 1e-8 && worst_cem < 1e-2,
        format!("gbp excess loss {worst_gbp:.2e}, cem max action error {worst_cem:.2e}"),
    ))
}

fn c3_ball() -> Check {
    let mut r = stream(3, "c3");
    let mut excess = 0.0f64;
    for call in 0..10_000u64 {
        let (dz, da) = (r.random_range(1..8), r.random_range(1..4));
        let m = random_model(call, dz, da, &[12]);
        let rows = r.random_range(1..5);
        let (z, a, zn) = (random(&mut r, rows, dz), random(&mut r, rows, da), random(&mut r, rows, dz));
        let (ea, ez) = (r.random_range(0.0..0.5), r.random_range(0.0..0.5));
        let radii = Radii::uniform(ea, ez, da, dz, r.random_range(0.0..3.0));
        let attack = match call % 3 {
            0 => Attack::Fgsm,
            k => Attack::Pgd { steps: k as usize + 1 },
        };
        let init = if call % 2 == 0 { AttackInit::Uniform } else { AttackInit::Zero };
        let (d_a, d_z) = attack_perturb(&m, &z, &a, &zn, &radii, attack, init, &mut r).map_err(|e| e.to_string())?;
        excess = excess.max(d_a.max_abs() - ea).max(d_z.max_abs() - ez);
    }

    // One PGD step from zero with step size equal to the radius against the
    // sign of a finite-difference gradient.
    let mut mismatches = 0;
    let h = 1e-6;
    for seed in 0..50 {
        let m = random_model(seed, 4, 2, &[12]);
        let (z, a, zn) = (random(&mut r, 3, 4), random(&mut r, 3, 2), random(&mut r, 3, 4));
        let radii = Radii::uniform(0.1, 0.05, 2, 4, 1.0);
        let (d_a, d_z) = attack_perturb(&m, &z, &a, &zn, &radii, Attack::Pgd { steps: 1 }, AttackInit::Zero, &mut r)
            .map_err(|e| e.to_string())?;
        let loss = |z: &Tensor, a: &Tensor| -> f64 {
            m.predict_batch(z.data(), a.data(), 3).iter().zip(zn.data()).map(|(p, t)| (p - t) * (p - t)).sum()
        };
        for (is_action, input, delta, eps) in [(true, &a, &d_a, 0.1), (false, &z, &d_z, 0.05)] {
            for i in 0..input.len() {
                let bump = |s: f64| {
                    let mut t = input.clone();
                    t.data_mut()[i] += s;
                    if is_action { loss(&z, &t) } else { loss(&t, &a) }
                };
                let g = (bump(h) - bump(-h)) / (2.0 * h);
                if g.abs() > 1e-6 && delta.data()[i] != eps * g.signum() {
                    mismatches += 1;
                }
            }
        }
    }
    Ok(verdict(
        excess <= 0.0 && mismatches == 0,
        format!("max excess over radius {excess:.1e} in 10^4 calls, {mismatches} sign mismatches"),
    ))
}

fn same_plan(a: &PlanResult, b: &PlanResult) -> bool {
    let bits = |p: &PlanResult| -> Vec<u64> {
        p.actions.iter().flatten().chain(&p.loss_trace).chain([&p.final_loss]).map(|x| x.to_bits()).collect()
    };
    bits(a) == bits(b)
}

fn c4_reductions() -> Check {
    let enc = Encoder::random_fourier(2, 8, 4.0, 0).map_err(|e| e.to_string())?;
    let spec = EnvSpec::wall2d();
    let raw = generate_dataset(&spec, 16, 21, Policy::default(), 4).map_err(|e| e.to_string())?;
    let data = LatentDataset::from_raw(&raw, &enc).map_err(|e| e.to_string())?;
    let init = WorldModel::new(16, 2, &[32], true, 4).map_err(|e| e.to_string())?;
    let zero = PerturbationConfig {
        lambda_a: 0.0,
        lambda_z: 0.0,
        ..PerturbationConfig::default()
    };
    let mut tf_equal = true;
    for epochs in 1..=3 {
        let cfg = TrainConfig {
            epochs,
            batch_size: 16,
            lr: 1e-3,
            seed: 7,
        };
        let (tf, tt) = train_teacher_forcing(&init, &data, &cfg).map_err(|e| e.to_string())?;
        let (adv, at) = adversarial_wm(&init, &data, &zero, &cfg).map_err(|e| e.to_string())?;
        tf_equal &= tf == adv && tt == at.train;
    }

    let m = random_model(4, 16, 2, &[32]);
    let h = 8;
    let mut mpc_equal = true;
    for i in 0..5 {
        let task = sample_task(&raw, h, i).map_err(|e| e.to_string())?;
        let z1 = enc.encode(&task.start.pos).map_err(|e| e.to_string())?;
        let goal = enc.encode(&task.goal_obs).map_err(|e| e.to_string())?;
        let cfg = PlanConfig {
            iterations: 20,
            seed: i,
            ..PlanConfig::adam(h)
        };
        let open = gbp(&m, &z1, &goal, &cfg).map_err(|e| e.to_string())?;
        let single = MpcConfig {
            steps: 1,
            k_exec: Some(h),
            warm_start: false,
        };
        let out = mpc(&spec, &m, &enc, &task, &Planner::Gbp(cfg), &single, None).map_err(|e| e.to_string())?;
        mpc_equal &= out.executed == open.actions && out.plans.len() == 1;
    }

    let mut cem_equal = true;
    for seed in 0..5 {
        let mut r = stream(seed, "c4-cem");
        let z1: Vec<f64> = (0..16).map(|_| r.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..16).map(|_| r.random_range(-1.0..1.0)).collect();
        let c = CemConfig {
            population: 60,
            elites: 6,
            iterations: 6,
            seed,
            ..CemConfig::new(6)
        };
        let plain = cem(&m, &z1, &g, &c).map_err(|e| e.to_string())?;
        let refined = gradcem(&m, &z1, &g, &c, &RefineConfig { steps: 0, lr: 0.3 }).map_err(|e| e.to_string())?;
        cem_equal &= same_plan(&plain, &refined);
    }
    Ok(verdict(
        tf_equal && mpc_equal && cem_equal,
        format!("zero-radius training {tf_equal}, single-segment mpc {mpc_equal}, unrefined gradcem {cem_equal}"),
    ))
}

fn pipeline(out: &Path, preset: &str, extra: &[&str]) -> Result<RunConfig, String> {
    let mut sets = vec![format!("out_dir={}", out.display())];
    sets.extend(extra.iter().map(|s| s.to_string()));
    load(None, Some(preset), &sets, None).map_err(|e| e.to_string())
}

fn step(cmd: Command, cfg: &RunConfig, opts: &Options) -> Result<PathBuf, String> {
    run(cmd, cfg, opts).map(|o| o.output).map_err(|e| format!("{}: {e}", cmd.name()))
}

fn report_at(dir: &Path) -> Result<Report, String> {
    read_report(dir).map_err(|e| e.to_string())
}

fn train_pair(cfg: &RunConfig) -> Result<(), String> {
    let force = Options {
        force: true,
        ..Options::default()
    };
    step(Command::GenData, cfg, &force)?;
    step(Command::Train, cfg, &Options::default())?;
    step(Command::FinetuneAdv, cfg, &Options::default())?;
    Ok(())
}

/// Passes when the baseline is worse on planned actions and at least one of
/// the two finetuning methods narrows that gap.
fn c5_gap(cfg: &RunConfig, out: &Path) -> Check {
    let online = pipeline(out, "wall-owm", &[])?;
    step(Command::FinetuneOnline, &online, &Options::default())?;
    let opts = Options {
        models: Some(vec!["baseline".into(), "awm".into(), "owm".into()]),
        ..Options::default()
    };
    let r = report_at(&step(Command::Gap, cfg, &opts)?)?;
    let (base, awm, owm) = (&r.gaps["baseline"], &r.gaps["awm"], &r.gaps["owm"]);
    Ok(verdict(
        base.mean_planned > base.mean_expert && (awm.difference > base.difference || owm.difference > base.difference),
        format!(
            "baseline expert {:.3e} planned {:.3e}; expert - planned: baseline {:.3e}, adversarial {:.3e}, online {:.3e} over {} rollouts",
            base.mean_expert, base.mean_planned, base.difference, awm.difference, owm.difference, base.n
        ),
    ))
}

fn success_counts(cfg: &RunConfig, models: &[&str]) -> Result<Vec<(usize, usize)>, String> {
    let opts = Options {
        planners: Some(vec!["gbp-adam".into()]),
        models: Some(models.iter().map(|m| m.to_string()).collect()),
        mode: Some(EvalMode::Mpc),
        ..Options::default()
    };
    let r = report_at(&step(Command::Eval, cfg, &opts)?)?;
    let e = r.eval.ok_or("eval report without an evaluation")?;
    models
        .iter()
        .map(|m| e.cell(m, "gbp-adam").map(|c| (c.successes, c.n)).ok_or(format!("no cell for {m}")))
        .collect()
}

fn c6_success(out: &Path) -> Check {
    let cfg = pipeline(&out.join("adversarial"), "wall-awm", SUCCESS_SCALE)?;
    train_pair(&cfg)?;
    let counts = success_counts(&cfg, &["baseline", "awm"])?;
    let ((b, n), (a, _)) = (counts[0], counts[1]);

    // Control: the same finetuning budget with zero-radius perturbations,
    // which is plain continued teacher forcing.
    let mut extra: Vec<&str> = SUCCESS_SCALE.to_vec();
    extra.extend(["adversarial.perturbation.lambda_a=0.0", "adversarial.perturbation.lambda_z=0.0"]);
    let control = pipeline(&out.join("control"), "wall-awm", &extra)?;
    train_pair(&control)?;
    let (c, _) = success_counts(&control, &["awm"])?[0];

    let points = 100.0 * (a as f64 - b as f64) / n as f64;
    Ok(verdict(
        points >= 10.0,
        format!("baseline {b}/{n}, adversarial {a}/{n} ({points:+.0} points); continued teacher forcing control {c}/{n}"),
    ))
}

fn c7_wall_clock(cfg: &RunConfig) -> Check {
    let opts = Options {
        planners: Some(vec!["gbp-gd".into(), "cem".into()]),
        models: Some(vec!["baseline".into()]),
        mode: Some(EvalMode::OpenLoop),
        workers: Some(1),
        ..Options::default()
    };
    let mut small = cfg.clone();
    small.eval.as_mut().ok_or("preset has no eval section")?.n_tasks = 10;
    let dir = step(Command::Eval, &small, &opts)?;
    let t: Timing = serde_json::from_str(&fs::read_to_string(dir.join("timing.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let ratio = *t.cem_over_gbp.get("baseline").ok_or("no recorded ratio")?;
    Ok(verdict(ratio >= 3.0, format!("cem / gbp mean plan time {ratio:.2} over 10 tasks")))
}

fn c8_landscape(cfg: &RunConfig) -> Check {
    let r = report_at(&step(Command::Landscape, cfg, &Options::default())?)?;
    let l = cfg.landscape.as_ref().ok_or("preset has no landscape section")?;
    let shapes = r.landscapes.len() == l.tasks
        && r.landscapes.iter().all(|p| {
            let n = p.resolution;
            n == 50
                && p.range == [-1.25, 1.25]
                && p.coords.len() == n
                && [&p.baseline.values, &p.adversarial.values].iter().all(|v| v.len() == n && v.iter().all(|row| row.len() == n))
        });
    let smoother = r.landscapes.iter().filter(|p| p.adversarial.total_variation <= p.baseline.total_variation).count();
    let frac = smoother as f64 / r.landscapes.len().max(1) as f64;
    Ok(verdict(
        shapes && frac >= 0.7,
        format!("grids well formed {shapes}, adversarial at most as rough on {smoother}/{} tasks", r.landscapes.len()),
    ))
}

const TINY: &str = include_str!("fixtures/tiny.toml");

/// Every command's output directory hash and report bytes, in run order.
fn tiny_run(cfg: &RunConfig) -> Result<Vec<(String, String, Option<Vec<u8>>)>, String> {
    let force = Options {
        force: true,
        ..Options::default()
    };
    let mut out = Vec::new();
    for cmd in [
        Command::GenData,
        Command::Train,
        Command::FinetuneAdv,
        Command::FinetuneOnline,
        Command::TrainInitnet,
        Command::Eval,
        Command::Gap,
        Command::Landscape,
    ] {
        let dir = step(cmd, cfg, &force)?;
        let report = fs::read(dir.join("report.json")).ok();
        // These files carry wall-clock numbers and are set aside while hashing.
        let mut timed = Vec::new();
        for name in ["timing.json", "cells.csv"] {
            let path = dir.join(name);
            if let Ok(bytes) = fs::read(&path) {
                fs::remove_file(&path).map_err(|e| e.to_string())?;
                timed.push((path, bytes));
            }
        }
        let hash = dir_hash(&dir).map_err(|e| e.to_string())?;
        for (path, bytes) in timed {
            fs::write(path, bytes).map_err(|e| e.to_string())?;
        }
        out.push((cmd.name().to_string(), hash, report));
    }
    Ok(out)
}

fn c9_determinism(out: &Path) -> Check {
    fs::create_dir_all(out).map_err(|e| e.to_string())?;
    let path = out.join("tiny.toml");
    fs::write(&path, TINY).map_err(|e| e.to_string())?;
    let cfg = load(Some(&path), None, &[format!("out_dir={}", out.join("run").display())], None).map_err(|e| e.to_string())?;
    let first = tiny_run(&cfg)?;
    let second = tiny_run(&cfg)?;
    let differing: Vec<&str> = first.iter().zip(&second).filter(|(a, b)| a != b).map(|(a, _)| a.0.as_str()).collect();
    let reports = first.iter().filter(|r| r.2.is_some()).count();
    Ok(verdict(
        differing.is_empty() && reports == 3,
        if differing.is_empty() {
            format!("{} commands rerun, {reports} reports byte-identical", first.len())
        } else {
            format!("outputs differ for {}", differing.join(", "))
        },
    ))
}

fn main() {
    let picked: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| picked.is_empty() || picked.contains(&n);
    let scratch = tempfile::tempdir().expect("temporary directory");
    let mut unexpected = Vec::new();
    let mut record = |n: u32, name: &str, limit: Option<f64>, start: Instant, check: Check| {
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match check {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let in_time = limit.is_none_or(|l| secs < l);
        let pass = pass && in_time;
        let budget = limit.map(|l| format!(" / {l:.0}s")).unwrap_or_default();
        let status = if pass { "PASS" } else { "FAIL" };
        println!("criterion {n} {status} {name}: {detail} [{secs:.1}s{budget}]");
        if !pass && !KNOWN_RED.contains(&n) {
            unexpected.push(n);
        }
    };

    if wanted(1) {
        let t = Instant::now();
        record(1, "gradient correctness", Some(10.0), t, c1_gradients());
    }
    if wanted(2) {
        let t = Instant::now();
        record(2, "planner oracles", Some(30.0), t, c2_oracles());
    }
    if wanted(3) {
        let t = Instant::now();
        record(3, "perturbation ball", Some(60.0), t, c3_ball());
    }
    if wanted(4) {
        let t = Instant::now();
        record(4, "reduction identities", None, t, c4_reductions());
    }
    if [5, 7, 8].into_iter().any(wanted) {
        let t = Instant::now();
        let full_dir = scratch.path().join("full");
        let full = pipeline(&full_dir, "wall-awm", &[]);
        let trained = full.and_then(|cfg| train_pair(&cfg).map(|_| cfg));
        if wanted(5) {
            record(5, "train-test gap direction", Some(600.0), t, trained.clone().and_then(|cfg| c5_gap(&cfg, &full_dir)));
        }
        if wanted(7) {
            let t = Instant::now();
            record(7, "wall-clock ordering", None, t, trained.clone().and_then(|cfg| c7_wall_clock(&cfg)));
        }
        if wanted(8) {
            let t = Instant::now();
            record(8, "landscape smoothness", None, t, trained.and_then(|cfg| c8_landscape(&cfg)));
        }
    }
    if wanted(6) {
        let t = Instant::now();
        record(6, "success-rate direction", Some(1800.0), t, c6_success(&scratch.path().join("small")));
    }
    if wanted(9) {
        let t = Instant::now();
        record(9, "determinism", Some(300.0), t, c9_determinism(&scratch.path().join("tiny")));
    }

    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
