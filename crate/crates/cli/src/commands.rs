use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use wmplanlab::encoder::Encoder;
use wmplanlab::envs::{generate_dataset, load_dataset, save_dataset, EnvSpec, RawDataset};
use wmplanlab::evalreport::{
    emit_report, evaluate, json_hash, landscape, task_set, train_test_gap, EvalConfig, EvalMode, GapConfig,
    LandscapeConfig, NamedModel, NamedPlanner, Report,
};
use wmplanlab::finetune::{adversarial_wm, online_wm};
use wmplanlab::initnet::{train_initnet, InitNet, InitNetConfig};
use wmplanlab::planners::{PlanInit, Planner};
use wmplanlab::rng::derive_seed;
use wmplanlab::worldmodel::{train_teacher_forcing, LatentDataset, TrainConfig, WorldModel};

use crate::config::RunConfig;
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    FinetuneOnline,
    FinetuneAdv,
    TrainInitnet,
    Eval,
    Gap,
    Landscape,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::FinetuneOnline => "finetune-online",
            Command::FinetuneAdv => "finetune-adv",
            Command::TrainInitnet => "train-initnet",
            Command::Eval => "eval",
            Command::Gap => "gap",
            Command::Landscape => "landscape",
        }
    }
}

/// Command-line switches that are not part of the config file.
#[derive(Clone, Debug, Default)]
pub struct Options {
    /// Replace a non-empty dataset directory.
    pub force: bool,
    /// Evaluation worker threads; `None` uses every available core.
    pub workers: Option<usize>,
    pub planners: Option<Vec<String>>,
    pub models: Option<Vec<String>>,
    pub mode: Option<EvalMode>,
}

#[derive(Clone, Debug)]
pub struct Outcome {
    /// Directory the command wrote to.
    pub output: PathBuf,
    pub config_hash: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config_hash: &'a str,
    config: &'a RunConfig,
}

fn write_manifest(dir: &Path, cmd: Command, cfg: &RunConfig, hash: &str) -> Result<(), CliError> {
    let m = Manifest {
        command: cmd.name(),
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config_hash: hash,
        config: cfg,
    };
    fs::create_dir_all(dir)?;
    fs::write(dir.join("run_manifest.json"), serde_json::to_string_pretty(&m).map_err(wmplanlab::Error::from)?)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(value).map_err(wmplanlab::Error::from)?)?;
    Ok(())
}

/// SHA-256 over the relative paths and contents of every file under `dir`,
/// visited in sorted order.
pub fn dir_hash(dir: &Path) -> std::io::Result<String> {
    fn visit(root: &Path, dir: &Path, h: &mut Sha256) -> std::io::Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                visit(root, &p, h)?;
            } else {
                let rel = p.strip_prefix(root).expect("entries live under the root");
                h.update(rel.to_string_lossy().as_bytes());
                h.update([0]);
                h.update(fs::read(&p)?);
            }
        }
        Ok(())
    }
    let mut h = Sha256::new();
    visit(dir, dir, &mut h)?;
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    spec: EnvSpec,
    hash: String,
}

impl Ctx<'_> {
    fn seed(&self, name: &str) -> u64 {
        derive_seed(self.cfg.seed, name, 0)
    }

    fn encoder(&self) -> Result<Encoder, CliError> {
        Ok(self.cfg.encoder.build(self.spec.obs_dim(), self.seed("encoder"))?)
    }

    fn dataset(&self) -> Result<RawDataset, CliError> {
        let dir = self.cfg.data_dir();
        if !dir.join("manifest.json").exists() {
            return Err(CliError::Config(format!(
                "missing dataset {} (run gen-data first)",
                dir.display()
            )));
        }
        let raw = load_dataset(&dir)?;
        if raw.spec.kind != self.spec.kind {
            return Err(CliError::Config(format!(
                "dataset {} was generated for {:?}, config says {:?}",
                dir.display(),
                raw.spec.kind,
                self.spec.kind
            )));
        }
        Ok(raw)
    }

    fn model(&self, name: &str, enc: &Encoder) -> Result<WorldModel, CliError> {
        let dir = self.cfg.model_dir(name);
        if !dir.join("model.json").exists() {
            return Err(CliError::Config(format!("missing checkpoint {name:?} at {}", dir.display())));
        }
        let (m, d) = WorldModel::load(&dir)?;
        if d.encoder_hash.as_deref() != Some(enc.hash().as_str()) {
            return Err(CliError::Config(format!(
                "checkpoint {name:?} was trained with a different encoder than the config describes"
            )));
        }
        Ok(m)
    }

    fn save_model(&self, name: &str, m: &WorldModel, enc: &Encoder, trace: serde_json::Value) -> Result<PathBuf, CliError> {
        let dir = self.cfg.model_dir(name);
        fs::create_dir_all(&dir)?;
        let training = serde_json::json!({ "command": name, "config_hash": self.hash });
        m.save(&dir, Some(enc.hash()), training)?;
        write_json(&dir.join("trace.json"), &trace)?;
        Ok(dir)
    }
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("in-memory serialization cannot fail")
}

fn missing_section(name: &str) -> CliError {
    CliError::Config(format!("config has no [{name}] section"))
}

/// Runs one command end to end and writes its artifacts.
pub fn run(cmd: Command, cfg: &RunConfig, opts: &Options) -> Result<Outcome, CliError> {
    cfg.validate()?;
    let ctx = Ctx {
        cfg,
        spec: EnvSpec::from_kind(cfg.env),
        hash: json_hash(cfg),
    };
    let output = match cmd {
        Command::GenData => gen_data(&ctx, opts)?,
        Command::Train => train(&ctx)?,
        Command::FinetuneAdv => finetune_adv(&ctx)?,
        Command::FinetuneOnline => finetune_online(&ctx)?,
        Command::TrainInitnet => train_initnet_cmd(&ctx)?,
        Command::Eval => eval(&ctx, opts)?,
        Command::Gap => gap(&ctx, opts)?,
        Command::Landscape => landscape_cmd(&ctx)?,
    };
    write_manifest(&output, cmd, cfg, &ctx.hash)?;
    Ok(Outcome {
        output,
        config_hash: ctx.hash,
    })
}

fn gen_data(ctx: &Ctx<'_>, opts: &Options) -> Result<PathBuf, CliError> {
    let dir = ctx.cfg.data_dir();
    if dir.exists() && fs::read_dir(&dir)?.next().is_some() {
        if !opts.force {
            return Err(CliError::Config(format!(
                "dataset directory {} is not empty (use --force to replace it)",
                dir.display()
            )));
        }
        fs::remove_dir_all(&dir)?;
    }
    let d = &ctx.cfg.data;
    let raw = generate_dataset(&ctx.spec, d.n_traj, d.traj_len, d.policy, ctx.seed("data"))?;
    save_dataset(&raw, &dir)?;
    log::info!("wrote {} trajectories to {}", raw.trajectories.len(), dir.display());
    Ok(dir)
}

fn train(ctx: &Ctx<'_>) -> Result<PathBuf, CliError> {
    let raw = ctx.dataset()?;
    let enc = ctx.encoder()?;
    enc.save(&ctx.cfg.encoder_dir())?;
    let data = LatentDataset::from_raw(&raw, &enc)?;
    let m = &ctx.cfg.model;
    let init = WorldModel::new(
        enc.latent_dim(),
        ctx.spec.action_dim(),
        &m.hidden,
        m.residual,
        ctx.seed("model-init"),
    )?;
    let tc = TrainConfig {
        epochs: m.epochs,
        batch_size: m.batch_size,
        lr: m.lr,
        seed: ctx.seed("train"),
    };
    let (model, trace) = train_teacher_forcing(&init, &data, &tc)?;
    log::info!("teacher forcing done; final epoch loss {:?}", trace.epoch_losses.last());
    ctx.save_model("baseline", &model, &enc, to_value(&trace))
}

fn finetune_adv(ctx: &Ctx<'_>) -> Result<PathBuf, CliError> {
    let a = ctx.cfg.adversarial.as_ref().ok_or_else(|| missing_section("adversarial"))?;
    let raw = ctx.dataset()?;
    let enc = ctx.encoder()?;
    let base = ctx.model("baseline", &enc)?;
    let data = LatentDataset::from_raw(&raw, &enc)?;
    let tc = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: ctx.seed("finetune-adv"),
    };
    let (model, trace) = adversarial_wm(&base, &data, &a.perturbation, &tc)?;
    ctx.save_model("awm", &model, &enc, to_value(&trace))
}

fn finetune_online(ctx: &Ctx<'_>) -> Result<PathBuf, CliError> {
    let o = ctx.cfg.online.as_ref().ok_or_else(|| missing_section("online"))?;
    let raw = ctx.dataset()?;
    let enc = ctx.encoder()?;
    let base = ctx.model("baseline", &enc)?;
    let data = LatentDataset::from_raw(&raw, &enc)?;
    let (model, corrected, trace) = online_wm(&base, &ctx.spec, &enc, &data, o, ctx.seed("finetune-online"))?;
    let value = serde_json::json!({
        "trace": trace,
        "corrected_trajectories": corrected.trajectories.len(),
        "corrected_transitions": corrected.transition_count(),
    });
    ctx.save_model("owm", &model, &enc, value)
}

fn train_initnet_cmd(ctx: &Ctx<'_>) -> Result<PathBuf, CliError> {
    let s = ctx.cfg.initnet.as_ref().ok_or_else(|| missing_section("initnet"))?;
    let raw = ctx.dataset()?;
    let enc = ctx.encoder()?;
    let data = LatentDataset::from_raw(&raw, &enc)?;
    let ic = InitNetConfig {
        horizon: s.horizon,
        hidden: s.hidden.clone(),
        epochs: s.epochs,
        batch_size: s.batch_size,
        lr: s.lr,
        seed: ctx.seed("initnet"),
    };
    let (net, trace) = train_initnet(&data, &ic)?;
    let dir = ctx.cfg.initnet_dir();
    net.save(&dir)?;
    write_json(&dir.join("trace.json"), &trace)?;
    Ok(dir)
}

fn select_planners(cfg: &RunConfig, filter: Option<&[String]>) -> Result<Vec<NamedPlanner>, CliError> {
    let Some(names) = filter else {
        return Ok(cfg.planners.clone());
    };
    names
        .iter()
        .map(|n| {
            cfg.planners
                .iter()
                .find(|p| &p.name == n)
                .cloned()
                .ok_or_else(|| CliError::Config(format!("no planner named {n:?} in the config")))
        })
        .collect()
}

fn eval(ctx: &Ctx<'_>, opts: &Options) -> Result<PathBuf, CliError> {
    let e = ctx.cfg.eval.as_ref().ok_or_else(|| missing_section("eval"))?;
    let planners = select_planners(ctx.cfg, opts.planners.as_deref())?;
    if planners.is_empty() {
        return Err(CliError::Config("no planners to evaluate".into()));
    }
    let names = opts.models.clone().unwrap_or_else(|| e.models.clone());
    let raw = ctx.dataset()?;
    let enc = ctx.encoder()?;
    let models = names
        .iter()
        .map(|n| ctx.model(n, &enc))
        .collect::<Result<Vec<_>, _>>()?;
    let needs_initnet = planners
        .iter()
        .any(|p| matches!(&p.planner, Planner::Gbp(c) if c.init == PlanInit::InitNet));
    let initnet = if needs_initnet {
        let dir = ctx.cfg.initnet_dir();
        if !dir.join("initnet.json").exists() {
            return Err(CliError::Config(format!(
                "missing initialization network at {} (run train-initnet)",
                dir.display()
            )));
        }
        Some(InitNet::load(&dir)?)
    } else {
        None
    };
    let named: Vec<NamedModel<'_>> = names
        .iter()
        .zip(&models)
        .map(|(n, m)| NamedModel {
            name: n.clone(),
            model: m,
            initnet: initnet.as_ref(),
        })
        .collect();
    let mode = opts.mode.unwrap_or(e.mode);
    let ec = EvalConfig {
        n_tasks: e.n_tasks,
        horizon_gap: e.horizon_gap,
        mode,
        mpc: e.mpc.clone(),
        seed: ctx.seed("eval"),
        workers: opts.workers.unwrap_or(0),
    };
    let mut er = evaluate(&ctx.spec, &enc, &raw, &named, &planners, &ec)?;
    // The worker count changes nothing in the results; keep it out of the
    // report so that reruns on other machines compare equal.
    er.config.workers = 0;
    for c in &er.cells {
        log::info!("{} / {}: success {}/{}", c.model, c.planner, c.successes, c.n);
    }
    let mut report = Report::new("eval", ctx.cfg.seed, ctx.hash.clone());
    report.eval = Some(er);
    let dir = ctx.cfg.report_dir(&format!("eval-{}", mode.as_str()));
    emit_report(&report, &dir)?;
    Ok(dir)
}

fn gap(ctx: &Ctx<'_>, opts: &Options) -> Result<PathBuf, CliError> {
    let g = ctx.cfg.gap.as_ref().ok_or_else(|| missing_section("gap"))?;
    let names = opts.models.clone().unwrap_or_else(|| g.models.clone());
    let raw = ctx.dataset()?;
    let enc = ctx.encoder()?;
    let mut report = Report::new("gap", ctx.cfg.seed, ctx.hash.clone());
    let gc = GapConfig {
        rollouts: g.rollouts,
        plan: g.plan.clone(),
        seed: ctx.seed("gap"),
    };
    for n in &names {
        let m = ctx.model(n, &enc)?;
        let r = train_test_gap(&m, &ctx.spec, &enc, &raw, &gc)?;
        log::info!("{n}: expert {:.4e} planned {:.4e}", r.mean_expert, r.mean_planned);
        report.metrics.insert(format!("difference/{n}"), r.difference);
        report.gaps.insert(n.clone(), r);
    }
    let dir = ctx.cfg.report_dir("gap");
    emit_report(&report, &dir)?;
    Ok(dir)
}

fn landscape_cmd(ctx: &Ctx<'_>) -> Result<PathBuf, CliError> {
    let l = ctx.cfg.landscape.as_ref().ok_or_else(|| missing_section("landscape"))?;
    let raw = ctx.dataset()?;
    let enc = ctx.encoder()?;
    let base = ctx.model(&l.baseline, &enc)?;
    let adv = ctx.model(&l.adversarial, &enc)?;
    let lc = LandscapeConfig {
        resolution: l.resolution,
        range: l.range,
        plan: l.plan.clone(),
    };
    let (tasks, _) = task_set(&raw, l.tasks, l.plan.horizon, ctx.seed("landscape"))?;
    let mut report = Report::new("landscape", ctx.cfg.seed, ctx.hash.clone());
    for t in &tasks {
        report.landscapes.push(landscape(&base, &adv, &ctx.spec, &enc, t, &lc)?);
    }
    let smoother = report
        .landscapes
        .iter()
        .filter(|p| p.adversarial.total_variation <= p.baseline.total_variation)
        .count();
    report.metrics.insert(
        "adversarial_tv_le_baseline_fraction".into(),
        smoother as f64 / tasks.len().max(1) as f64,
    );
    let dir = ctx.cfg.report_dir("landscape");
    emit_report(&report, &dir)?;
    Ok(dir)
}
