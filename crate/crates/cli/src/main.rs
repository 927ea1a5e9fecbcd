use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mimic_core::genref::{generate, GenOptions, RefTask};
use mimic_core::matching::{ascii_alignment, brute_force_matching, dp_optimal_matching, BRUTE_FORCE_LIMIT};
use mimic_core::motion_io::{load_motion, load_skeleton, motion_to_json, Dof, MotionSequence, Skeleton};
use mimic_core::rotmath::Vec3;
use mimic_core::pporl::config::{config_hash, ConfigError, RunConfig, TOOL_VERSION};
use mimic_core::pporl::eval::evaluate;
use mimic_core::pporl::{train, Checkpoint, TrainError};
use mimic_core::retarget::{project_sagittal, retarget_motion, JointMap, RetargetError};
use mimic_core::similarity::{descriptors_from_motion, similarity_matrix, Metric, SimWeights};
use mimic_core::simworld::RobotModel;

#[derive(Parser)]
#[command(name = "mimic", version, about = "Motion imitation toolkit for planar robots")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Retarget a motion onto another skeleton.
    Retarget(RetargetArgs),
    /// Train a policy from a run config.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Optimal matching between a reference and a trajectory.
    Match(MatchArgs),
    /// Generate a scripted reference motion.
    Genref(GenrefArgs),
}

#[derive(Args)]
struct RetargetArgs {
    #[arg(long)]
    motion: PathBuf,
    #[arg(long)]
    map: PathBuf,
    /// Skeleton JSON, robot model JSON or built-in robot name.
    #[arg(long)]
    target_skel: String,
    #[arg(long)]
    out: PathBuf,
    /// Reduce the result to the sagittal plane.
    #[arg(long)]
    planar: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    /// Reward preset: full, gailfo, state_err, pure_rl, safety.
    #[arg(long)]
    preset: Option<String>,
    /// Training preset: desk, full_scale.
    #[arg(long)]
    ppo_preset: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    /// plane, rand, pyramid, wave or all; repeatable.
    #[arg(long, default_value = "plane")]
    terrain: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    traj: PathBuf,
    /// Also run the exhaustive search and compare totals.
    #[arg(long)]
    brute_force: bool,
    /// humanoid or quadruped.
    #[arg(long, default_value = "humanoid")]
    metric: String,
    #[arg(long, default_value_t = mimic_core::matching::DEFAULT_MIN_SIM)]
    min_sim: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenrefArgs {
    /// squat, wave, walk_back or kick.
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = 151)]
    frames: usize,
    #[arg(long, default_value_t = 30.0)]
    fps: f64,
    /// Robot model JSON or built-in robot name.
    #[arg(long, default_value = "squatter")]
    skel: String,
    #[arg(long)]
    out: PathBuf,
    /// Raise the root for a span; optional `a:b` frame range.
    #[arg(long, num_args = 0..=1, default_missing_value = "")]
    inject_float: Option<String>,
    /// Jump the root away for a span; optional `a:b` frame range.
    #[arg(long, num_args = 0..=1, default_missing_value = "")]
    inject_teleport: Option<String>,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Diverged(anyhow::Error),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        if e.downcast_ref::<ConfigError>().is_some() || e.downcast_ref::<RetargetError>().is_some() {
            return Failure::Config(e);
        }
        match e.downcast_ref::<TrainError>() {
            Some(TrainError::Diverged(_)) => Failure::Diverged(e),
            Some(TrainError::Config(_)) | Some(TrainError::Motion(_)) | Some(TrainError::Checkpoint(_)) => {
                Failure::Config(e)
            }
            _ => Failure::Other(e),
        }
    }
}

fn load_target_skeleton(spec: &str) -> Result<Skeleton> {
    let p = Path::new(spec);
    if p.is_file() {
        if let Ok(s) = load_skeleton(p) {
            return Ok(s);
        }
        let m = RobotModel::load(p)
            .map_err(|e| ConfigError::Invalid(format!("{spec}: neither a skeleton nor a robot model ({e})")))?;
        return Ok(m.skeleton());
    }
    load_model(spec).map(|m| m.skeleton())
}

/// Same skeleton with every non-root ball joint turned into a hinge about +y.
fn sagittal_of(s: &Skeleton) -> Result<Skeleton> {
    let mut joints = s.joints.clone();
    for j in joints.iter_mut().skip(1) {
        if j.dof == Dof::Three {
            j.dof = Dof::One { axis: Vec3::Y };
        }
    }
    Ok(Skeleton::new(s.default_height, joints)?)
}

fn load_model(spec: &str) -> Result<RobotModel> {
    let p = Path::new(spec);
    if p.is_file() {
        return RobotModel::load(p).map_err(|e| ConfigError::Invalid(format!("{spec}: {e}")).into());
    }
    RobotModel::preset(spec).ok_or_else(|| ConfigError::UnknownPreset(spec.to_string()).into())
}

fn stamp(m: &mut MotionSequence, hash: &str) {
    m.meta.insert("tool_version".into(), json!(TOOL_VERSION));
    m.meta.insert("config_hash".into(), json!(hash));
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_retarget(a: &RetargetArgs) -> Result<()> {
    let src = load_motion(&a.motion).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let map = JointMap::load(&a.map)?;
    let tgt = load_target_skeleton(&a.target_skel)?;
    let (mut out, report) = retarget_motion(&src, &tgt, &map)?;
    if a.planar {
        out = project_sagittal(&out, &sagittal_of(&tgt)?)?;
    }
    let hash = config_hash(&format!("retarget|{}|{}|{}", map.to_json(), a.target_skel, a.planar));
    stamp(&mut out, &hash);
    write(&a.out, &motion_to_json(&out))?;
    let rep = json!({ "version": TOOL_VERSION, "config_hash": hash, "report": report });
    write(&a.out.with_extension("report.json"), &serde_json::to_string_pretty(&rep)?)?;
    if !report.untouched_target_joints.is_empty() {
        eprintln!("untouched target joints: {}", report.untouched_target_joints.join(", "));
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    if let Some(p) = &a.preset {
        cfg.apply_reward_preset(p)?;
    }
    if let Some(p) = &a.ppo_preset {
        cfg.apply_ppo_preset(p)?;
    }
    cfg.validate()?;
    log::info!("seed {} config {}", cfg.seed, cfg.hash());
    println!("# mimic {TOOL_VERSION} config {}\n{}", cfg.hash(), cfg.to_toml());
    let (t, metrics) = train(cfg, Some(&a.out))?;
    if let Some(m) = metrics.last() {
        eprintln!("iteration {} mean return {:.4} mean step reward {:.4}", m.iteration, m.mean_return, m.mean_step_reward);
    }
    let last = if t.iteration > 0 { "checkpoint_final.json" } else { "checkpoint_0000.json" };
    eprintln!("wrote {}", a.out.join(last).display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.checkpoint)
        .map_err(|e| ConfigError::Io { path: a.checkpoint.clone(), source: e })?;
    let c = Checkpoint::from_json(&text)?;
    let setup = c.setup()?;
    let report = evaluate(&setup, &c.policy, &a.terrain, a.episodes, a.seed).map_err(|e| ConfigError::Invalid(e))?;
    let text = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(p) => write(p, &text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn leaves(s: &Skeleton) -> Vec<usize> {
    (1..s.len()).filter(|&j| s.children(j).next().is_none()).collect()
}

fn cmd_match(a: &MatchArgs) -> Result<()> {
    let r = load_motion(&a.reference).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let t = load_motion(&a.traj).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let metric = match a.metric.as_str() {
        "humanoid" => Metric::Humanoid,
        "quadruped" => Metric::Quadruped,
        other => bail!(ConfigError::Invalid(format!("unknown metric '{other}'"))),
    };
    let ee = leaves(&r.skeleton);
    if leaves(&t.skeleton) != ee || t.skeleton.len() != r.skeleton.len() {
        bail!(ConfigError::Invalid("reference and trajectory skeletons differ".into()));
    }
    let w = SimWeights::default();
    let s = similarity_matrix(metric, &descriptors_from_motion(&r, &ee), &descriptors_from_motion(&t, &ee), &w)
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let m = dp_optimal_matching(&s, a.min_sim);
    if m.is_empty() {
        eprintln!("warning: empty matching (no pair reaches similarity {})", a.min_sim);
    }
    let mut brute = serde_json::Value::Null;
    if a.brute_force {
        if s.rows * s.cols > BRUTE_FORCE_LIMIT {
            bail!(ConfigError::Invalid(format!(
                "brute force limited to {BRUTE_FORCE_LIMIT} cells, got {}x{}",
                s.rows, s.cols
            )));
        }
        let b = brute_force_matching(&s)?;
        let raw = mimic_core::matching::dp_optimal_matching_unfiltered(&s);
        let agree = b.total_similarity() == raw.total_similarity();
        eprintln!("brute force total {} dp total {} ({})", b.total_similarity(), raw.total_similarity(), if agree { "agree" } else { "DISAGREE" });
        brute = json!({ "total_similarity": b.total_similarity(), "agrees": agree });
    }
    print!("{}", ascii_alignment(&m, s.rows, s.cols));
    let hash = config_hash(&format!("match|{}|{}|{}", a.metric, a.min_sim, a.brute_force));
    let out = json!({
        "version": TOOL_VERSION,
        "config_hash": hash,
        "matching": serde_json::from_str::<serde_json::Value>(&m.to_json())?,
        "brute_force": brute,
    });
    if let Some(p) = &a.out {
        write(p, &serde_json::to_string_pretty(&out)?)?;
    }
    Ok(())
}

fn parse_span(arg: &Option<String>, frames: usize) -> Result<Option<(usize, usize)>> {
    let Some(text) = arg else { return Ok(None) };
    if text.is_empty() {
        return Ok(Some(GenOptions::default_span(frames)));
    }
    let (a, b) = text.split_once(':').ok_or_else(|| ConfigError::Invalid(format!("span '{text}' is not a:b")))?;
    let parse = |s: &str| s.trim().parse::<usize>().map_err(|e| ConfigError::Invalid(format!("span '{text}': {e}")));
    Ok(Some((parse(a)?, parse(b)?)))
}

fn cmd_genref(a: &GenrefArgs) -> Result<()> {
    let task: RefTask = a.task.parse().map_err(|e: mimic_core::genref::GenError| ConfigError::Invalid(e.to_string()))?;
    let model = load_model(&a.skel)?;
    let mut opts = GenOptions::new(a.frames, a.fps);
    opts.inject_float = parse_span(&a.inject_float, a.frames)?;
    opts.inject_teleport = parse_span(&a.inject_teleport, a.frames)?;
    let mut m = generate(task, &model, &opts).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let hash = config_hash(&serde_json::to_string(&json!({ "task": a.task, "skel": a.skel, "opts": opts }))?);
    stamp(&mut m, &hash);
    write(&a.out, &motion_to_json(&m))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Retarget(a) => cmd_retarget(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Match(a) => cmd_match(a),
        Cmd::Genref(a) => cmd_genref(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("MIMIC_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli).map_err(Failure::from) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Diverged(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
