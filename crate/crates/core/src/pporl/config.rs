//! Run configuration: TOML layout, named presets and the config hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::rewards::{BaselineTask, RewardWeights};
use crate::adversarial::DiscConfig;
use crate::similarity::{Metric, SimWeights};
use crate::simworld::{RandomizationSpec, RobotModel, SimConfig, TerrainSpec};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Reward only from the reference motion.
    #[default]
    Imitate,
    /// Swing the first joint up and hold it there.
    Swing,
    RunBackward,
    Kick,
}

impl TaskKind {
    pub fn baseline(self) -> Option<BaselineTask> {
        match self {
            TaskKind::RunBackward => Some(BaselineTask::RunBackward),
            TaskKind::Kick => Some(BaselineTask::Kick),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RobotSection {
    /// Built-in model name.
    pub preset: Option<String>,
    /// Model JSON file; wins over `preset`.
    pub path: Option<PathBuf>,
}

impl RobotSection {
    pub fn load(&self) -> Result<RobotModel, ConfigError> {
        if let Some(p) = &self.path {
            return RobotModel::load(p).map_err(|e| ConfigError::Invalid(format!("robot model {}: {e}", p.display())));
        }
        let name = self.preset.as_deref().unwrap_or("pendulum");
        RobotModel::preset(name).ok_or_else(|| ConfigError::UnknownPreset(name.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct MotionSection {
    /// Reference motion file (retargeted onto the robot skeleton).
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RandomizationSource {
    Named(String),
    Spec(RandomizationSpec),
}

impl Default for RandomizationSource {
    fn default() -> Self {
        RandomizationSource::Named("none".into())
    }
}

impl RandomizationSource {
    pub fn resolve(&self) -> Result<RandomizationSpec, ConfigError> {
        match self {
            RandomizationSource::Named(n) => {
                RandomizationSpec::preset(n).ok_or_else(|| ConfigError::UnknownPreset(n.clone()))
            }
            RandomizationSource::Spec(s) => Ok(s.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MeMode {
    /// Rewards follow the most recent refreshed matching.
    #[default]
    Stale,
    /// Each finished episode is matched on its own.
    PerEpisode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub preset: Option<String>,
    pub lambda_adv: f64,
    pub lambda_me: f64,
    pub aux: [f64; 6],
    pub task: f64,
    /// Margin inside the joint limits where the limit penalty starts.
    pub aux_margin: f64,
    pub me_mode: MeMode,
    pub metric: Metric,
    pub similarity: SimWeights,
}

impl Default for RewardSection {
    fn default() -> Self {
        let w = RewardWeights::default();
        RewardSection {
            preset: None,
            lambda_adv: w.lambda_adv,
            lambda_me: w.lambda_me,
            aux: w.aux,
            task: w.task,
            aux_margin: 0.05,
            me_mode: MeMode::Stale,
            metric: Metric::Humanoid,
            similarity: SimWeights::default(),
        }
    }
}

impl RewardSection {
    pub fn weights(&self) -> RewardWeights {
        RewardWeights { lambda_adv: self.lambda_adv, lambda_me: self.lambda_me, aux: self.aux, task: self.task }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoSection {
    pub preset: Option<String>,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub lr: f64,
    pub epochs: usize,
    pub envs: usize,
    pub steps: usize,
    pub minibatch: usize,
    /// Variance of each action dimension.
    pub sigma2: f64,
    pub hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
    /// Environment action is `default_pose + action_scale * u`.
    pub action_scale: f64,
    /// Append `t / horizon` to the policy observation.
    pub time_obs: bool,
    pub max_grad_norm: f64,
}

impl Default for PpoSection {
    fn default() -> Self {
        PpoSection {
            preset: None,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            lr: 3e-4,
            epochs: 6,
            envs: 64,
            steps: 16,
            minibatch: 2048,
            sigma2: 0.05,
            hidden: vec![64, 64],
            value_hidden: vec![64, 64],
            action_scale: 0.5,
            time_obs: false,
            max_grad_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscSection {
    pub hidden: Vec<usize>,
    pub lr: f64,
    /// Minibatch updates per iteration.
    pub updates: usize,
    pub batch: usize,
    pub w_gp: f64,
    pub normalize_inputs: bool,
}

impl Default for DiscSection {
    fn default() -> Self {
        DiscSection { hidden: vec![64, 64], lr: 3e-4, updates: 6, batch: 256, w_gp: 5.0, normalize_inputs: true }
    }
}

impl DiscSection {
    pub fn disc_config(&self) -> DiscConfig {
        DiscConfig { w_gp: self.w_gp, normalize_inputs: self.normalize_inputs, literal_policy_term: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Robot default pose.
    Default,
    /// First reference frame.
    ReferenceStart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchingSection {
    /// Iterations between matching refreshes (0 disables).
    pub refresh_every: usize,
    /// Rollouts per refresh and initialisation mode.
    pub episodes: usize,
    pub min_sim: f64,
    pub init_modes: Vec<InitKind>,
}

impl Default for MatchingSection {
    fn default() -> Self {
        MatchingSection {
            refresh_every: 10,
            episodes: 4,
            min_sim: crate::matching::DEFAULT_MIN_SIM,
            init_modes: vec![InitKind::Default],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
    /// Mean matched similarity needed by squat / wave style tasks.
    pub min_similarity: f64,
    /// Net backward displacement (m) for run-backward.
    pub min_backward: f64,
    /// Foot height gain (m) for kick.
    pub min_kick_height: f64,
    /// `(1 - cos q0) / 2` at the final step for swing.
    pub min_swing: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { episodes: 100, min_similarity: 0.5, min_backward: 1.0, min_kick_height: 0.3, min_swing: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub iterations: usize,
    pub task: TaskKind,
    pub robot: RobotSection,
    pub motion: MotionSection,
    /// Simulation settings; terrain and randomization come from their own
    /// sections.
    pub sim: SimConfig,
    pub terrain: TerrainSpec,
    pub randomization: RandomizationSource,
    pub rewards: RewardSection,
    pub ppo: PpoSection,
    pub disc: DiscSection,
    pub matching: MatchingSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            iterations: 300,
            task: TaskKind::default(),
            robot: RobotSection::default(),
            motion: MotionSection::default(),
            sim: SimConfig::default(),
            terrain: TerrainSpec::Plane,
            randomization: RandomizationSource::default(),
            rewards: RewardSection::default(),
            ppo: PpoSection::default(),
            disc: DiscSection::default(),
            matching: MatchingSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Reward presets.
pub const REWARD_PRESETS: [&str; 5] = ["full", "gailfo", "state_err", "pure_rl", "safety"];
/// Training presets.
pub const PPO_PRESETS: [&str; 2] = ["desk", "full_scale"];

fn reward_preset(name: &str) -> Option<&'static str> {
    Some(match name {
        "full" => "lambda_adv = 1.0\nlambda_me = 1.0",
        "gailfo" => "lambda_adv = 1.0\nlambda_me = 0.0",
        "state_err" => "lambda_adv = 0.0\nlambda_me = 1.0",
        "pure_rl" => "lambda_adv = 0.0\nlambda_me = 0.0\ntask = 1.0",
        "safety" => "aux = [1e-3, 1e-5, 1e-4, 1e-3, 1e-2, 1e-3]",
        _ => return None,
    })
}

fn ppo_preset(name: &str) -> Option<&'static str> {
    Some(match name {
        "desk" => "envs = 64\nlr = 3e-4\nminibatch = 2048",
        "full_scale" => "envs = 4096\nlr = 5e-5\nminibatch = 32768",
        _ => return None,
    })
}

/// `over` wins; tables merge recursively.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn apply_preset(
    table: &mut toml::Table,
    section: &str,
    lookup: fn(&str) -> Option<&'static str>,
) -> Result<(), ConfigError> {
    let Some(toml::Value::Table(sec)) = table.get_mut(section) else { return Ok(()) };
    let Some(name) = sec.get("preset").and_then(|v| v.as_str()).map(String::from) else { return Ok(()) };
    let text = lookup(&name).ok_or_else(|| ConfigError::UnknownPreset(name.clone()))?;
    let mut base: toml::Table = text.parse().expect("preset tables parse");
    merge(&mut base, sec.clone());
    *sec = base;
    Ok(())
}

impl RunConfig {
    /// Parses TOML; `rewards.preset` and `ppo.preset` are expanded first and
    /// keys given explicitly override them.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        apply_preset(&mut table, "rewards", reward_preset)?;
        apply_preset(&mut table, "ppo", ppo_preset)?;
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: path.into(), source: e })?;
        let mut cfg = Self::from_toml(&text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.robot.path, &mut cfg.motion.path].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Replaces the reward weights with a named preset.
    pub fn apply_reward_preset(&mut self, name: &str) -> Result<(), ConfigError> {
        let text = reward_preset(name).ok_or_else(|| ConfigError::UnknownPreset(name.into()))?;
        let mut table: toml::Table = toml::to_string(&self.rewards).unwrap().parse().unwrap();
        merge(&mut table, text.parse().unwrap());
        self.rewards = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        self.rewards.preset = Some(name.into());
        Ok(())
    }

    pub fn apply_ppo_preset(&mut self, name: &str) -> Result<(), ConfigError> {
        let text = ppo_preset(name).ok_or_else(|| ConfigError::UnknownPreset(name.into()))?;
        let mut table: toml::Table = toml::to_string(&self.ppo).unwrap().parse().unwrap();
        merge(&mut table, text.parse().unwrap());
        self.ppo = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        self.ppo.preset = Some(name.into());
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        let p = &self.ppo;
        if !(p.gamma > 0.0 && p.gamma <= 1.0) {
            return bad("ppo.gamma must be in (0, 1]");
        }
        if !(p.gae_lambda > 0.0 && p.gae_lambda <= 1.0) {
            return bad("ppo.gae_lambda must be in (0, 1]");
        }
        if p.clip <= 0.0 {
            return bad("ppo.clip must be positive");
        }
        if p.sigma2 <= 0.0 {
            return bad("ppo.sigma2 must be positive");
        }
        if p.lr <= 0.0 || p.envs == 0 || p.steps == 0 || p.minibatch == 0 || p.epochs == 0 {
            return bad("ppo.lr, envs, steps, minibatch and epochs must be positive");
        }
        if self.matching.init_modes.is_empty() {
            return bad("matching.init_modes must not be empty");
        }
        if self.task == TaskKind::Imitate && self.motion.path.is_none() {
            return bad("task 'imitate' needs motion.path");
        }
        self.sim.validate().map_err(ConfigError::Invalid)?;
        self.randomization.resolve()?;
        Ok(())
    }

    /// Simulation settings with terrain and randomization filled in.
    pub fn sim_config(&self) -> Result<SimConfig, ConfigError> {
        let mut s = self.sim.clone();
        s.terrain = self.terrain;
        s.randomization = self.randomization.resolve()?;
        Ok(s)
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        config_hash(&serde_json::to_string(self).expect("config serialises"))
    }
}

pub fn config_hash(canonical: &str) -> String {
    let d = Sha256::digest(canonical.as_bytes());
    d[..8].iter().map(|b| format!("{b:02x}")).collect()
}
