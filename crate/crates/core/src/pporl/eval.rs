//! Policy evaluation: deterministic rollouts, exported traces and per-task
//! success predicates evaluated on those traces.

use serde::{Deserialize, Serialize};

use super::config::{EvalSection, TaskKind, TOOL_VERSION};
use super::policy::PolicyNet;
use super::rewards::{foot_height, swing_reward};
use super::trainer::Setup;
use crate::genref::meta_span;
use crate::nn::NnError;
use crate::simworld::env::{env_seed, TraceRow};
use crate::simworld::{Env, InitMode, Termination, TerrainSpec};

/// Terrains of the per-terrain protocol.
pub const EVAL_TERRAINS: [&str; 4] = ["plane", "rand", "pyramid", "wave"];

/// What counts as success for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuccessRule {
    /// Mean matched similarity above a threshold, never fallen.
    Similarity,
    /// Net backward root displacement above a threshold, never fallen.
    Backward,
    /// Foot height gain above a threshold at least once.
    KickHeight,
    /// Swing reward at the final step above a threshold.
    Swing,
}

pub fn success_rule(setup: &Setup) -> SuccessRule {
    let ref_task = setup
        .reference
        .as_ref()
        .and_then(|r| r.motion.meta.get("task"))
        .and_then(|v| v.as_str().map(String::from));
    match setup.cfg.task {
        TaskKind::Swing => SuccessRule::Swing,
        TaskKind::RunBackward => SuccessRule::Backward,
        TaskKind::Kick => SuccessRule::KickHeight,
        TaskKind::Imitate => match ref_task.as_deref() {
            Some("walk_back") => SuccessRule::Backward,
            Some("kick") => SuccessRule::KickHeight,
            _ => SuccessRule::Similarity,
        },
    }
}

/// One evaluated episode. `rows[0]` is the initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub rows: Vec<TraceRow>,
    pub fallen: bool,
    pub diverged: bool,
    pub horizon_reached: bool,
    /// Reference length `H + 1` (0 without a reference).
    pub ref_len: usize,
    /// Matched `(u, v)` pairs of the episode's optimal matching.
    pub pairs: Vec<(usize, usize)>,
}

fn column(row: &TraceRow, name: &str) -> f64 {
    row.rewards.iter().find(|(n, _)| n == name).map_or(0.0, |r| r.1)
}

impl EpisodeTrace {
    pub fn length(&self) -> usize {
        self.rows.len().saturating_sub(1)
    }

    /// Matched total similarity over `H + 1`.
    pub fn mean_similarity(&self) -> f64 {
        if self.ref_len == 0 {
            return 0.0;
        }
        self.rows.iter().map(|r| column(r, "similarity")).sum::<f64>() / self.ref_len as f64
    }

    pub fn backward_displacement(&self) -> f64 {
        match (self.rows.first(), self.rows.last()) {
            (Some(a), Some(b)) => a.root_x - b.root_x,
            _ => 0.0,
        }
    }

    pub fn kick_gain(&self) -> f64 {
        let Some(first) = self.rows.first() else { return 0.0 };
        let h0 = column(first, "foot_height");
        self.rows.iter().map(|r| column(r, "foot_height") - h0).fold(0.0, f64::max)
    }

    /// No matched pair uses a reference frame inside `span`.
    pub fn excludes(&self, span: (usize, usize)) -> bool {
        self.pairs.iter().all(|&(u, _)| u < span.0 || u >= span.1)
    }

    pub fn success(&self, rule: SuccessRule, th: &EvalSection) -> bool {
        let standing = !self.fallen && !self.diverged;
        match rule {
            SuccessRule::Similarity => standing && self.mean_similarity() >= th.min_similarity,
            SuccessRule::Backward => standing && self.backward_displacement() >= th.min_backward,
            SuccessRule::KickHeight => self.kick_gain() >= th.min_kick_height,
            SuccessRule::Swing => self.rows.last().is_some_and(|r| column(r, "swing") >= th.min_swing),
        }
    }
}

fn trace_row(env: &Env, torques: Vec<f64>, extra: Vec<(String, f64)>) -> TraceRow {
    let s = &env.state;
    TraceRow {
        time: s.time,
        root_x: s.root_pos[0],
        root_z: s.root_pos[1],
        pitch: s.pitch,
        q: s.q.clone(),
        torques,
        contacts: s.contacts.clone(),
        rewards: extra,
    }
}

/// Deterministic (mean-action) episode from the default initial state.
pub fn run_episode(setup: &Setup, policy: &PolicyNet, seed: u64) -> Result<EpisodeTrace, NnError> {
    let mut env = Env::new(setup.model.clone(), setup.sim.clone(), seed);
    env.reset(InitMode::Default, setup.reference.as_ref().map(|r| &r.motion));
    let extra = |env: &Env| {
        vec![
            ("swing".to_string(), if env.state.q.is_empty() { 0.0 } else { swing_reward(&env.state) }),
            ("foot_height".to_string(), {
                let h = foot_height(&setup.model, &env.state);
                if h.is_finite() {
                    h
                } else {
                    0.0
                }
            }),
        ]
    };
    let nj = setup.model.n_joints();
    let mut rows = vec![trace_row(&env, vec![0.0; nj], extra(&env))];
    let mut descs = vec![env.descriptor()];
    let (mut fallen, mut diverged, mut horizon) = (false, false, false);
    loop {
        let o = setup.observe(&mut env);
        let a = policy.to_action(&policy.mean(&o)?);
        match env.step(&a) {
            Ok(st) => {
                rows.push(trace_row(&env, st.info.torques.clone(), extra(&env)));
                descs.push(env.descriptor());
                match st.termination {
                    Termination::Continue => {}
                    Termination::Fallen => {
                        fallen = true;
                        break;
                    }
                    Termination::HorizonReached => {
                        horizon = true;
                        break;
                    }
                }
            }
            Err(_) => {
                diverged = true;
                break;
            }
        }
    }
    let (pairs, ref_len) = match setup.match_episode(&descs) {
        Some((m, s)) => {
            for &(u, v) in m.pairs() {
                rows[v].rewards.push(("similarity".into(), s.get(u, v)));
            }
            (m.pairs().to_vec(), s.rows)
        }
        None => (Vec::new(), 0),
    };
    for r in &mut rows {
        if !r.rewards.iter().any(|(n, _)| n == "similarity") {
            r.rewards.push(("similarity".into(), 0.0));
        }
    }
    Ok(EpisodeTrace { rows, fallen, diverged, horizon_reached: horizon, ref_len, pairs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerrainReport {
    pub terrain: String,
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_episode_length: f64,
    pub mean_similarity: f64,
    /// Episodes that reached the horizon without falling.
    pub survival_rate: f64,
    /// Episodes whose matching skips the reference's teleport span.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teleport_excluded_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: String,
    pub config_hash: String,
    pub rule: SuccessRule,
    pub blocks: Vec<TerrainReport>,
}

pub fn summarize(terrain: &str, setup: &Setup, traces: &[EpisodeTrace]) -> TerrainReport {
    let n = traces.len();
    let nf = n.max(1) as f64;
    let rule = success_rule(setup);
    let span = setup.reference.as_ref().and_then(|r| meta_span(&r.motion, "teleport_span"));
    let rate = |f: &dyn Fn(&EpisodeTrace) -> bool| traces.iter().filter(|t| f(t)).count() as f64 / nf;
    TerrainReport {
        terrain: terrain.to_string(),
        episodes: n,
        success_rate: rate(&|t| t.success(rule, &setup.cfg.eval)),
        mean_episode_length: traces.iter().map(|t| t.length() as f64).sum::<f64>() / nf,
        mean_similarity: traces.iter().map(|t| t.mean_similarity()).sum::<f64>() / nf,
        survival_rate: rate(&|t| t.horizon_reached && !t.fallen),
        teleport_excluded_rate: span.map(|s| rate(&|t| t.excludes(s))),
    }
}

/// Runs `episodes` deterministic episodes on one terrain.
pub fn evaluate_terrain(
    setup: &Setup,
    policy: &PolicyNet,
    terrain: TerrainSpec,
    episodes: usize,
    seed: u64,
) -> Result<(TerrainReport, Vec<EpisodeTrace>), NnError> {
    use rayon::prelude::*;
    let mut s = setup.clone();
    s.sim.terrain = terrain;
    let traces: Vec<EpisodeTrace> = (0..episodes)
        .into_par_iter()
        .map(|e| run_episode(&s, policy, env_seed(seed, e as u64)))
        .collect::<Result<_, _>>()?;
    Ok((summarize(terrain.name(), &s, &traces), traces))
}

/// One block per named terrain (`"all"` expands to every terrain).
pub fn evaluate(setup: &Setup, policy: &PolicyNet, terrains: &[String], episodes: usize, seed: u64) -> Result<EvalReport, String> {
    let names: Vec<String> = if terrains.iter().any(|t| t == "all") {
        EVAL_TERRAINS.iter().map(|s| s.to_string()).collect()
    } else {
        terrains.to_vec()
    };
    let mut blocks = Vec::new();
    for name in &names {
        let spec = TerrainSpec::from_name(name, seed).ok_or_else(|| format!("unknown terrain '{name}'"))?;
        if episodes == 0 {
            continue;
        }
        blocks.push(evaluate_terrain(setup, policy, spec, episodes, seed).map_err(|e| e.to_string())?.0);
    }
    Ok(EvalReport { version: TOOL_VERSION.to_string(), config_hash: setup.cfg.hash(), rule: success_rule(setup), blocks })
}
