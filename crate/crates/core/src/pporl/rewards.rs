//! Reward terms: the adversarial / matched-state combination, auxiliary
//! safety penalties, baseline task rewards and critic augmentation.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::matching::Matching;
use crate::simworld::{RobotModel, SimState, StepInfo};

pub const AUX_NAMES: [&str; 6] = ["pos_limit", "joint_acc", "torque", "action_rate", "collision", "slip"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub lambda_adv: f64,
    pub lambda_me: f64,
    /// Weights of the auxiliary terms, in `AUX_NAMES` order.
    pub aux: [f64; 6],
    /// Weight of the task reward for tasks that define one.
    pub task: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights { lambda_adv: 1.0, lambda_me: 1.0, aux: [0.0; 6], task: 1.0 }
    }
}

pub fn combined_reward(adv: f64, me: f64, aux: &[f64; 6], w: &RewardWeights) -> f64 {
    w.lambda_adv * adv + w.lambda_me * me + aux.iter().zip(&w.aux).map(|(r, k)| r * k).sum::<f64>()
}

/// Inputs of the auxiliary terms for one control step.
pub struct AuxInputs<'a> {
    pub model: &'a RobotModel,
    pub limits: &'a [[f64; 2]],
    pub prev: &'a SimState,
    pub next: &'a SimState,
    pub action: &'a [f64],
    pub prev_action: &'a [f64],
    pub info: &'a StepInfo,
    pub allowed: &'a [bool],
    pub dt: f64,
    pub margin: f64,
}

/// The six penalties, each `<= 0`, in `AUX_NAMES` order.
pub fn aux_rewards(x: &AuxInputs) -> [f64; 6] {
    let pl: f64 = x
        .next
        .q
        .iter()
        .zip(x.limits)
        .map(|(q, [lo, hi])| {
            let over = (q - (hi - x.margin)).max(0.0) + ((lo + x.margin) - q).max(0.0);
            over * over
        })
        .sum();
    let acc: f64 = x.next.qd.iter().zip(&x.prev.qd).map(|(a, b)| ((a - b) / x.dt).powi(2)).sum();
    let tor: f64 = x.info.torques.iter().map(|t| t * t).sum();
    let ar: f64 = x.action.iter().zip(x.prev_action).map(|(a, b)| (a - b) * (a - b)).sum();
    let col = x.info.contacts.iter().zip(x.allowed).filter(|(c, ok)| **c && !**ok).count() as f64;
    let slip: f64 = x
        .model
        .links
        .iter()
        .enumerate()
        .filter(|(i, l)| l.foot && x.info.contacts[*i])
        .map(|(i, _)| x.info.slip_speed[i].powi(2))
        .sum();
    [-pl, -acc, -tor, -ar, -col, -slip]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineTask {
    RunBackward,
    Kick,
}

#[derive(Debug, thiserror::Error)]
#[error("unknown task '{0}'")]
pub struct UnknownTask(pub String);

impl FromStr for BaselineTask {
    type Err = UnknownTask;
    fn from_str(s: &str) -> Result<Self, UnknownTask> {
        match s {
            "run_backward" | "walk_back" => Ok(BaselineTask::RunBackward),
            "kick" => Ok(BaselineTask::Kick),
            _ => Err(UnknownTask(s.to_string())),
        }
    }
}

/// Episode memory for record-style rewards.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskHistory {
    pub max_foot_height: Option<f64>,
}

/// Highest point of any foot link.
pub fn foot_height(model: &RobotModel, s: &SimState) -> f64 {
    let k = crate::simworld::dynamics::Kinematics::new(model, s);
    let mut h = f64::NEG_INFINITY;
    for (i, l) in model.links.iter().enumerate() {
        if l.foot {
            for p in model.contact_points(i) {
                h = h.max(k.point(i, p)[1]);
            }
        }
    }
    h
}

/// Backward speed along the body heading, or the foot-height record
/// increment.
pub fn baseline_task_reward(task: BaselineTask, model: &RobotModel, s: &SimState, hist: &mut TaskHistory) -> f64 {
    match task {
        BaselineTask::RunBackward => {
            let (c, sn) = (s.pitch.cos(), s.pitch.sin());
            -(s.root_vel[0] * c - s.root_vel[1] * sn)
        }
        BaselineTask::Kick => record_increment(hist, foot_height(model, s)),
    }
}

/// `max(0, h - max_prev)`; the first observation sets the record.
pub fn record_increment(hist: &mut TaskHistory, h: f64) -> f64 {
    let r = match hist.max_foot_height {
        Some(m) => (h - m).max(0.0),
        None => 0.0,
    };
    hist.max_foot_height = Some(hist.max_foot_height.map_or(h, |m| m.max(h)));
    r
}

/// Swing-up reward for the first joint: 0 hanging, 1 upright.
pub fn swing_reward(s: &SimState) -> f64 {
    0.5 * (1.0 - s.q[0].cos())
}

/// Features of the next matched reference frame at or after step `t`, then
/// the normalised time to reach it. Past the last pair the final reference
/// frame is used with zero time.
pub fn augment_critic_obs(t: usize, matching: &Matching, ref_features: &[Vec<f64>], horizon: usize) -> Vec<f64> {
    let (u, dt) = match matching.next_pair_from(t) {
        Some((u, v)) => (u, (v - t) as f64 / horizon.max(1) as f64),
        None => (ref_features.len() - 1, 0.0),
    };
    let mut out = ref_features[u].clone();
    out.push(dt);
    out
}
