//! Scripted reference motions for the planar robots, with optional
//! artifacts (floating and teleporting spans).

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::motion_io::{Frame, JointRot, MotionSequence};
use crate::rotmath::{Quat, Vec3};
use crate::simworld::dynamics::{Kinematics, SimState};
use crate::simworld::RobotModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefTask {
    Squat,
    Wave,
    WalkBack,
    Kick,
}

impl RefTask {
    pub const ALL: [RefTask; 4] = [RefTask::Squat, RefTask::Wave, RefTask::WalkBack, RefTask::Kick];

    pub fn name(self) -> &'static str {
        match self {
            RefTask::Squat => "squat",
            RefTask::Wave => "wave",
            RefTask::WalkBack => "walk_back",
            RefTask::Kick => "kick",
        }
    }
}

impl FromStr for RefTask {
    type Err = GenError;
    fn from_str(s: &str) -> Result<Self, GenError> {
        RefTask::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| GenError::UnknownTask(s.into()))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("unknown task '{0}'")]
    UnknownTask(String),
    #[error("invalid options: {0}")]
    Invalid(String),
}

/// Vertical offset of a floating span (m).
pub const FLOAT_HEIGHT: f64 = 0.3;
/// Horizontal jump of a teleport span (m); the root is also turned over.
pub const TELEPORT_SHIFT: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenOptions {
    pub frames: usize,
    pub fps: f64,
    /// Frame span `[a, b)` raised by `FLOAT_HEIGHT`.
    pub inject_float: Option<(usize, usize)>,
    /// Frame span `[a, b)` shifted by `TELEPORT_SHIFT` and flipped.
    pub inject_teleport: Option<(usize, usize)>,
}

impl GenOptions {
    pub fn new(frames: usize, fps: f64) -> Self {
        GenOptions { frames, fps, inject_float: None, inject_teleport: None }
    }

    /// Default artifact span: the fifth of the clip starting at 40%.
    pub fn default_span(frames: usize) -> (usize, usize) {
        let a = frames * 2 / 5;
        (a, (a + (frames / 10).max(1)).min(frames))
    }
}

/// Squat depth: `0.4 (1 - cos(2 pi t / 2.5))`.
pub fn squat_depth(t: f64) -> f64 {
    0.4 * (1.0 - (2.0 * std::f64::consts::PI * t / 2.5).cos())
}

fn leg_chains(model: &RobotModel) -> Vec<Vec<usize>> {
    (0..model.links.len())
        .filter(|&i| model.links[i].foot)
        .map(|i| model.chain(i).into_iter().skip(1).collect())
        .collect()
}

/// Joint angles of the scripted pose at time `t` and root x.
fn pose(task: RefTask, model: &RobotModel, t: f64, duration: f64) -> (f64, Vec<f64>) {
    use std::f64::consts::PI;
    let mut q = model.default_pose();
    let legs = leg_chains(model);
    let on_leg = |j: usize| legs.iter().any(|c| c.contains(&(j + 1)));
    let mut x = 0.0;
    match task {
        RefTask::Squat => {
            let th = squat_depth(t);
            for c in &legs {
                let pattern = [-th, 2.0 * th, -th];
                for (k, &l) in c.iter().enumerate().take(3) {
                    q[l - 1] += pattern[k];
                }
            }
        }
        RefTask::Wave => {
            let arms: Vec<usize> = (0..q.len()).filter(|&j| !on_leg(j)).collect();
            let w = (2.0 * PI * t / 2.0).sin();
            if arms.is_empty() {
                if let Some(c) = legs.first() {
                    q[c[0] - 1] += 0.3 * w;
                }
            } else {
                for j in arms {
                    q[j] += 0.6 * w;
                }
            }
        }
        RefTask::WalkBack => {
            x = -0.4 * t;
            for (k, c) in legs.iter().enumerate() {
                let ph = 2.0 * PI * 1.5 * t + PI * k as f64;
                q[c[0] - 1] += 0.3 * ph.sin();
                if c.len() > 1 {
                    q[c[1] - 1] += 0.4 * ph.cos().max(0.0);
                }
            }
        }
        RefTask::Kick => {
            if let Some(c) = legs.first() {
                let b = 0.5 * (1.0 - (2.0 * PI * t / duration.max(1e-9)).cos());
                q[c[0] - 1] -= 1.0 * b;
                if c.len() > 1 {
                    q[c[1] - 1] += 0.5 * b;
                }
            }
        }
    }
    for (j, v) in q.iter_mut().enumerate() {
        let [lo, hi] = model.links[j + 1].limits;
        *v = v.clamp(lo, hi);
    }
    (x, q)
}

/// Root height that puts the lowest allowed contact point on `z = 0`.
fn grounded_height(model: &RobotModel, q: &[f64]) -> f64 {
    let mut s = SimState::rest(model);
    s.root_pos = [0.0, 0.0];
    s.pitch = 0.0;
    s.q = q.to_vec();
    let k = Kinematics::new(model, &s);
    let mut lowest = f64::INFINITY;
    for (i, l) in model.links.iter().enumerate() {
        if l.allowed_contact || model.links.iter().all(|l| !l.allowed_contact) {
            for p in model.contact_points(i) {
                lowest = lowest.min(k.point(i, p)[1]);
            }
        }
    }
    if lowest.is_finite() {
        -lowest
    } else {
        model.base_height
    }
}

fn check_span(span: Option<(usize, usize)>, frames: usize, what: &str) -> Result<(), GenError> {
    match span {
        Some((a, b)) if a >= b || b > frames => {
            Err(GenError::Invalid(format!("{what} span [{a}, {b}) must be non-empty and inside {frames} frames")))
        }
        _ => Ok(()),
    }
}

/// Builds the scripted clip on the model's skeleton.
pub fn generate(task: RefTask, model: &RobotModel, opts: &GenOptions) -> Result<MotionSequence, GenError> {
    if opts.frames < 2 || !(opts.fps > 0.0) {
        return Err(GenError::Invalid("need at least two frames and a positive fps".into()));
    }
    if model.fixed_base {
        return Err(GenError::Invalid(format!("model '{}' has a fixed base", model.name)));
    }
    check_span(opts.inject_float, opts.frames, "float")?;
    check_span(opts.inject_teleport, opts.frames, "teleport")?;
    let skel = model.skeleton();
    let n_tips = model.end_effectors().len();
    let duration = (opts.frames - 1) as f64 / opts.fps;
    let inside = |s: Option<(usize, usize)>, i: usize| s.is_some_and(|(a, b)| i >= a && i < b);
    let mut frames = Vec::with_capacity(opts.frames);
    for i in 0..opts.frames {
        let t = i as f64 / opts.fps;
        let (x, q) = pose(task, model, t, duration);
        let mut root = Vec3::new(x, 0.0, grounded_height(model, &q));
        let mut root_rot = Quat::IDENTITY;
        if inside(opts.inject_float, i) {
            root.z += FLOAT_HEIGHT;
        }
        if inside(opts.inject_teleport, i) {
            root.x += TELEPORT_SHIFT;
            root_rot = Quat::about_y(std::f64::consts::PI);
        }
        let mut joint_rot: Vec<JointRot> = q.into_iter().map(JointRot::Angle).collect();
        joint_rot.extend(std::iter::repeat(JointRot::Quat(Quat::IDENTITY)).take(n_tips));
        frames.push(Frame { root_pos: root, root_rot, joint_rot });
    }
    let mut m = MotionSequence::new(opts.fps, skel, frames).map_err(|e| GenError::Invalid(e.to_string()))?;
    m.meta.insert("task".into(), json!(task.name()));
    m.meta.insert("robot".into(), json!(model.name));
    if let Some((a, b)) = opts.inject_float {
        m.meta.insert("float_span".into(), json!([a, b]));
    }
    if let Some((a, b)) = opts.inject_teleport {
        m.meta.insert("teleport_span".into(), json!([a, b]));
    }
    Ok(m)
}

/// `[a, b)` stored under `key` in the motion metadata.
pub fn meta_span(m: &MotionSequence, key: &str) -> Option<(usize, usize)> {
    let v = m.meta.get(key)?.as_array()?;
    Some((v.first()?.as_u64()? as usize, v.get(1)?.as_u64()? as usize))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion_io::{motion_from_json, motion_to_json};

    #[test]
    fn squat_closed_form() {
        let model = RobotModel::preset("squatter").unwrap();
        let m = generate(RefTask::Squat, &model, &GenOptions::new(151, 30.0)).unwrap();
        for (i, f) in m.frames.iter().enumerate() {
            let th = squat_depth(i as f64 / 30.0);
            assert!((f.root_pos.z - (0.06 + 0.8 * th.cos())).abs() < 1e-12);
            assert_eq!(f.joint_rot[0], JointRot::Angle(-th));
            assert_eq!(f.joint_rot[1], JointRot::Angle(2.0 * th));
        }
        let back = motion_from_json(&motion_to_json(&m)).unwrap();
        assert_eq!(back.frames.len(), 151);
    }

    #[test]
    fn teleport_jump() {
        let model = RobotModel::preset("squatter").unwrap();
        let mut o = GenOptions::new(60, 30.0);
        o.inject_teleport = Some(GenOptions::default_span(60));
        let m = generate(RefTask::Squat, &model, &o).unwrap();
        let (a, b) = meta_span(&m, "teleport_span").unwrap();
        assert_eq!((a, b), (24, 30));
        let jump = (m.frames[a].root_pos - m.frames[a - 1].root_pos).norm();
        assert!(jump > 0.5);
    }

    #[test]
    fn float_raises_root() {
        let model = RobotModel::preset("planar_dog").unwrap();
        let mut o = GenOptions::new(40, 30.0);
        o.inject_float = Some((10, 20));
        let plain = generate(RefTask::WalkBack, &model, &GenOptions::new(40, 30.0)).unwrap();
        let m = generate(RefTask::WalkBack, &model, &o).unwrap();
        assert!((m.frames[12].root_pos.z - plain.frames[12].root_pos.z - FLOAT_HEIGHT).abs() < 1e-12);
        assert_eq!(m.frames[25], plain.frames[25]);
        assert!(plain.frames[39].root_pos.x < -0.4);
    }

    #[test]
    fn every_task_valid() {
        for name in ["squatter", "planar_dog"] {
            let model = RobotModel::preset(name).unwrap();
            for t in RefTask::ALL {
                generate(t, &model, &GenOptions::new(30, 30.0)).unwrap();
            }
        }
        assert!("dance".parse::<RefTask>().is_err());
        let model = RobotModel::preset("squatter").unwrap();
        let mut o = GenOptions::new(30, 30.0);
        o.inject_float = Some((20, 40));
        assert!(generate(RefTask::Squat, &model, &o).is_err());
    }
}
