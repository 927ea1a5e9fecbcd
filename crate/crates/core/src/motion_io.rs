//! Skeleton and motion data model, JSON ingestion, resampling and forward
//! kinematics.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::rotmath::{quat_mul, relative_rotation, Quat, Vec3};

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON: {0}")]
    Parse(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("validation error{}{}: {msg}", .joint.map(|j| format!(" (joint {j})")).unwrap_or_default(), .frame.map(|f| format!(" (frame {f})")).unwrap_or_default())]
    Validation {
        msg: String,
        joint: Option<usize>,
        frame: Option<usize>,
    },
}

impl MotionError {
    fn joint(j: usize, msg: impl Into<String>) -> Self {
        MotionError::Validation { msg: msg.into(), joint: Some(j), frame: None }
    }

    fn frame(f: usize, j: Option<usize>, msg: impl Into<String>) -> Self {
        MotionError::Validation { msg: msg.into(), joint: j, frame: Some(f) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dof {
    Three,
    One { axis: Vec3 },
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub name: String,
    /// `None` only for the root at index 0.
    pub parent: Option<usize>,
    pub offset: Vec3,
    pub dof: Dof,
    pub limits: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    pub default_height: f64,
    pub joints: Vec<Joint>,
}

impl Skeleton {
    pub fn new(default_height: f64, joints: Vec<Joint>) -> Result<Self, MotionError> {
        let s = Skeleton { default_height, joints };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    pub fn children(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        self.joints
            .iter()
            .enumerate()
            .filter(move |(_, jt)| jt.parent == Some(j))
            .map(|(i, _)| i)
    }

    pub fn validate(&self) -> Result<(), MotionError> {
        if self.joints.is_empty() {
            return Err(MotionError::Validation {
                msg: "skeleton has no joints".into(),
                joint: None,
                frame: None,
            });
        }
        if !self.default_height.is_finite() {
            return Err(MotionError::Validation {
                msg: "default_height must be finite".into(),
                joint: None,
                frame: None,
            });
        }
        for (i, j) in self.joints.iter().enumerate() {
            match (i, j.parent) {
                (0, None) => {}
                (0, Some(_)) => return Err(MotionError::joint(0, format!("joint '{}' at index 0 must be the root", j.name))),
                (_, None) => return Err(MotionError::joint(i, format!("joint '{}' is a second root", j.name))),
                (_, Some(p)) if p >= i => {
                    return Err(MotionError::joint(
                        i,
                        format!("joint '{}' has parent {p} not preceding it", j.name),
                    ))
                }
                _ => {}
            }
            if !j.offset.is_finite() {
                return Err(MotionError::joint(i, format!("joint '{}' has non-finite offset", j.name)));
            }
            if let Dof::One { axis } = j.dof {
                if (axis.norm() - 1.0).abs() > 1e-9 {
                    return Err(MotionError::joint(i, format!("joint '{}' axis is not unit length", j.name)));
                }
            }
            if let Some([lo, hi]) = j.limits {
                if !(lo < hi) {
                    return Err(MotionError::joint(i, format!("joint '{}' limits are not increasing", j.name)));
                }
            }
            if self.joints[..i].iter().any(|o| o.name == j.name) {
                return Err(MotionError::joint(i, format!("duplicate joint name '{}'", j.name)));
            }
        }
        Ok(())
    }
}

/// Local rotation of a non-root joint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JointRot {
    Quat(Quat),
    Angle(f64),
}

impl JointRot {
    /// Local rotation as a quaternion, given the joint's DoF.
    pub fn to_quat(self, dof: Dof) -> Quat {
        match (self, dof) {
            (_, Dof::Zero) => Quat::IDENTITY,
            (JointRot::Angle(a), Dof::One { axis }) => Quat::from_axis_angle(axis, a),
            (JointRot::Quat(q), _) => q,
            (JointRot::Angle(a), Dof::Three) => Quat::about_y(a),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub root_pos: Vec3,
    pub root_rot: Quat,
    /// One entry per non-root joint, in skeleton order (index `j - 1`).
    pub joint_rot: Vec<JointRot>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub fps: f64,
    pub skeleton: Skeleton,
    pub frames: Vec<Frame>,
    /// Free-form provenance (tool version, config hash, annotations).
    pub meta: BTreeMap<String, Value>,
}

impl MotionSequence {
    pub fn new(fps: f64, skeleton: Skeleton, frames: Vec<Frame>) -> Result<Self, MotionError> {
        let m = MotionSequence { fps, skeleton, frames, meta: BTreeMap::new() };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.fps
    }

    pub fn duration(&self) -> f64 {
        (self.frames.len().saturating_sub(1)) as f64 / self.fps
    }

    pub fn validate(&self) -> Result<(), MotionError> {
        self.skeleton.validate()?;
        if !(self.fps > 0.0) || !self.fps.is_finite() {
            return Err(MotionError::Validation { msg: "fps must be > 0".into(), joint: None, frame: None });
        }
        if self.frames.is_empty() {
            return Err(MotionError::Validation { msg: "motion has no frames".into(), joint: None, frame: None });
        }
        for (fi, f) in self.frames.iter().enumerate() {
            validate_frame(&self.skeleton, f).map_err(|e| match e {
                MotionError::Validation { msg, joint, .. } => MotionError::frame(fi, joint, msg),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Limit violations on 1-DoF joints as `(frame, joint)` pairs; these are
    /// warnings rather than errors.
    pub fn limit_warnings(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (fi, f) in self.frames.iter().enumerate() {
            for (k, r) in f.joint_rot.iter().enumerate() {
                let j = &self.skeleton.joints[k + 1];
                if let (JointRot::Angle(a), Some([lo, hi])) = (r, j.limits) {
                    if *a < lo || *a > hi {
                        out.push((fi, k + 1));
                    }
                }
            }
        }
        out
    }
}

pub fn validate_frame(skel: &Skeleton, f: &Frame) -> Result<(), MotionError> {
    let v = |msg: String, j: Option<usize>| MotionError::Validation { msg, joint: j, frame: None };
    if f.joint_rot.len() + 1 != skel.len() {
        return Err(v(
            format!("frame has {} joint rotations, skeleton needs {}", f.joint_rot.len(), skel.len() - 1),
            None,
        ));
    }
    if !f.root_pos.is_finite() || !f.root_rot.is_finite() {
        return Err(v("non-finite root pose".into(), Some(0)));
    }
    if (f.root_rot.norm() - 1.0).abs() > 1e-6 {
        return Err(v("root rotation is not a unit quaternion".into(), Some(0)));
    }
    for (k, r) in f.joint_rot.iter().enumerate() {
        let j = k + 1;
        match (skel.joints[j].dof, r) {
            (Dof::One { .. }, JointRot::Angle(a)) if a.is_finite() => {}
            (Dof::Three | Dof::Zero, JointRot::Quat(q)) if q.is_finite() && (q.norm() - 1.0).abs() <= 1e-6 => {}
            (Dof::Zero, JointRot::Angle(a)) if *a == 0.0 => {}
            _ => {
                return Err(v(
                    format!("rotation of joint '{}' does not match its DoF or is not finite/unit", skel.joints[j].name),
                    Some(j),
                ))
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// JSON schema

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMotion {
    fps: f64,
    skeleton: RawSkeleton,
    frames: Vec<RawFrame>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, Value>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct RawSkeleton {
    default_height: f64,
    joints: Vec<RawJoint>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawJoint {
    name: String,
    parent: i64,
    offset: [f64; 3],
    dof: RawDof,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    axis: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    limits: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum RawDof {
    Three,
    One,
    Zero,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFrame {
    root_pos: [f64; 3],
    root_rot: [f64; 4],
    joint_rot: Vec<RawRot>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum RawRot {
    Quat([f64; 4]),
    Angle(f64),
}

impl RawSkeleton {
    pub(crate) fn into_skeleton(self) -> Result<Skeleton, MotionError> {
        let mut joints = Vec::with_capacity(self.joints.len());
        for (i, rj) in self.joints.into_iter().enumerate() {
            let parent = match rj.parent {
                -1 => None,
                p if p >= 0 => Some(p as usize),
                p => return Err(MotionError::joint(i, format!("joint '{}' has invalid parent {p}", rj.name))),
            };
            let dof = match (rj.dof, rj.axis) {
                (RawDof::One, Some(a)) => Dof::One { axis: Vec3::from_array(a) },
                (RawDof::One, None) => {
                    return Err(MotionError::Schema(format!("joint '{}' has dof \"one\" but no axis", rj.name)))
                }
                (_, Some(_)) => {
                    return Err(MotionError::Schema(format!("joint '{}' has an axis but dof is not \"one\"", rj.name)))
                }
                (RawDof::Three, None) => Dof::Three,
                (RawDof::Zero, None) => Dof::Zero,
            };
            joints.push(Joint { name: rj.name, parent, offset: Vec3::from_array(rj.offset), dof, limits: rj.limits });
        }
        Skeleton::new(self.default_height, joints)
    }

    pub(crate) fn from_skeleton(s: &Skeleton) -> Self {
        RawSkeleton {
            default_height: s.default_height,
            joints: s
                .joints
                .iter()
                .map(|j| RawJoint {
                    name: j.name.clone(),
                    parent: j.parent.map(|p| p as i64).unwrap_or(-1),
                    offset: j.offset.to_array(),
                    dof: match j.dof {
                        Dof::Three => RawDof::Three,
                        Dof::One { .. } => RawDof::One,
                        Dof::Zero => RawDof::Zero,
                    },
                    axis: match j.dof {
                        Dof::One { axis } => Some(axis.to_array()),
                        _ => None,
                    },
                    limits: j.limits,
                })
                .collect(),
        }
    }
}

fn parse_value(text: &str) -> Result<Value, MotionError> {
    serde_json::from_str(text).map_err(|e| MotionError::Parse(e.to_string()))
}

pub fn motion_from_json(text: &str) -> Result<MotionSequence, MotionError> {
    let value = parse_value(text)?;
    let raw: RawMotion = serde_json::from_value(value).map_err(|e| MotionError::Schema(e.to_string()))?;
    let skeleton = raw.skeleton.into_skeleton()?;
    let frames = raw
        .frames
        .into_iter()
        .map(|f| Frame {
            root_pos: Vec3::from_array(f.root_pos),
            root_rot: Quat::from_array(f.root_rot),
            joint_rot: f
                .joint_rot
                .into_iter()
                .map(|r| match r {
                    RawRot::Quat(q) => JointRot::Quat(Quat::from_array(q)),
                    RawRot::Angle(a) => JointRot::Angle(a),
                })
                .collect(),
        })
        .collect();
    let m = MotionSequence { fps: raw.fps, skeleton, frames, meta: raw.meta };
    m.validate()?;
    Ok(m)
}

pub fn motion_to_json(m: &MotionSequence) -> String {
    let raw = RawMotion {
        fps: m.fps,
        skeleton: RawSkeleton::from_skeleton(&m.skeleton),
        frames: m
            .frames
            .iter()
            .map(|f| RawFrame {
                root_pos: f.root_pos.to_array(),
                root_rot: f.root_rot.to_array(),
                joint_rot: f
                    .joint_rot
                    .iter()
                    .map(|r| match r {
                        JointRot::Quat(q) => RawRot::Quat(q.to_array()),
                        JointRot::Angle(a) => RawRot::Angle(*a),
                    })
                    .collect(),
            })
            .collect(),
        meta: m.meta.clone(),
    };
    serde_json::to_string_pretty(&raw).expect("motion serialisation cannot fail")
}

pub fn skeleton_from_json(text: &str) -> Result<Skeleton, MotionError> {
    let value = parse_value(text)?;
    let raw: RawSkeleton = serde_json::from_value(value).map_err(|e| MotionError::Schema(e.to_string()))?;
    raw.into_skeleton()
}

pub fn skeleton_to_json(s: &Skeleton) -> String {
    serde_json::to_string_pretty(&RawSkeleton::from_skeleton(s)).expect("skeleton serialisation cannot fail")
}

fn read(path: &Path) -> Result<String, MotionError> {
    fs::read_to_string(path).map_err(|source| MotionError::Io { path: path.display().to_string(), source })
}

fn write(path: &Path, text: &str) -> Result<(), MotionError> {
    fs::write(path, text).map_err(|source| MotionError::Io { path: path.display().to_string(), source })
}

pub fn load_motion(path: impl AsRef<Path>) -> Result<MotionSequence, MotionError> {
    motion_from_json(&read(path.as_ref())?)
}

pub fn save_motion(m: &MotionSequence, path: impl AsRef<Path>) -> Result<(), MotionError> {
    write(path.as_ref(), &motion_to_json(m))
}

pub fn load_skeleton(path: impl AsRef<Path>) -> Result<Skeleton, MotionError> {
    skeleton_from_json(&read(path.as_ref())?)
}

// ---------------------------------------------------------------------------
// Resampling

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn lerp_vec(a: Vec3, b: Vec3, t: f64) -> Vec3 {
    Vec3::new(lerp(a.x, b.x, t), lerp(a.y, b.y, t), lerp(a.z, b.z, t))
}

pub fn interpolate_frame(a: &Frame, b: &Frame, t: f64) -> Frame {
    if t == 0.0 {
        return a.clone();
    }
    if t == 1.0 {
        return b.clone();
    }
    Frame {
        root_pos: lerp_vec(a.root_pos, b.root_pos, t),
        root_rot: a.root_rot.slerp(b.root_rot, t),
        joint_rot: a
            .joint_rot
            .iter()
            .zip(&b.joint_rot)
            .map(|(ra, rb)| match (ra, rb) {
                (JointRot::Angle(x), JointRot::Angle(y)) => JointRot::Angle(lerp(*x, *y, t)),
                (JointRot::Quat(x), JointRot::Quat(y)) => JointRot::Quat(x.slerp(*y, t)),
                _ => *ra,
            })
            .collect(),
    }
}

/// Resamples to `target_fps` over the same duration.
pub fn resample(m: &MotionSequence, target_fps: f64) -> MotionSequence {
    assert!(target_fps > 0.0, "target fps must be positive");
    if target_fps == m.fps {
        return m.clone();
    }
    let n = m.frames.len();
    let count = (m.duration() * target_fps).round() as usize + 1;
    let frames = (0..count)
        .map(|k| {
            // source position measured in source frames
            let s = (k as f64 * m.fps / target_fps).min((n - 1) as f64);
            let i = s.floor() as usize;
            let frac = s - i as f64;
            if i + 1 >= n || frac < 1e-12 {
                m.frames[i.min(n - 1)].clone()
            } else if frac > 1.0 - 1e-12 {
                m.frames[i + 1].clone()
            } else {
                interpolate_frame(&m.frames[i], &m.frames[i + 1], frac)
            }
        })
        .collect();
    MotionSequence { fps: target_fps, skeleton: m.skeleton.clone(), frames, meta: m.meta.clone() }
}

// ---------------------------------------------------------------------------
// Kinematics

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalPose {
    pub positions: Vec<Vec3>,
    pub rotations: Vec<Quat>,
}

pub fn forward_kinematics(skel: &Skeleton, f: &Frame) -> GlobalPose {
    let n = skel.len();
    let mut positions = Vec::with_capacity(n);
    let mut rotations = Vec::with_capacity(n);
    positions.push(f.root_pos);
    rotations.push(f.root_rot);
    for j in 1..n {
        let joint = &skel.joints[j];
        let p = joint.parent.expect("validated skeleton: non-root has parent");
        let local = f.joint_rot[j - 1].to_quat(joint.dof);
        let pos = positions[p] + rotations[p].rotate(joint.offset);
        let rot = quat_mul(rotations[p], local);
        positions.push(pos);
        rotations.push(rot);
    }
    GlobalPose { positions, rotations }
}

/// Identity pose with the root at `default_height`.
pub fn extract_tpose(skel: &Skeleton) -> Frame {
    Frame {
        root_pos: Vec3::new(0.0, 0.0, skel.default_height),
        root_rot: Quat::IDENTITY,
        joint_rot: skel.joints[1..]
            .iter()
            .map(|j| match j.dof {
                Dof::One { .. } => JointRot::Angle(0.0),
                _ => JointRot::Quat(Quat::IDENTITY),
            })
            .collect(),
    }
}

/// Local angular velocity between consecutive rotations, via the axis-angle of
/// the relative rotation divided by `dt`.
pub fn angular_velocity(q0: Quat, q1: Quat, dt: f64) -> Vec3 {
    relative_rotation(q0, q1).rotation_vector() * (1.0 / dt)
}
