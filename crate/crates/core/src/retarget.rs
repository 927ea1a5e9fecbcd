//! Motion retargeting between skeletons: joint maps, T-pose-relative rotation
//! transfer, hinge reduction of two-bone chains and sagittal projection.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::motion_io::{extract_tpose, forward_kinematics, Dof, Frame, JointRot, MotionSequence, Skeleton};
use crate::rotmath::{
    decompose_about_axes, quat_mul, relative_rotation, rotation_between_with_hint, Quat, RotError, Vec3,
};

#[derive(Debug, thiserror::Error)]
pub enum RetargetError {
    #[error("mapping error: {0}")]
    Mapping(String),
    #[error("dof mismatch: {0}")]
    DofMismatch(String),
    #[error("joint map parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("rotation error: {0}")]
    Rotation(#[from] RotError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapMode {
    Full,
    Partial,
    RootOnly,
}

/// Target side of a pair: one joint, or several 1-DoF joints that share one
/// source rotation split by successive rotations about their axes in list
/// order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PairTarget {
    One(String),
    Split(Vec<String>),
}

impl PairTarget {
    pub fn names(&self) -> Vec<&str> {
        match self {
            PairTarget::One(s) => vec![s.as_str()],
            PairTarget::Split(v) => v.iter().map(|s| s.as_str()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapPair {
    pub src: String,
    pub tgt: PairTarget,
}

/// A source chain `upper -> hinge -> end` collapsed onto a target pair
/// `tgt_upper` (any DoF) and `tgt_hinge` (1-DoF).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reduction {
    pub src_upper: String,
    pub src_hinge: String,
    pub src_end: String,
    pub tgt_upper: String,
    pub tgt_hinge: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointMap {
    pub mode: MapMode,
    /// Target joints driven in partial mode.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub targets: Vec<String>,
    /// Scale applied to root displacement; heights are taken relative to
    /// each skeleton's default height. Defaults to the ratio of default
    /// heights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root_height_scale: Option<f64>,
    #[serde(default)]
    pub pairs: Vec<MapPair>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reductions: Vec<Reduction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedJoint {
    pub joint: String,
    pub max_residual_hand_error: f64,
    /// Frames where the chain could not reach the source end effector.
    pub unreachable_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetargetReport {
    pub dropped_source_joints: Vec<String>,
    pub untouched_target_joints: Vec<String>,
    pub reduced_joints: Vec<ReducedJoint>,
    pub frames_processed: usize,
}

impl JointMap {
    pub fn full(pairs: &[(&str, &str)]) -> Self {
        JointMap {
            mode: MapMode::Full,
            targets: Vec::new(),
            root_height_scale: None,
            pairs: pairs.iter().map(|(s, t)| MapPair { src: s.to_string(), tgt: PairTarget::One(t.to_string()) }).collect(),
            reductions: Vec::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, RetargetError> {
        let m: JointMap = serde_json::from_str(text).map_err(|e| RetargetError::Parse(e.to_string()))?;
        if m.mode == MapMode::Partial && m.targets.is_empty() {
            return Err(RetargetError::Parse("partial mode requires a non-empty \"targets\" list".into()));
        }
        if m.mode != MapMode::Partial && !m.targets.is_empty() {
            return Err(RetargetError::Parse("\"targets\" is only valid in partial mode".into()));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("joint map serialises")
    }

    pub fn load(path: &Path) -> Result<Self, RetargetError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Checks names against both skeletons and that no target joint is
    /// driven twice.
    pub fn validate(&self, src: &Skeleton, tgt: &Skeleton) -> Result<(), RetargetError> {
        let need = |sk: &Skeleton, n: &str, side: &str| {
            sk.index_of(n).ok_or_else(|| RetargetError::Mapping(format!("{side} joint '{n}' not found")))
        };
        let mut seen = BTreeSet::new();
        let mut claim = |n: &str| {
            if seen.insert(n.to_string()) {
                Ok(())
            } else {
                Err(RetargetError::Mapping(format!("target joint '{n}' appears more than once")))
            }
        };
        for p in &self.pairs {
            need(src, &p.src, "source")?;
            let names = p.tgt.names();
            for t in &names {
                let j = need(tgt, t, "target")?;
                if j == 0 {
                    return Err(RetargetError::Mapping(format!("target root '{t}' cannot be a mapped joint")));
                }
                if names.len() > 1 && !matches!(tgt.joints[j].dof, Dof::One { .. }) {
                    return Err(RetargetError::DofMismatch(format!("split target '{t}' must be a 1-DoF joint")));
                }
                claim(t)?;
            }
            if names.len() > 3 {
                return Err(RetargetError::Mapping("a split pair drives at most three joints".into()));
            }
        }
        for r in &self.reductions {
            for n in [&r.src_upper, &r.src_hinge, &r.src_end] {
                need(src, n, "source")?;
            }
            let h = need(tgt, &r.tgt_hinge, "target")?;
            need(tgt, &r.tgt_upper, "target")?;
            if !matches!(tgt.joints[h].dof, Dof::One { .. }) {
                return Err(RetargetError::DofMismatch(format!("reduction hinge '{}' must be a 1-DoF joint", r.tgt_hinge)));
            }
            claim(&r.tgt_upper)?;
            claim(&r.tgt_hinge)?;
        }
        for t in &self.targets {
            need(tgt, t, "target")?;
        }
        Ok(())
    }
}

/// Local rotation written into a target joint of the given DoF.
fn joint_value(q: Quat, dof: Dof) -> JointRot {
    match dof {
        Dof::Three => JointRot::Quat(q.canonicalize()),
        Dof::One { axis } => JointRot::Angle(q.twist_angle(axis)),
        Dof::Zero => JointRot::Quat(Quat::IDENTITY),
    }
}

fn local_quat(sk: &Skeleton, f: &Frame, j: usize) -> Quat {
    f.joint_rot[j - 1].to_quat(sk.joints[j].dof)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneDofReduction {
    pub hinge_angle: f64,
    /// Local rotation for the upper joint (relative to its parent).
    pub upper_rot: Quat,
    /// Distance between the reduced chain's end effector and the source one.
    pub residual: f64,
    pub unreachable: bool,
}

fn ancestors_of(sk: &Skeleton, j: usize) -> Vec<usize> {
    let mut v = Vec::new();
    let mut k = sk.joints[j].parent;
    while let Some(p) = k {
        v.push(p);
        k = sk.joints[p].parent;
    }
    v
}

/// Collapses the source chain `upper -> hinge -> end` onto a hinge rotating
/// about `tgt_axis` (in the upper link's frame). Segment vectors are the
/// source T-pose offsets unless `lengths` supplies target ones.
pub fn reduce_to_one_dof(
    skel_src: &Skeleton,
    frame: &Frame,
    upper: usize,
    hinge: usize,
    end: usize,
    tgt_axis: Vec3,
) -> Result<OneDofReduction, RetargetError> {
    reduce_to_one_dof_with(skel_src, frame, upper, hinge, end, tgt_axis, None, None)
}

#[allow(clippy::too_many_arguments)]
pub fn reduce_to_one_dof_with(
    skel_src: &Skeleton,
    frame: &Frame,
    upper: usize,
    hinge: usize,
    end: usize,
    tgt_axis: Vec3,
    segments: Option<(Vec3, Vec3)>,
    hinge_limits: Option<[f64; 2]>,
) -> Result<OneDofReduction, RetargetError> {
    if skel_src.joints[hinge].parent != Some(upper) || !ancestors_of(skel_src, end).contains(&hinge) {
        return Err(RetargetError::Mapping(format!(
            "joints {upper}, {hinge}, {end} do not form a chain in the source skeleton"
        )));
    }
    let pose = forward_kinematics(skel_src, frame);
    let parent_rot = skel_src.joints[upper].parent.map(|p| pose.rotations[p]).unwrap_or(frame.root_rot);
    let inv = parent_rot.conj();
    // source vectors in the upper joint's parent frame
    let d1 = inv.rotate(pose.positions[hinge] - pose.positions[upper]);
    let w = inv.rotate(pose.positions[end] - pose.positions[upper]);
    let (o1, o2) = segments.unwrap_or_else(|| {
        // end offset accumulated from the hinge in the T-pose
        let tp = forward_kinematics(skel_src, &extract_tpose(skel_src));
        let h = skel_src.joints[hinge].offset;
        (h, tp.rotations[hinge].conj().rotate(tp.positions[end] - tp.positions[hinge]))
    });
    let a = tgt_axis.normalized()?;

    // |o1 + R(a, t) o2|^2 = |w|^2 solved for t
    let ao1 = a.dot(o1);
    let ao2 = a.dot(o2);
    let p = o1.dot(o2) - ao1 * ao2;
    let q = o1.dot(a.cross(o2));
    let c = ao1 * ao2;
    let k = 0.5 * (w.norm_sq() - o1.norm_sq() - o2.norm_sq()) - c;
    let amp = p.hypot(q);
    let phi = q.atan2(p);
    let max_reach = (o1.norm_sq() + o2.norm_sq() + 2.0 * (amp + c)).max(0.0).sqrt();
    let unreachable = w.norm() > max_reach + 1e-9;
    let ratio = if amp > 0.0 { (k / amp).clamp(-1.0, 1.0) } else { 1.0 };
    let delta = ratio.acos();
    let candidates = [phi + delta, phi - delta];
    let within = |t: f64| hinge_limits.map_or(true, |[lo, hi]| t >= lo - 1e-12 && t <= hi + 1e-12);
    let wrap = crate::rotmath::wrap_angle;
    let mut hinge_angle = wrap(candidates[0]);
    let alt = wrap(candidates[1]);
    if !within(hinge_angle) && within(alt) || (within(alt) && within(hinge_angle) && alt.abs() < hinge_angle.abs() - 1e-12)
    {
        hinge_angle = alt;
    }

    let chain = o1 + Quat::from_axis_angle(a, hinge_angle).rotate(o2);
    // align the chain with the hand vector, then spin about it so the hinge
    // lands on the source hinge
    let q1 = rotation_between_with_hint(chain, w, a)?;
    let wn = w.normalized()?;
    let e2 = q1.rotate(o1);
    let perp = |v: Vec3| v - wn * v.dot(wn);
    let (pe, pf) = (perp(e2), perp(d1));
    let upper_rot = if pe.norm() > 1e-12 && pf.norm() > 1e-12 {
        let ang = pe.cross(pf).dot(wn).atan2(pe.dot(pf));
        quat_mul(Quat::from_axis_angle(wn, ang), q1)
    } else {
        q1
    };
    let residual = (upper_rot.rotate(chain) - w).norm();
    Ok(OneDofReduction { hinge_angle, upper_rot: upper_rot.canonicalize(), residual, unreachable })
}

/// Transfers `src` onto `tgt_skel` following `map`.
pub fn retarget_motion(
    src: &MotionSequence,
    tgt_skel: &Skeleton,
    map: &JointMap,
) -> Result<(MotionSequence, RetargetReport), RetargetError> {
    let ss = &src.skeleton;
    map.validate(ss, tgt_skel)?;
    let src_t = extract_tpose(ss);
    let tgt_t = extract_tpose(tgt_skel);
    let scale = map.root_height_scale.unwrap_or(tgt_skel.default_height / ss.default_height);

    let active = |t: &str| match map.mode {
        MapMode::Full => true,
        MapMode::RootOnly => false,
        MapMode::Partial => map.targets.iter().any(|x| x == t),
    };

    let mut driven = BTreeSet::new();
    let mut used_src = BTreeSet::new();
    for p in &map.pairs {
        if p.tgt.names().iter().any(|t| active(t)) {
            used_src.insert(p.src.clone());
            driven.extend(p.tgt.names().into_iter().filter(|t| active(t)).map(String::from));
        }
    }
    for r in &map.reductions {
        if active(&r.tgt_upper) || active(&r.tgt_hinge) {
            used_src.extend([r.src_upper.clone(), r.src_hinge.clone(), r.src_end.clone()]);
            driven.extend([&r.tgt_upper, &r.tgt_hinge].into_iter().filter(|t| active(t)).cloned());
        }
    }
    let mut report = RetargetReport {
        dropped_source_joints: ss.joints[1..].iter().map(|j| j.name.clone()).filter(|n| !used_src.contains(n)).collect(),
        untouched_target_joints: tgt_skel.joints[1..]
            .iter()
            .map(|j| j.name.clone())
            .filter(|n| !driven.contains(n))
            .collect(),
        reduced_joints: Vec::new(),
        frames_processed: src.frames.len(),
    };
    let mut residuals: BTreeMap<String, (f64, usize)> = BTreeMap::new();

    let mut frames = Vec::with_capacity(src.frames.len());
    for f in &src.frames {
        let mut out = tgt_t.clone();
        let r = f.root_pos;
        out.root_pos = Vec3::new(scale * r.x, scale * r.y, tgt_skel.default_height + scale * (r.z - ss.default_height));
        out.root_rot = f.root_rot;
        for p in &map.pairs {
            let sj = ss.index_of(&p.src).unwrap();
            let rel = relative_rotation(local_quat(ss, &src_t, sj), local_quat(ss, f, sj));
            match &p.tgt {
                PairTarget::One(t) => {
                    if !active(t) {
                        continue;
                    }
                    let tj = tgt_skel.index_of(t).unwrap();
                    let q = quat_mul(local_quat(tgt_skel, &tgt_t, tj), rel);
                    out.joint_rot[tj - 1] = joint_value(q, tgt_skel.joints[tj].dof);
                }
                PairTarget::Split(ts) => {
                    let idx: Vec<usize> = ts.iter().map(|t| tgt_skel.index_of(t).unwrap()).collect();
                    let axes: Vec<Vec3> = idx
                        .iter()
                        .map(|&j| match tgt_skel.joints[j].dof {
                            Dof::One { axis } => axis,
                            _ => unreachable!("validated as 1-DoF"),
                        })
                        .collect();
                    let angles = match axes.len() {
                        1 => [rel.twist_angle(axes[0]), 0.0, 0.0],
                        _ => decompose_about_axes(rel, axes[0], axes[1])?,
                    };
                    for (k, (&tj, t)) in idx.iter().zip(ts).enumerate() {
                        if active(t) {
                            out.joint_rot[tj - 1] = JointRot::Angle(angles[k]);
                        }
                    }
                }
            }
        }
        for rd in &map.reductions {
            if !(active(&rd.tgt_upper) || active(&rd.tgt_hinge)) {
                continue;
            }
            let (u, h, e) = (ss.index_of(&rd.src_upper).unwrap(), ss.index_of(&rd.src_hinge).unwrap(), ss.index_of(&rd.src_end).unwrap());
            let (tu, th) = (tgt_skel.index_of(&rd.tgt_upper).unwrap(), tgt_skel.index_of(&rd.tgt_hinge).unwrap());
            let axis = match tgt_skel.joints[th].dof {
                Dof::One { axis } => axis,
                _ => unreachable!("validated as 1-DoF"),
            };
            let red = reduce_to_one_dof_with(ss, f, u, h, e, axis, None, tgt_skel.joints[th].limits)?;
            if active(&rd.tgt_upper) {
                out.joint_rot[tu - 1] = joint_value(red.upper_rot, tgt_skel.joints[tu].dof);
            }
            if active(&rd.tgt_hinge) {
                out.joint_rot[th - 1] = JointRot::Angle(red.hinge_angle);
            }
            let ent = residuals.entry(rd.tgt_hinge.clone()).or_insert((0.0, 0));
            ent.0 = ent.0.max(red.residual);
            ent.1 += red.unreachable as usize;
        }
        frames.push(out);
    }
    report.reduced_joints = residuals
        .into_iter()
        .map(|(joint, (r, u))| ReducedJoint { joint, max_residual_hand_error: r, unreachable_frames: u })
        .collect();
    let mut m = MotionSequence::new(src.fps, tgt_skel.clone(), frames)
        .map_err(|e| RetargetError::Mapping(e.to_string()))?;
    m.meta = src.meta.clone();
    Ok((m, report))
}

/// Reduces a 3D motion to the sagittal plane of `planar_skel`: each joint is
/// looked up by name and keeps only its twist about the planar joint axis;
/// the root keeps `(x, z)` and its pitch about `+y`.
pub fn project_sagittal(m: &MotionSequence, planar_skel: &Skeleton) -> Result<MotionSequence, RetargetError> {
    let mut frames = Vec::with_capacity(m.frames.len());
    let lookup: Vec<Option<usize>> = planar_skel.joints.iter().map(|j| m.skeleton.index_of(&j.name)).collect();
    for f in &m.frames {
        let mut out = extract_tpose(planar_skel);
        out.root_pos = Vec3::new(f.root_pos.x, 0.0, f.root_pos.z);
        out.root_rot = Quat::about_y(f.root_rot.twist_angle(Vec3::Y)).canonicalize();
        for (j, sj) in lookup.iter().enumerate().skip(1) {
            let Some(sj) = *sj else { continue };
            if sj == 0 {
                continue;
            }
            let dof = planar_skel.joints[j].dof;
            out.joint_rot[j - 1] = match (dof, m.frames[0].joint_rot.get(sj - 1).map(|_| f.joint_rot[sj - 1])) {
                (Dof::One { axis }, Some(JointRot::Angle(a))) => match m.skeleton.joints[sj].dof {
                    Dof::One { axis: src_axis } if (src_axis - axis).norm() < 1e-12 => JointRot::Angle(a),
                    sd => JointRot::Angle(JointRot::Angle(a).to_quat(sd).twist_angle(axis)),
                },
                (Dof::One { axis }, Some(JointRot::Quat(q))) => JointRot::Angle(q.twist_angle(axis)),
                (Dof::Three, Some(r)) => JointRot::Quat(r.to_quat(m.skeleton.joints[sj].dof).canonicalize()),
                _ => continue,
            };
        }
        frames.push(out);
    }
    let mut out = MotionSequence::new(m.fps, planar_skel.clone(), frames).map_err(|e| RetargetError::Mapping(e.to_string()))?;
    out.meta = m.meta.clone();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion_io::Joint;

    fn arm() -> Skeleton {
        let j = |name: &str, parent: Option<usize>, off: Vec3, dof: Dof| Joint {
            name: name.into(),
            parent,
            offset: off,
            dof,
            limits: None,
        };
        Skeleton::new(
            1.0,
            vec![
                j("root", None, Vec3::ZERO, Dof::Three),
                j("shoulder", Some(0), Vec3::new(0.2, 0.0, 0.3), Dof::Three),
                j("elbow", Some(1), Vec3::new(0.3, 0.0, 0.0), Dof::Three),
                j("hand", Some(2), Vec3::new(0.3, 0.0, 0.0), Dof::Zero),
            ],
        )
        .unwrap()
    }

    fn frame(sh: Quat, el: Quat) -> Frame {
        Frame {
            root_pos: Vec3::new(0.0, 0.0, 1.0),
            root_rot: Quat::IDENTITY,
            joint_rot: vec![JointRot::Quat(sh), JointRot::Quat(el), JointRot::Quat(Quat::IDENTITY)],
        }
    }

    #[test]
    fn straight_arm_has_zero_hinge() {
        let sk = arm();
        let f = frame(Quat::about_z(0.4), Quat::IDENTITY);
        let r = reduce_to_one_dof(&sk, &f, 1, 2, 3, Vec3::Y).unwrap();
        assert!(r.hinge_angle.abs() < 1e-7);
        assert!(r.residual < 1e-9);
        let dir = r.upper_rot.rotate(Vec3::X);
        assert!((dir - Quat::about_z(0.4).rotate(Vec3::X)).norm() < 1e-7);
    }

    #[test]
    fn perpendicular_forearm() {
        let sk = arm();
        let f = frame(Quat::IDENTITY, Quat::about_z(std::f64::consts::FRAC_PI_2));
        let r = reduce_to_one_dof(&sk, &f, 1, 2, 3, Vec3::Y).unwrap();
        assert!((r.hinge_angle.abs() - std::f64::consts::FRAC_PI_2).abs() < 1e-9);
        assert!(r.residual < 1e-9);
    }

    #[test]
    fn not_a_chain() {
        let sk = arm();
        let f = frame(Quat::IDENTITY, Quat::IDENTITY);
        assert!(reduce_to_one_dof(&sk, &f, 2, 1, 3, Vec3::Y).is_err());
    }

    #[test]
    fn sagittal_examples() {
        let sk = arm();
        let mut planar_joints = sk.joints.clone();
        for j in &mut planar_joints[1..3] {
            j.dof = Dof::One { axis: Vec3::Y };
        }
        let planar = Skeleton::new(1.0, planar_joints).unwrap();
        let cases = [
            (Quat::about_y(0.7), 0.7),
            (Quat::about_x(0.7), 0.0),
        ];
        for (q, want) in cases {
            let m = MotionSequence::new(30.0, sk.clone(), vec![frame(q, Quat::IDENTITY)]).unwrap();
            let p = project_sagittal(&m, &planar).unwrap();
            match p.frames[0].joint_rot[0] {
                JointRot::Angle(a) => assert!((a - want).abs() < 1e-9),
                _ => panic!(),
            }
        }
    }

    #[test]
    fn map_json_round_trip() {
        let text = r#"{"mode":"partial","targets":["elbow"],"root_height_scale":0.5,
            "pairs":[{"src":"shoulder","tgt":"shoulder"},{"src":"elbow","tgt":["elbow"]}]}"#;
        let m = JointMap::from_json(text).unwrap();
        assert_eq!(m.mode, MapMode::Partial);
        assert_eq!(JointMap::from_json(&m.to_json()).unwrap(), m);
        assert!(JointMap::from_json(r#"{"mode":"partial","pairs":[]}"#).is_err());
    }

    #[test]
    fn unknown_names_rejected() {
        let sk = arm();
        let m = JointMap::full(&[("shoulder", "nope")]);
        assert!(matches!(m.validate(&sk, &sk), Err(RetargetError::Mapping(_))));
        let dup = JointMap::full(&[("shoulder", "elbow"), ("elbow", "elbow")]);
        assert!(dup.validate(&sk, &sk).is_err());
    }
}
