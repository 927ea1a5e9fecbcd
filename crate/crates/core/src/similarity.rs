//! State similarity between a reference state `y` and a robot state `s`.
//!
//! Both metrics are weighted sums of exponential kernels over squared
//! differences of joint rotations, joint velocities, end-effector positions
//! (relative to the root) and the global root position. The quadruped variant
//! additionally gates everything by root-orientation agreement.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::motion_io::{angular_velocity, forward_kinematics, JointRot, MotionSequence};
use crate::rotmath::{Quat, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimilarityError {
    #[error("descriptor dimension mismatch in {0}")]
    DimMismatch(&'static str),
}

/// Per-joint angular velocity; 3-DoF joints carry a vector, 1-DoF a scalar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JointVel {
    Vec(Vec3),
    Scalar(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateDescriptor {
    pub joint_rot: Vec<JointRot>,
    pub joint_vel: Vec<JointVel>,
    pub ee_rel_pos: Vec<Vec3>,
    pub root_pos: Vec3,
    pub root_rot: Quat,
}

impl StateDescriptor {
    /// Canonicalises every quaternion in place.
    pub fn canonicalized(mut self) -> Self {
        for r in &mut self.joint_rot {
            if let JointRot::Quat(q) = r {
                *q = q.canonicalize();
            }
        }
        self.root_rot = self.root_rot.canonicalize();
        self
    }

    /// Flat feature vector. With `drop_root_x` the absolute horizontal root
    /// coordinate is omitted.
    pub fn flatten(&self, drop_root_x: bool) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.feature_len(drop_root_x));
        for r in &self.joint_rot {
            match r {
                JointRot::Quat(q) => out.extend_from_slice(&q.canonicalize().to_array()),
                JointRot::Angle(a) => out.push(*a),
            }
        }
        for v in &self.joint_vel {
            match v {
                JointVel::Vec(w) => out.extend_from_slice(&w.to_array()),
                JointVel::Scalar(w) => out.push(*w),
            }
        }
        for p in &self.ee_rel_pos {
            out.extend_from_slice(&p.to_array());
        }
        if !drop_root_x {
            out.push(self.root_pos.x);
        }
        out.push(self.root_pos.y);
        out.push(self.root_pos.z);
        out.extend_from_slice(&self.root_rot.canonicalize().to_array());
        out
    }

    pub fn feature_len(&self, drop_root_x: bool) -> usize {
        let rot: usize = self.joint_rot.iter().map(|r| if matches!(r, JointRot::Quat(_)) { 4 } else { 1 }).sum();
        let vel: usize = self.joint_vel.iter().map(|v| if matches!(v, JointVel::Vec(_)) { 3 } else { 1 }).sum();
        rot + vel + 3 * self.ee_rel_pos.len() + if drop_root_x { 2 } else { 3 } + 4
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Humanoid,
    Quadruped,
}

/// Term weights and kernel coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimWeights {
    pub pose: f64,
    pub vel: f64,
    pub ee: f64,
    pub root: f64,
    pub k_pose: f64,
    pub k_vel: f64,
    pub k_ee: f64,
    pub k_root: f64,
    /// Quadruped metric: `rot_inner * r_rot * inner + rot_outer * r_rot`.
    pub rot_inner: f64,
    pub rot_outer: f64,
}

impl Default for SimWeights {
    fn default() -> Self {
        SimWeights {
            pose: 0.65,
            vel: 0.1,
            ee: 0.15,
            root: 0.1,
            k_pose: 2.0,
            k_vel: 0.1,
            k_ee: 40.0,
            k_root: 10.0,
            rot_inner: 0.8,
            rot_outer: 0.2,
        }
    }
}

fn rot_sq_diff(a: &JointRot, b: &JointRot) -> f64 {
    match (a, b) {
        (JointRot::Angle(x), JointRot::Angle(y)) => (x - y) * (x - y),
        (JointRot::Quat(p), JointRot::Quat(q)) => {
            let (p, q) = (p.canonicalize(), q.canonicalize());
            let d = [p.w - q.w, p.x - q.x, p.y - q.y, p.z - q.z];
            d.iter().map(|v| v * v).sum()
        }
        // mixed representations compare as quaternions about y
        (JointRot::Angle(x), q @ JointRot::Quat(_)) | (q @ JointRot::Quat(_), JointRot::Angle(x)) => {
            rot_sq_diff(&JointRot::Quat(Quat::about_y(*x)), q)
        }
    }
}

fn vel_sq_diff(a: &JointVel, b: &JointVel) -> f64 {
    match (a, b) {
        (JointVel::Scalar(x), JointVel::Scalar(y)) => (x - y) * (x - y),
        (JointVel::Vec(x), JointVel::Vec(y)) => (*x - *y).norm_sq(),
        (JointVel::Scalar(x), JointVel::Vec(v)) | (JointVel::Vec(v), JointVel::Scalar(x)) => {
            (*v - Vec3::Y * *x).norm_sq()
        }
    }
}

fn check_dims(y: &StateDescriptor, s: &StateDescriptor) -> Result<(), SimilarityError> {
    if y.joint_rot.len() != s.joint_rot.len() {
        return Err(SimilarityError::DimMismatch("joint_rot"));
    }
    if y.joint_vel.len() != s.joint_vel.len() {
        return Err(SimilarityError::DimMismatch("joint_vel"));
    }
    if y.ee_rel_pos.len() != s.ee_rel_pos.len() {
        return Err(SimilarityError::DimMismatch("ee_rel_pos"));
    }
    Ok(())
}

/// The four exponential kernel values `(r_p, r_v, r_e, r_r)`.
pub fn kernel_terms(y: &StateDescriptor, s: &StateDescriptor, w: &SimWeights) -> Result<[f64; 4], SimilarityError> {
    check_dims(y, s)?;
    let dq: f64 = y.joint_rot.iter().zip(&s.joint_rot).map(|(a, b)| rot_sq_diff(a, b)).sum();
    let dv: f64 = y.joint_vel.iter().zip(&s.joint_vel).map(|(a, b)| vel_sq_diff(a, b)).sum();
    let de: f64 = y.ee_rel_pos.iter().zip(&s.ee_rel_pos).map(|(a, b)| (*a - *b).norm_sq()).sum();
    let dr = (y.root_pos - s.root_pos).norm_sq();
    Ok([
        (-w.k_pose * dq).exp(),
        (-w.k_vel * dv).exp(),
        (-w.k_ee * de).exp(),
        (-w.k_root * dr).exp(),
    ])
}

pub fn sim_humanoid(y: &StateDescriptor, s: &StateDescriptor, w: &SimWeights) -> Result<f64, SimilarityError> {
    let [rp, rv, re, rr] = kernel_terms(y, s, w)?;
    Ok(w.pose * rp + w.vel * rv + w.ee * re + w.root * rr)
}

pub fn sim_quadruped(y: &StateDescriptor, s: &StateDescriptor, w: &SimWeights) -> Result<f64, SimilarityError> {
    let inner = sim_humanoid(y, s, w)?;
    let r_rot = s.root_rot.canonicalize().dot(y.root_rot.canonicalize()).max(0.0);
    Ok(w.rot_inner * r_rot * inner + w.rot_outer * r_rot)
}

pub fn similarity(metric: Metric, y: &StateDescriptor, s: &StateDescriptor, w: &SimWeights) -> Result<f64, SimilarityError> {
    match metric {
        Metric::Humanoid => sim_humanoid(y, s, w),
        Metric::Quadruped => sim_quadruped(y, s, w),
    }
}

/// Dense `(H+1) x (T+1)` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SimMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl SimMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        assert!(rows.iter().all(|x| x.len() == c), "ragged similarity matrix");
        SimMatrix { rows: r, cols: c, data: rows.into_iter().flatten().collect() }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }
}

pub fn similarity_matrix(
    metric: Metric,
    reference: &[StateDescriptor],
    traj: &[StateDescriptor],
    w: &SimWeights,
) -> Result<SimMatrix, SimilarityError> {
    let mut data = Vec::with_capacity(reference.len() * traj.len());
    for y in reference {
        for s in traj {
            data.push(similarity(metric, y, s, w)?);
        }
    }
    Ok(SimMatrix { rows: reference.len(), cols: traj.len(), data })
}

/// Descriptors for every frame of a motion. Velocities are finite
/// differences to the next frame (the last frame reuses the previous
/// difference); end effectors are skeleton joints named in `ee_joints`.
pub fn descriptors_from_motion(m: &MotionSequence, ee_joints: &[usize]) -> Vec<StateDescriptor> {
    let dt = m.dt();
    let n = m.frames.len();
    let poses: Vec<_> = m.frames.iter().map(|f| forward_kinematics(&m.skeleton, f)).collect();
    (0..n)
        .map(|i| {
            let f = &m.frames[i];
            let (a, b) = if n < 2 {
                (i, i)
            } else if i + 1 < n {
                (i, i + 1)
            } else {
                (i - 1, i)
            };
            let joint_vel = (1..m.skeleton.len())
                .map(|j| {
                    let (ra, rb) = (&m.frames[a].joint_rot[j - 1], &m.frames[b].joint_rot[j - 1]);
                    match (ra, rb) {
                        _ if a == b => match ra {
                            JointRot::Angle(_) => JointVel::Scalar(0.0),
                            JointRot::Quat(_) => JointVel::Vec(Vec3::ZERO),
                        },
                        (JointRot::Angle(x), JointRot::Angle(y)) => JointVel::Scalar((y - x) / dt),
                        (JointRot::Quat(x), JointRot::Quat(y)) => JointVel::Vec(angular_velocity(*x, *y, dt)),
                        _ => JointVel::Scalar(0.0),
                    }
                })
                .collect();
            let root = poses[i].positions[0];
            let inv = f.root_rot.conj();
            StateDescriptor {
                joint_rot: f.joint_rot.clone(),
                joint_vel,
                ee_rel_pos: ee_joints.iter().map(|&e| inv.rotate(poses[i].positions[e] - root)).collect(),
                root_pos: f.root_pos,
                root_rot: f.root_rot,
            }
            .canonicalized()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desc() -> StateDescriptor {
        StateDescriptor {
            joint_rot: vec![JointRot::Quat(Quat::about_x(0.3)), JointRot::Angle(0.5)],
            joint_vel: vec![JointVel::Vec(Vec3::new(0.1, 0.2, 0.3)), JointVel::Scalar(-1.0)],
            ee_rel_pos: vec![Vec3::new(0.1, 0.0, -0.8)],
            root_pos: Vec3::new(0.0, 0.0, 0.9),
            root_rot: Quat::IDENTITY,
        }
    }

    #[test]
    fn identical_is_one() {
        let w = SimWeights::default();
        assert_eq!(sim_humanoid(&desc(), &desc(), &w).unwrap(), 1.0);
        assert_eq!(sim_quadruped(&desc(), &desc(), &w).unwrap(), 1.0);
    }

    #[test]
    fn pose_term_closed_form() {
        let w = SimWeights::default();
        let mut s = desc();
        s.joint_rot[1] = JointRot::Angle(0.5 + 0.5f64.sqrt());
        let v = sim_humanoid(&desc(), &s, &w).unwrap();
        assert!((v - 0.589122).abs() < 1e-6, "{v}");
        assert!((v - (0.65 * (-1.0f64).exp() + 0.35)).abs() < 1e-12);
    }

    #[test]
    fn root_term_closed_form() {
        let w = SimWeights::default();
        let mut s = desc();
        s.root_pos.x += 0.1;
        let v = sim_humanoid(&desc(), &s, &w).unwrap();
        assert!((v - 0.990484).abs() < 1e-6, "{v}");
    }

    #[test]
    fn quadruped_root_gate() {
        let w = SimWeights::default();
        let mut s = desc();
        // quaternion dot exactly zero: rotation by pi about x vs identity
        s.root_rot = Quat::new(0.0, 1.0, 0.0, 0.0);
        assert_eq!(sim_quadruped(&desc(), &s, &w).unwrap(), 0.0);
        s.root_rot = Quat::about_y(std::f64::consts::FRAC_PI_2);
        let expected = (std::f64::consts::FRAC_PI_4).cos();
        let v = sim_quadruped(&desc(), &s, &w).unwrap();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn dim_mismatch() {
        let mut s = desc();
        s.ee_rel_pos.clear();
        assert_eq!(
            sim_humanoid(&desc(), &s, &SimWeights::default()),
            Err(SimilarityError::DimMismatch("ee_rel_pos"))
        );
    }

    #[test]
    fn matrix_one_by_one() {
        let w = SimWeights::default();
        let mut s = desc();
        s.root_pos.z -= 0.2;
        let m = similarity_matrix(Metric::Humanoid, &[desc()], &[s.clone()], &w).unwrap();
        assert_eq!((m.rows, m.cols), (1, 1));
        assert_eq!(m.get(0, 0), sim_humanoid(&desc(), &s, &w).unwrap());
    }

    #[test]
    fn flatten_length_matches() {
        let d = desc();
        assert_eq!(d.flatten(false).len(), d.feature_len(false));
        assert_eq!(d.flatten(true).len(), d.feature_len(true));
    }
}
