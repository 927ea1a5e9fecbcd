//! Planar robot description: a tree of links joined by revolute joints whose
//! axes are perpendicular to the x-z plane.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::motion_io::{Dof, Joint, Skeleton};
use crate::rotmath::Vec3;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid model: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RobotKind {
    #[default]
    Humanoid,
    Quadruped,
}

/// One rigid link. Vectors are `[x, z]` in the link's own frame; the joint
/// that moves the link sits at the frame origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub name: String,
    /// Parent link index; `-1` marks the root.
    #[serde(default = "root_parent")]
    pub parent: i64,
    /// Joint position in the parent frame.
    #[serde(default)]
    pub offset: [f64; 2],
    /// Far end of the link; its norm is the link length.
    pub tip: [f64; 2],
    pub mass: f64,
    /// Rotational inertia about the centre of mass. Defaults to a slender rod.
    #[serde(default)]
    pub inertia: Option<f64>,
    /// Centre of mass; defaults to the midpoint of the link.
    #[serde(default)]
    pub com: Option<[f64; 2]>,
    #[serde(default)]
    pub kp: f64,
    #[serde(default)]
    pub kd: f64,
    #[serde(default = "unlimited")]
    pub torque_limit: f64,
    #[serde(default = "wide_limits")]
    pub limits: [f64; 2],
    /// Ground contact samples; defaults to the tip (plus the origin for the
    /// root link).
    #[serde(default)]
    pub contact_points: Option<Vec<[f64; 2]>>,
    /// Contact with the terrain does not end the episode.
    #[serde(default)]
    pub allowed_contact: bool,
    /// Contact is allowed when the task permits hand support.
    #[serde(default)]
    pub hand: bool,
    /// Tip is reported as an end effector.
    #[serde(default)]
    pub end_effector: bool,
    /// Counted by the slip penalty.
    #[serde(default)]
    pub foot: bool,
}

fn root_parent() -> i64 {
    -1
}
fn unlimited() -> f64 {
    1e9
}
fn wide_limits() -> [f64; 2] {
    [-std::f64::consts::PI, std::f64::consts::PI]
}
fn default_friction() -> f64 {
    1.0
}
fn default_restitution() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotModel {
    pub name: String,
    #[serde(default)]
    pub kind: RobotKind,
    /// Root link welded to the world at `(0, base_height)`.
    #[serde(default)]
    pub fixed_base: bool,
    /// Nominal root height used by the skeleton and the default reset.
    pub base_height: f64,
    pub links: Vec<Link>,
    /// Default joint angles for the stance reset; zeros when absent.
    #[serde(default)]
    pub default_pose: Option<Vec<f64>>,
    #[serde(default = "default_friction")]
    pub friction: f64,
    #[serde(default = "default_restitution")]
    pub restitution: f64,
}

impl Link {
    pub fn length(&self) -> f64 {
        self.tip[0].hypot(self.tip[1])
    }

    pub fn com(&self) -> [f64; 2] {
        self.com.unwrap_or([0.5 * self.tip[0], 0.5 * self.tip[1]])
    }

    pub fn inertia(&self) -> f64 {
        self.inertia.unwrap_or(self.mass * self.length().powi(2) / 12.0)
    }

    pub fn parent_index(&self) -> Option<usize> {
        (self.parent >= 0).then_some(self.parent as usize)
    }
}

impl RobotModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Invalid(m));
        if self.links.is_empty() {
            return bad("model has no links".into());
        }
        if !(self.base_height.is_finite()) {
            return bad("base_height must be finite".into());
        }
        for (i, l) in self.links.iter().enumerate() {
            match l.parent_index() {
                None if i != 0 => return bad(format!("link {} ({}) has no parent; only link 0 may be the root", i, l.name)),
                Some(_) if i == 0 => return bad("link 0 must be the root".into()),
                Some(p) if p >= i => return bad(format!("link {} ({}) has parent {} >= own index", i, l.name, p)),
                _ => {}
            }
            if !(l.mass > 0.0) {
                return bad(format!("link {} ({}) mass must be > 0", i, l.name));
            }
            if !(l.length() > 0.0) {
                return bad(format!("link {} ({}) length must be > 0", i, l.name));
            }
            if !(l.inertia() > 0.0) {
                return bad(format!("link {} ({}) inertia must be > 0", i, l.name));
            }
            if i > 0 {
                if !(l.limits[0] < l.limits[1]) {
                    return bad(format!("link {} ({}) limits must satisfy lo < hi", i, l.name));
                }
                if l.kp < 0.0 || l.kd < 0.0 || !(l.torque_limit > 0.0) {
                    return bad(format!("link {} ({}) gains must be >= 0 and torque limit > 0", i, l.name));
                }
            }
        }
        let names: std::collections::BTreeSet<_> = self.links.iter().map(|l| &l.name).collect();
        if names.len() != self.links.len() {
            return bad("link names must be unique".into());
        }
        if let Some(p) = &self.default_pose {
            if p.len() != self.n_joints() {
                return bad(format!("default_pose has {} entries, expected {}", p.len(), self.n_joints()));
            }
        }
        if !(self.friction >= 0.0) || !(0.0..=1.0).contains(&self.restitution) {
            return bad("friction must be >= 0 and restitution in [0, 1]".into());
        }
        Ok(())
    }

    /// Actuated joints: one per non-root link.
    pub fn n_joints(&self) -> usize {
        self.links.len() - 1
    }

    /// Generalised coordinates: `[x, z, pitch, q...]`, or just `q` for a fixed base.
    pub fn n_dof(&self) -> usize {
        self.n_joints() + if self.fixed_base { 0 } else { 3 }
    }

    pub fn joint_dof_offset(&self) -> usize {
        if self.fixed_base {
            0
        } else {
            3
        }
    }

    pub fn default_pose(&self) -> Vec<f64> {
        self.default_pose.clone().unwrap_or_else(|| vec![0.0; self.n_joints()])
    }

    pub fn total_mass(&self) -> f64 {
        self.links.iter().map(|l| l.mass).sum()
    }

    /// Links from the root down to `i`, inclusive.
    pub fn chain(&self, i: usize) -> Vec<usize> {
        let mut c = vec![i];
        let mut k = i;
        while let Some(p) = self.links[k].parent_index() {
            c.push(p);
            k = p;
        }
        c.reverse();
        c
    }

    pub fn contact_points(&self, i: usize) -> Vec<[f64; 2]> {
        let l = &self.links[i];
        match &l.contact_points {
            Some(p) => p.clone(),
            None if i == 0 => vec![[0.0, 0.0], l.tip],
            None => vec![l.tip],
        }
    }

    pub fn end_effectors(&self) -> Vec<usize> {
        (0..self.links.len()).filter(|&i| self.links[i].end_effector).collect()
    }

    pub fn link_index(&self, name: &str) -> Option<usize> {
        self.links.iter().position(|l| l.name == name)
    }

    /// Motion skeleton matching this model: a 1-DoF joint about `+y` per
    /// non-root link, followed by one zero-DoF `<link>_tip` joint per end
    /// effector.
    pub fn skeleton(&self) -> Skeleton {
        let mut joints = Vec::new();
        for (i, l) in self.links.iter().enumerate() {
            joints.push(Joint {
                name: l.name.clone(),
                parent: l.parent_index(),
                offset: Vec3::new(l.offset[0], 0.0, l.offset[1]),
                dof: if i == 0 { Dof::Three } else { Dof::One { axis: Vec3::Y } },
                limits: (i > 0).then_some(l.limits),
            });
        }
        for i in self.end_effectors() {
            let l = &self.links[i];
            joints.push(Joint {
                name: format!("{}_tip", l.name),
                parent: Some(i),
                offset: Vec3::new(l.tip[0], 0.0, l.tip[1]),
                dof: Dof::Zero,
                limits: None,
            });
        }
        Skeleton::new(self.base_height, joints).expect("model skeleton is valid by construction")
    }

    /// Skeleton joint indices of the end-effector tips, in skeleton order.
    pub fn skeleton_ee_joints(&self) -> Vec<usize> {
        let n = self.links.len();
        (0..self.end_effectors().len()).map(|k| n + k).collect()
    }

    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        let m: RobotModel = serde_json::from_str(s).map_err(|e| ModelError::Parse(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialises")
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Built-in models by name.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "pendulum" => Some(pendulum()),
            "block" => Some(block()),
            "squatter" => Some(squatter()),
            "planar_dog" => Some(planar_dog()),
            _ => None,
        }
    }

    pub const PRESETS: [&'static str; 4] = ["pendulum", "block", "squatter", "planar_dog"];
}

fn link(name: &str, parent: i64, offset: [f64; 2], tip: [f64; 2], mass: f64) -> Link {
    Link {
        name: name.into(),
        parent,
        offset,
        tip,
        mass,
        inertia: None,
        com: None,
        kp: 0.0,
        kd: 0.0,
        torque_limit: unlimited(),
        limits: wide_limits(),
        contact_points: None,
        allowed_contact: false,
        hand: false,
        end_effector: false,
        foot: false,
    }
}

fn actuated(mut l: Link, kp: f64, kd: f64, torque_limit: f64, limits: [f64; 2]) -> Link {
    l.kp = kp;
    l.kd = kd;
    l.torque_limit = torque_limit;
    l.limits = limits;
    l
}

/// Single 1 m rod hanging from a fixed pivot 2 m above the ground.
pub fn pendulum() -> RobotModel {
    use std::f64::consts::PI;
    let mut base = link("base", -1, [0.0, 0.0], [0.0, 0.1], 1.0);
    base.contact_points = Some(vec![]);
    let mut rod = actuated(link("rod", 0, [0.0, 0.0], [0.0, -1.0], 1.0), 30.0, 2.0, 8.0, [-2.0 * PI, 2.0 * PI]);
    rod.end_effector = true;
    rod.allowed_contact = true;
    RobotModel {
        name: "pendulum".into(),
        kind: RobotKind::Humanoid,
        fixed_base: true,
        base_height: 2.0,
        links: vec![base, rod],
        default_pose: None,
        friction: 1.0,
        restitution: 0.0,
    }
}

/// A 0.4 m x 0.1 m free block.
pub fn block() -> RobotModel {
    let mut b = link("block", -1, [0.0, 0.0], [0.2, 0.0], 5.0);
    b.com = Some([0.0, 0.0]);
    b.inertia = Some(5.0 * (0.4f64.powi(2) + 0.1f64.powi(2)) / 12.0);
    b.contact_points = Some(vec![[-0.2, -0.05], [0.2, -0.05], [-0.2, 0.05], [0.2, 0.05]]);
    b.allowed_contact = true;
    RobotModel {
        name: "block".into(),
        kind: RobotKind::Humanoid,
        fixed_base: false,
        base_height: 0.05,
        links: vec![b],
        default_pose: None,
        friction: 1.0,
        restitution: 0.0,
    }
}

/// Torso on a single leg (thigh, shin, foot): three actuated joints.
pub fn squatter() -> RobotModel {
    let mut torso = link("torso", -1, [0.0, 0.0], [0.0, 0.5], 8.0);
    torso.contact_points = Some(vec![[0.0, 0.0], [0.0, 0.5], [0.12, 0.25], [-0.12, 0.25]]);
    torso.end_effector = true;
    let thigh = actuated(link("thigh", 0, [0.0, 0.0], [0.0, -0.4], 3.0), 300.0, 15.0, 150.0, [-2.2, 0.6]);
    let shin = actuated(link("shin", 1, [0.0, -0.4], [0.0, -0.4], 2.0), 300.0, 15.0, 150.0, [-0.05, 2.5]);
    let mut foot = actuated(link("foot", 2, [0.0, -0.4], [0.18, -0.06], 1.0), 300.0, 15.0, 120.0, [-0.9, 0.9]);
    foot.com = Some([0.05, -0.05]);
    foot.inertia = Some(0.004);
    foot.contact_points = Some(vec![[-0.07, -0.06], [0.18, -0.06]]);
    foot.allowed_contact = true;
    foot.end_effector = true;
    foot.foot = true;
    RobotModel {
        name: "squatter".into(),
        kind: RobotKind::Quadruped,
        fixed_base: false,
        base_height: 0.86,
        links: vec![torso, thigh, shin, foot],
        default_pose: Some(vec![0.0, 0.0, 0.0]),
        friction: 1.0,
        restitution: 0.0,
    }
}

/// Trunk with a front and a rear two-segment leg.
pub fn planar_dog() -> RobotModel {
    let mut trunk = link("trunk", -1, [0.0, 0.0], [0.25, 0.0], 6.0);
    trunk.com = Some([0.0, 0.0]);
    trunk.inertia = Some(6.0 * 0.5f64.powi(2) / 12.0);
    trunk.contact_points = Some(vec![[-0.25, 0.0], [0.25, 0.0]]);
    let mut legs = Vec::new();
    for (side, x) in [("front", 0.22), ("rear", -0.22)] {
        let base = legs.len() as i64 + 1;
        let thigh = actuated(link(&format!("{side}_thigh"), 0, [x, 0.0], [0.0, -0.22], 0.8), 60.0, 2.0, 30.0, [-1.5, 1.5]);
        let mut calf = actuated(link(&format!("{side}_calf"), base, [0.0, -0.22], [0.0, -0.22], 0.3), 60.0, 2.0, 30.0, [0.0, 2.6]);
        calf.allowed_contact = true;
        calf.end_effector = true;
        calf.foot = true;
        calf.inertia = Some(0.002);
        legs.push(thigh);
        legs.push(calf);
    }
    let mut links = vec![trunk];
    links.extend(legs);
    RobotModel {
        name: "planar_dog".into(),
        kind: RobotKind::Quadruped,
        fixed_base: false,
        base_height: 0.42,
        links,
        default_pose: Some(vec![-0.4, 0.8, -0.4, 0.8]),
        friction: 1.0,
        restitution: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in RobotModel::PRESETS {
            let m = RobotModel::preset(name).unwrap();
            m.validate().unwrap();
            let back = RobotModel::from_json(&m.to_json()).unwrap();
            assert_eq!(back, m);
            let sk = m.skeleton();
            assert_eq!(sk.joints.len(), m.links.len() + m.end_effectors().len());
        }
    }

    #[test]
    fn rejects_bad_parent() {
        let mut m = squatter();
        m.links[2].parent = 3;
        assert!(matches!(m.validate(), Err(ModelError::Invalid(_))));
    }

    #[test]
    fn rejects_nonpositive_mass() {
        let mut m = squatter();
        m.links[1].mass = 0.0;
        assert!(m.validate().is_err());
    }

    #[test]
    fn chain_runs_root_first() {
        let m = squatter();
        assert_eq!(m.chain(3), vec![0, 1, 2, 3]);
        assert_eq!(m.chain(0), vec![0]);
        let d = planar_dog();
        assert_eq!(d.chain(4), vec![0, 3, 4]);
    }
}
