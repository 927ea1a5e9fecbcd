//! Generalised-coordinate planar dynamics with PD actuation and penalty
//! ground contact.
//!
//! Planar rotation convention: a positive angle `θ` maps `(x, z)` to
//! `(x cos θ + z sin θ, -x sin θ + z cos θ)`, the same action as a quaternion
//! rotation about `+y`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::model::RobotModel;
use super::randomization::RandomizationDraw;
use super::terrain::{terrain_height, TerrainSpec};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("simulation diverged (non-finite state) at t = {time}")]
    NonFiniteState { time: f64 },
    #[error("action has {got} entries, expected {expected}")]
    ActionDim { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContactParams {
    /// Normal stiffness (N/m).
    pub k_n: f64,
    /// Normal damping (N s/m).
    pub c_n: f64,
    /// Tangential damping before the Coulomb cap (N s/m).
    pub c_t: f64,
}

impl Default for ContactParams {
    fn default() -> Self {
        ContactParams { k_n: 3e4, c_n: 300.0, c_t: 5000.0 }
    }
}

/// Effective physical parameters for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Physics {
    pub gravity: f64,
    pub masses: Vec<f64>,
    pub inertias: Vec<f64>,
    pub kp: Vec<f64>,
    pub kd: Vec<f64>,
    pub torque_limit: Vec<f64>,
    pub limits: Vec<[f64; 2]>,
    pub friction: f64,
    pub restitution: f64,
    pub contact: ContactParams,
}

impl Physics {
    pub fn nominal(model: &RobotModel, gravity: f64, contact: ContactParams) -> Self {
        Self::randomized(model, gravity, contact, &RandomizationDraw::nominal(model.n_joints()))
    }

    pub fn randomized(model: &RobotModel, gravity: f64, contact: ContactParams, d: &RandomizationDraw) -> Self {
        let mut masses: Vec<f64> = model.links.iter().map(|l| l.mass * d.mass_scale).collect();
        let mut inertias: Vec<f64> = model.links.iter().map(|l| l.inertia() * d.mass_scale).collect();
        let m0 = masses[0];
        masses[0] = (m0 + d.trunk_mass_offset).max(0.05 * m0);
        inertias[0] *= masses[0] / m0;
        let joints = &model.links[1..];
        Physics {
            gravity: gravity + d.gravity_offset,
            masses,
            inertias,
            kp: joints.iter().map(|l| l.kp * d.stiffness_scale).collect(),
            kd: joints.iter().map(|l| l.kd * d.damping_scale).collect(),
            torque_limit: joints.iter().map(|l| l.torque_limit).collect(),
            limits: joints
                .iter()
                .enumerate()
                .map(|(j, l)| {
                    let lo = l.limits[0] + d.lower_offset.get(j).copied().unwrap_or(0.0);
                    let hi = l.limits[1] + d.upper_offset.get(j).copied().unwrap_or(0.0);
                    if lo < hi {
                        [lo, hi]
                    } else {
                        l.limits
                    }
                })
                .collect(),
            friction: model.friction * d.friction_scale,
            restitution: (model.restitution * d.restitution_scale).clamp(0.0, 1.0),
            contact,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub root_pos: [f64; 2],
    pub pitch: f64,
    pub root_vel: [f64; 2],
    pub pitch_rate: f64,
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
    /// Per link: touching the terrain with a positive normal force.
    pub contacts: Vec<bool>,
    pub time: f64,
}

impl SimState {
    /// Model at rest in its zero pose with the root at `(0, base_height)`.
    pub fn rest(model: &RobotModel) -> Self {
        let nj = model.n_joints();
        SimState {
            root_pos: [0.0, model.base_height],
            pitch: 0.0,
            root_vel: [0.0; 2],
            pitch_rate: 0.0,
            q: vec![0.0; nj],
            qd: vec![0.0; nj],
            contacts: vec![false; model.links.len()],
            time: 0.0,
        }
    }

    pub fn gen_pos(&self, model: &RobotModel) -> Vec<f64> {
        let mut v = Vec::with_capacity(model.n_dof());
        if !model.fixed_base {
            v.extend_from_slice(&[self.root_pos[0], self.root_pos[1], self.pitch]);
        }
        v.extend_from_slice(&self.q);
        v
    }

    pub fn gen_vel(&self, model: &RobotModel) -> Vec<f64> {
        let mut v = Vec::with_capacity(model.n_dof());
        if !model.fixed_base {
            v.extend_from_slice(&[self.root_vel[0], self.root_vel[1], self.pitch_rate]);
        }
        v.extend_from_slice(&self.qd);
        v
    }

    fn set_gen(&mut self, model: &RobotModel, pos: &[f64], vel: &[f64]) {
        let o = model.joint_dof_offset();
        if !model.fixed_base {
            self.root_pos = [pos[0], pos[1]];
            self.pitch = pos[2];
            self.root_vel = [vel[0], vel[1]];
            self.pitch_rate = vel[2];
        }
        self.q.copy_from_slice(&pos[o..]);
        self.qd.copy_from_slice(&vel[o..]);
    }

    pub fn is_finite(&self) -> bool {
        self.root_pos.iter().chain(&self.root_vel).chain(&self.q).chain(&self.qd).all(|v| v.is_finite())
            && self.pitch.is_finite()
            && self.pitch_rate.is_finite()
    }
}

pub fn rot2(theta: f64, v: [f64; 2]) -> [f64; 2] {
    let (s, c) = theta.sin_cos();
    [v[0] * c + v[1] * s, -v[0] * s + v[1] * c]
}

/// Derivative of `rot2(θ, ·)` applied to an already rotated vector.
fn perp(r: [f64; 2]) -> [f64; 2] {
    [r[1], -r[0]]
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// World angles, joint origins and angular velocities of every link.
#[derive(Debug, Clone)]
pub struct Kinematics {
    pub angle: Vec<f64>,
    pub origin: Vec<[f64; 2]>,
    pub omega: Vec<f64>,
    chains: Vec<Vec<usize>>,
}

impl Kinematics {
    pub fn new(model: &RobotModel, s: &SimState) -> Self {
        let n = model.links.len();
        let mut angle = vec![0.0; n];
        let mut origin = vec![[0.0; 2]; n];
        let mut omega = vec![0.0; n];
        if model.fixed_base {
            origin[0] = [0.0, model.base_height];
        } else {
            origin[0] = s.root_pos;
            angle[0] = s.pitch;
            omega[0] = s.pitch_rate;
        }
        for i in 1..n {
            let l = &model.links[i];
            let p = l.parent_index().unwrap();
            angle[i] = angle[p] + s.q[i - 1];
            omega[i] = omega[p] + s.qd[i - 1];
            let o = rot2(angle[p], l.offset);
            origin[i] = [origin[p][0] + o[0], origin[p][1] + o[1]];
        }
        let chains = (0..n).map(|i| model.chain(i)).collect();
        Kinematics { angle, origin, omega, chains }
    }

    /// World position of a point given in link `i`'s frame.
    pub fn point(&self, i: usize, local: [f64; 2]) -> [f64; 2] {
        let r = rot2(self.angle[i], local);
        [self.origin[i][0] + r[0], self.origin[i][1] + r[1]]
    }

    /// Positional Jacobian (one `[x, z]` column per generalised coordinate)
    /// of a world point rigidly attached to link `i`.
    pub fn jacobian(&self, model: &RobotModel, i: usize, p: [f64; 2]) -> Vec<[f64; 2]> {
        let mut j = vec![[0.0; 2]; model.n_dof()];
        let off = model.joint_dof_offset();
        for &a in &self.chains[i] {
            let col = perp(sub(p, self.origin[a]));
            if a == 0 {
                if !model.fixed_base {
                    j[0] = [1.0, 0.0];
                    j[1] = [0.0, 1.0];
                    j[2] = col;
                }
            } else {
                j[off + a - 1] = col;
            }
        }
        j
    }

    /// Angular Jacobian of link `i`.
    fn angular_jacobian(&self, model: &RobotModel, i: usize) -> Vec<f64> {
        let mut j = vec![0.0; model.n_dof()];
        let off = model.joint_dof_offset();
        for &a in &self.chains[i] {
            if a == 0 {
                if !model.fixed_base {
                    j[2] = 1.0;
                }
            } else {
                j[off + a - 1] = 1.0;
            }
        }
        j
    }

    /// Acceleration of a point on link `i` when all generalised
    /// accelerations are zero.
    fn bias_accel(&self, i: usize, p: [f64; 2]) -> [f64; 2] {
        let chain = &self.chains[i];
        let mut acc = [0.0; 2];
        for (k, &a) in chain.iter().enumerate() {
            let next = if k + 1 < chain.len() { self.origin[chain[k + 1]] } else { p };
            let r = sub(next, self.origin[a]);
            let w2 = self.omega[a] * self.omega[a];
            acc[0] -= w2 * r[0];
            acc[1] -= w2 * r[1];
        }
        acc
    }

    pub fn point_velocity(&self, model: &RobotModel, s: &SimState, i: usize, p: [f64; 2]) -> [f64; 2] {
        let v = s.gen_vel(model);
        let j = self.jacobian(model, i, p);
        let mut out = [0.0; 2];
        for (col, vk) in j.iter().zip(&v) {
            out[0] += col[0] * vk;
            out[1] += col[1] * vk;
        }
        out
    }
}

/// `kp (target - q) - kd qd`.
pub fn pd_torque(kp: f64, kd: f64, target: f64, q: f64, qd: f64) -> f64 {
    kp * (target - q) - kd * qd
}

fn mass_matrix_and_bias(model: &RobotModel, phys: &Physics, kin: &Kinematics) -> (DMatrix<f64>, DVector<f64>) {
    let n = model.n_dof();
    let mut m = DMatrix::zeros(n, n);
    let mut h = DVector::zeros(n);
    for i in 0..model.links.len() {
        let mass = phys.masses[i];
        let c = kin.point(i, model.links[i].com());
        let jc = kin.jacobian(model, i, c);
        let jw = kin.angular_jacobian(model, i);
        let b = kin.bias_accel(i, c);
        // gravity acts along -z
        let f = [mass * b[0], mass * (b[1] + phys.gravity)];
        for r in 0..n {
            if jc[r] == [0.0; 2] && jw[r] == 0.0 {
                continue;
            }
            h[r] += dot(jc[r], f);
            for col in 0..n {
                m[(r, col)] += mass * dot(jc[r], jc[col]) + phys.inertias[i] * jw[r] * jw[col];
            }
        }
    }
    (m, h)
}

pub fn mass_matrix(model: &RobotModel, phys: &Physics, s: &SimState) -> DMatrix<f64> {
    mass_matrix_and_bias(model, phys, &Kinematics::new(model, s)).0
}

/// Kinetic plus gravitational potential energy.
pub fn mechanical_energy(model: &RobotModel, phys: &Physics, s: &SimState) -> f64 {
    let kin = Kinematics::new(model, s);
    let (m, _) = mass_matrix_and_bias(model, phys, &kin);
    let v = DVector::from_vec(s.gen_vel(model));
    let ke = 0.5 * v.dot(&(&m * &v));
    let pe: f64 = (0..model.links.len())
        .map(|i| phys.masses[i] * phys.gravity * kin.point(i, model.links[i].com())[1])
        .sum();
    ke + pe
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepInfo {
    /// Applied joint torques in the last substep.
    pub torques: Vec<f64>,
    /// Largest `|τ_j| / limit_j` over all substeps.
    pub max_torque_ratio: f64,
    /// Per link contact flags after the last substep.
    pub contacts: Vec<bool>,
    /// Per link summed normal force in the last substep.
    pub normal_force: Vec<f64>,
    /// Per link tangential speed of contact points (largest over points).
    pub slip_speed: Vec<f64>,
    /// Deepest contact penetration in the last substep (m).
    pub max_penetration: f64,
}

struct ContactRow {
    link: usize,
    jn: Vec<f64>,
    jt: Vec<f64>,
    depth: f64,
    active: bool,
    fric: Option<f64>,
}

/// One semi-implicit Euler substep. PD and contact forces are evaluated at
/// the end-of-step velocity (linearly implicit), then capped.
pub fn substep(
    model: &RobotModel,
    phys: &Physics,
    terrain: &TerrainSpec,
    s: &SimState,
    action: &[f64],
    dt: f64,
    info: &mut StepInfo,
) -> Result<SimState, SimError> {
    let n = model.n_dof();
    let nj = model.n_joints();
    if action.len() != nj {
        return Err(SimError::ActionDim { expected: nj, got: action.len() });
    }
    let off = model.joint_dof_offset();
    let pos = s.gen_pos(model);
    let vel = DVector::from_vec(s.gen_vel(model));
    let kin = Kinematics::new(model, s);
    let (m, h) = mass_matrix_and_bias(model, phys, &kin);
    let cp = phys.contact;
    let c_n = cp.c_n * (1.0 - phys.restitution);

    let mut rows = Vec::new();
    for i in 0..model.links.len() {
        for local in model.contact_points(i) {
            let p = kin.point(i, local);
            let (ht, slope) = terrain_height(terrain, p[0]);
            if p[1] >= ht {
                continue;
            }
            let norm = (1.0 + slope * slope).sqrt();
            let nrm = [-slope / norm, 1.0 / norm];
            let tan = [1.0 / norm, slope / norm];
            let j = kin.jacobian(model, i, p);
            rows.push(ContactRow {
                link: i,
                jn: j.iter().map(|c| dot(*c, nrm)).collect(),
                jt: j.iter().map(|c| dot(*c, tan)).collect(),
                depth: (ht - p[1]) / norm,
                active: true,
                fric: None,
            });
        }
    }

    let mv = &m * &vel;
    let mut sat: Vec<Option<f64>> = vec![None; nj];
    let mut v_new = vel.clone();
    for _ in 0..12 {
        let mut a = m.clone();
        let mut rhs = &mv - &h * dt;
        for j in 0..nj {
            let k = off + j;
            match sat[j] {
                Some(tau) => rhs[k] += dt * tau,
                None => {
                    a[(k, k)] += dt * (phys.kd[j] + phys.kp[j] * dt);
                    rhs[k] += dt * phys.kp[j] * (action[j] - pos[k]);
                }
            }
        }
        for r in rows.iter().filter(|r| r.active) {
            let kn = dt * (c_n + cp.k_n * dt);
            for x in 0..n {
                if r.jn[x] == 0.0 && r.jt[x] == 0.0 {
                    continue;
                }
                rhs[x] += dt * cp.k_n * r.depth * r.jn[x];
                if let Some(f) = r.fric {
                    rhs[x] += dt * f * r.jt[x];
                }
                for y in 0..n {
                    a[(x, y)] += kn * r.jn[x] * r.jn[y];
                    if r.fric.is_none() {
                        a[(x, y)] += dt * cp.c_t * r.jt[x] * r.jt[y];
                    }
                }
            }
        }
        v_new = match a.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => a.lu().solve(&rhs).ok_or(SimError::NonFiniteState { time: s.time })?,
        };
        let mut changed = false;
        for j in 0..nj {
            if sat[j].is_none() {
                let k = off + j;
                let tau = phys.kp[j] * (action[j] - pos[k]) - (phys.kd[j] + phys.kp[j] * dt) * v_new[k];
                if tau.abs() > phys.torque_limit[j] {
                    sat[j] = Some(phys.torque_limit[j].copysign(tau));
                    changed = true;
                }
            }
        }
        for r in rows.iter_mut().filter(|r| r.active) {
            let vn: f64 = r.jn.iter().zip(v_new.iter()).map(|(a, b)| a * b).sum();
            let fn_ = cp.k_n * r.depth - (c_n + cp.k_n * dt) * vn;
            if fn_ < 0.0 {
                r.active = false;
                changed = true;
                continue;
            }
            if r.fric.is_none() {
                let vt: f64 = r.jt.iter().zip(v_new.iter()).map(|(a, b)| a * b).sum();
                let ft = -cp.c_t * vt;
                let cap = phys.friction * fn_;
                if ft.abs() > cap {
                    r.fric = Some(cap.copysign(ft));
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }

    info.torques = (0..nj)
        .map(|j| {
            sat[j].unwrap_or_else(|| {
                let k = off + j;
                phys.kp[j] * (action[j] - pos[k]) - (phys.kd[j] + phys.kp[j] * dt) * v_new[k]
            })
        })
        .collect();
    for j in 0..nj {
        let lim = phys.torque_limit[j];
        if lim.is_finite() {
            info.max_torque_ratio = info.max_torque_ratio.max(info.torques[j].abs() / lim);
        }
    }
    let nl = model.links.len();
    info.contacts = vec![false; nl];
    info.normal_force = vec![0.0; nl];
    info.slip_speed = vec![0.0; nl];
    info.max_penetration = 0.0;
    for r in rows.iter().filter(|r| r.active) {
        let vn: f64 = r.jn.iter().zip(v_new.iter()).map(|(a, b)| a * b).sum();
        let vt: f64 = r.jt.iter().zip(v_new.iter()).map(|(a, b)| a * b).sum();
        let fn_ = cp.k_n * r.depth - (c_n + cp.k_n * dt) * vn;
        if fn_ > 0.0 {
            info.contacts[r.link] = true;
            info.normal_force[r.link] += fn_;
            info.slip_speed[r.link] = info.slip_speed[r.link].max(vt.abs());
        }
        info.max_penetration = info.max_penetration.max(r.depth);
    }

    let mut new_pos: Vec<f64> = pos.iter().zip(v_new.iter()).map(|(p, v)| p + dt * v).collect();
    let mut new_vel: Vec<f64> = v_new.iter().copied().collect();
    for j in 0..nj {
        let k = off + j;
        let [lo, hi] = phys.limits[j];
        if new_pos[k] < lo {
            new_pos[k] = lo;
            new_vel[k] = new_vel[k].max(0.0);
        } else if new_pos[k] > hi {
            new_pos[k] = hi;
            new_vel[k] = new_vel[k].min(0.0);
        }
    }
    let mut out = s.clone();
    out.set_gen(model, &new_pos, &new_vel);
    out.time = s.time + dt;
    out.contacts = info.contacts.clone();
    if !out.is_finite() {
        return Err(SimError::NonFiniteState { time: out.time });
    }
    Ok(out)
}

/// `decimation` substeps with a constant PD target.
pub fn step(
    model: &RobotModel,
    phys: &Physics,
    terrain: &TerrainSpec,
    s: &SimState,
    action: &[f64],
    dt: f64,
    decimation: usize,
) -> Result<(SimState, StepInfo), SimError> {
    let mut info = StepInfo::default();
    let mut cur = s.clone();
    for _ in 0..decimation.max(1) {
        cur = substep(model, phys, terrain, &cur, action, dt, &mut info)?;
    }
    Ok((cur, info))
}

/// Lowest contact-point clearance above the terrain.
pub fn min_clearance(model: &RobotModel, terrain: &TerrainSpec, s: &SimState) -> f64 {
    let kin = Kinematics::new(model, s);
    let mut best = f64::INFINITY;
    for i in 0..model.links.len() {
        for local in model.contact_points(i) {
            let p = kin.point(i, local);
            best = best.min(p[1] - terrain_height(terrain, p[0]).0);
        }
    }
    best
}
