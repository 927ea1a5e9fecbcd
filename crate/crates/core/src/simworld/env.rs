//! Episodic environment around the planar simulator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dynamics::{min_clearance, step, ContactParams, Kinematics, Physics, SimError, SimState, StepInfo};
use super::model::{RobotKind, RobotModel};
use super::randomization::{sample_randomization, RandParam, RandomizationDraw, RandomizationSpec};
use super::terrain::{terrain_height, TerrainSpec};
use crate::motion_io::{JointRot, MotionSequence};
use crate::rotmath::{Quat, Vec3};
use crate::similarity::{JointVel, StateDescriptor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub sim_dt: f64,
    pub control_decimation: usize,
    pub gravity: f64,
    /// Episode length in control steps.
    pub horizon: usize,
    pub terrain: TerrainSpec,
    pub randomization: RandomizationSpec,
    pub contact: ContactParams,
    /// Hand links may touch the terrain (cartwheel-style tasks).
    pub allow_hands: bool,
    /// Optional root pitch bound (rad) that ends the episode.
    pub max_root_pitch: Option<f64>,
    /// Optional joint speed bound (rad/s) that ends the episode.
    pub max_joint_vel: Option<f64>,
    /// Half-width of the uniform noise added to reset poses and velocities.
    pub init_noise: f64,
    /// Half-width of the uniform horizontal spawn interval (m).
    pub spawn_range: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            sim_dt: 1.0 / 60.0,
            control_decimation: 2,
            gravity: 9.81,
            horizon: 300,
            terrain: TerrainSpec::Plane,
            randomization: RandomizationSpec::none(),
            contact: ContactParams::default(),
            allow_hands: false,
            max_root_pitch: None,
            max_joint_vel: None,
            init_noise: 0.02,
            spawn_range: 0.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.sim_dt > 0.0) {
            return Err("sim_dt must be > 0".into());
        }
        if self.control_decimation < 1 {
            return Err("control_decimation must be >= 1".into());
        }
        if self.horizon < 1 {
            return Err("horizon must be >= 1".into());
        }
        self.randomization.validate()
    }

    pub fn control_dt(&self) -> f64 {
        self.sim_dt * self.control_decimation as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Continue,
    Fallen,
    HorizonReached,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Default stance from the model's default pose.
    Default,
    /// Pose and velocities of reference frame `k`.
    ReferenceFrame(usize),
}

/// Links whose terrain contact does not end the episode.
pub fn allowed_contact(model: &RobotModel, allow_hands: bool) -> Vec<bool> {
    model.links.iter().map(|l| l.allowed_contact || (allow_hands && l.hand)).collect()
}

/// Episode status after a control step numbered `step` (1-based count of
/// steps taken).
pub fn check_termination(state: &SimState, model: &RobotModel, cfg: &SimConfig, step: usize) -> Termination {
    let allowed = allowed_contact(model, cfg.allow_hands);
    if state.contacts.iter().zip(&allowed).any(|(&c, &a)| c && !a) {
        return Termination::Fallen;
    }
    if let Some(p) = cfg.max_root_pitch {
        if state.pitch.abs() > p {
            return Termination::Fallen;
        }
    }
    if let Some(v) = cfg.max_joint_vel {
        if state.qd.iter().any(|w| w.abs() > v) {
            return Termination::Fallen;
        }
    }
    if step >= cfg.horizon {
        return Termination::HorizonReached;
    }
    Termination::Continue
}

/// Similarity descriptor of a simulator state, laid out like the model's
/// skeleton (see [`RobotModel::skeleton`]).
pub fn state_descriptor(model: &RobotModel, s: &SimState) -> StateDescriptor {
    let kin = Kinematics::new(model, s);
    let mut joint_rot: Vec<JointRot> = s.q.iter().map(|&a| JointRot::Angle(a)).collect();
    let mut joint_vel: Vec<JointVel> = s.qd.iter().map(|&w| JointVel::Scalar(w)).collect();
    let root = kin.origin[0];
    let root_rot = Quat::about_y(kin.angle[0]);
    let inv = root_rot.conj();
    let mut ee = Vec::new();
    for i in model.end_effectors() {
        joint_rot.push(JointRot::Quat(Quat::IDENTITY));
        joint_vel.push(JointVel::Vec(Vec3::ZERO));
        let p = kin.point(i, model.links[i].tip);
        ee.push(inv.rotate(Vec3::new(p[0] - root[0], 0.0, p[1] - root[1])));
    }
    StateDescriptor { joint_rot, joint_vel, ee_rel_pos: ee, root_pos: Vec3::new(root[0], 0.0, root[1]), root_rot }
        .canonicalized()
}

/// Simulator state reproducing frame `k` of a motion on the model's
/// skeleton; velocities are finite differences.
pub fn state_from_reference(model: &RobotModel, m: &MotionSequence, k: usize) -> SimState {
    let k = k.min(m.frames.len() - 1);
    let nj = model.n_joints();
    let pose = |i: usize| {
        let f = &m.frames[i];
        let q: Vec<f64> = (0..nj)
            .map(|j| match f.joint_rot[j] {
                JointRot::Angle(a) => a,
                JointRot::Quat(q) => q.twist_angle(Vec3::Y),
            })
            .collect();
        (f.root_pos, f.root_rot.twist_angle(Vec3::Y), q)
    };
    let (p0, pitch0, q0) = pose(k);
    let mut s = SimState::rest(model);
    if !model.fixed_base {
        s.root_pos = [p0.x, p0.z];
        s.pitch = pitch0;
    }
    s.q = q0.clone();
    if m.frames.len() > 1 {
        let (a, b) = if k + 1 < m.frames.len() { (k, k + 1) } else { (k - 1, k) };
        let (pa, ra, qa) = pose(a);
        let (pb, rb, qb) = pose(b);
        let dt = m.dt();
        if !model.fixed_base {
            s.root_vel = [(pb.x - pa.x) / dt, (pb.z - pa.z) / dt];
            s.pitch_rate = crate::rotmath::wrap_angle(rb - ra) / dt;
        }
        s.qd = qa.iter().zip(&qb).map(|(x, y)| (y - x) / dt).collect();
    }
    s
}

#[derive(Debug, Clone)]
pub struct EnvStep {
    pub prev_state: SimState,
    pub info: StepInfo,
    pub termination: Termination,
}

/// One environment: model, configuration, episode state and its own RNG.
#[derive(Debug, Clone)]
pub struct Env {
    pub model: RobotModel,
    pub cfg: SimConfig,
    pub phys: Physics,
    pub draw: RandomizationDraw,
    pub state: SimState,
    /// Control steps taken in the current episode.
    pub steps: usize,
    /// Control steps taken over the environment's lifetime.
    pub total_steps: u64,
    pub last_action: Vec<f64>,
    rng: ChaCha8Rng,
    has_draw: bool,
}

/// Per-environment seed derived from a run seed.
pub fn env_seed(run_seed: u64, index: u64) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

impl Env {
    pub fn new(model: RobotModel, cfg: SimConfig, seed: u64) -> Self {
        let phys = Physics::nominal(&model, cfg.gravity, cfg.contact);
        let state = SimState::rest(&model);
        let nj = model.n_joints();
        Env {
            draw: RandomizationDraw::nominal(nj),
            phys,
            state,
            steps: 0,
            total_steps: 0,
            last_action: model.default_pose(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            has_draw: false,
            model,
            cfg,
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn action_dim(&self) -> usize {
        self.model.n_joints()
    }

    /// Start a new episode: fresh randomization draw, then the selected
    /// initial state with small noise, lifted clear of the terrain.
    pub fn reset(&mut self, mode: InitMode, reference: Option<&MotionSequence>) -> &SimState {
        let prev = self.has_draw.then(|| self.draw.clone());
        self.draw = sample_randomization(
            &self.cfg.randomization,
            self.model.n_joints(),
            self.total_steps,
            prev.as_ref(),
            &mut self.rng,
        );
        self.has_draw = true;
        self.phys = Physics::randomized(&self.model, self.cfg.gravity, self.cfg.contact, &self.draw);

        let noise = self.cfg.init_noise;
        let jitter = |rng: &mut ChaCha8Rng| if noise > 0.0 { rng.gen_range(-noise..=noise) } else { 0.0 };
        let mut s = match (mode, reference) {
            (InitMode::ReferenceFrame(k), Some(m)) => state_from_reference(&self.model, m, k),
            _ => {
                let mut s = SimState::rest(&self.model);
                s.q = self.model.default_pose();
                s
            }
        };
        let shift = if self.cfg.spawn_range > 0.0 {
            self.rng.gen_range(-self.cfg.spawn_range..=self.cfg.spawn_range)
        } else {
            0.0
        };
        for j in 0..s.q.len() {
            s.q[j] += jitter(&mut self.rng);
            s.qd[j] += jitter(&mut self.rng);
            let [lo, hi] = self.phys.limits[j];
            s.q[j] = s.q[j].clamp(lo, hi);
        }
        if !self.model.fixed_base {
            s.root_pos[0] += shift;
            s.pitch += jitter(&mut self.rng);
            s.root_vel[0] += jitter(&mut self.rng);
            s.root_vel[1] += jitter(&mut self.rng);
            s.pitch_rate += jitter(&mut self.rng);
            let clearance = min_clearance(&self.model, &self.cfg.terrain, &s);
            let target = if matches!(mode, InitMode::Default) { 0.001 } else { clearance.max(0.001) };
            s.root_pos[1] += target - clearance;
        }
        s.time = 0.0;
        s.contacts = vec![false; self.model.links.len()];
        self.state = s;
        self.steps = 0;
        self.last_action = self.state.q.clone();
        &self.state
    }

    /// Apply one control action (PD targets) for `control_decimation`
    /// substeps.
    pub fn step(&mut self, action: &[f64]) -> Result<EnvStep, SimError> {
        let mut a = action.to_vec();
        if let Some((row, frac)) = self.draw.noise_row(RandParam::ActionNoise) {
            let row = *row;
            for v in &mut a {
                *v += row.sample(&mut self.rng, frac);
            }
        }
        let prev = self.state.clone();
        let (next, info) = step(
            &self.model,
            &self.phys,
            &self.cfg.terrain,
            &self.state,
            &a,
            self.cfg.sim_dt,
            self.cfg.control_decimation,
        )?;
        self.state = next;
        self.steps += 1;
        self.total_steps += 1;
        self.last_action = action.to_vec();
        let termination = check_termination(&self.state, &self.model, &self.cfg, self.steps);
        Ok(EnvStep { prev_state: prev, info, termination })
    }

    pub fn obs_dim(&self) -> usize {
        observation_layout(&self.model).len()
    }

    /// Noisy policy observation of the current state.
    pub fn observe(&mut self) -> Vec<f64> {
        let mut obs = observe_clean(&self.model, &self.cfg, &self.state, &self.last_action);
        if self.draw.noise.is_empty() {
            return obs;
        }
        let layout = observation_layout(&self.model);
        let noise = self.draw.noise.clone();
        for (row, frac) in noise {
            for (k, kind) in layout.iter().enumerate() {
                let hit = match row.param {
                    RandParam::ObsNoise => true,
                    RandParam::ObsGravity => *kind == ObsKind::Gravity,
                    RandParam::ObsRot => *kind == ObsKind::JointAngle,
                    RandParam::ObsVel => *kind == ObsKind::JointVel,
                    _ => false,
                };
                if hit {
                    obs[k] += row.sample(&mut self.rng, frac);
                }
            }
        }
        obs
    }

    pub fn descriptor(&self) -> StateDescriptor {
        state_descriptor(&self.model, &self.state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObsKind {
    Attitude,
    RootVel,
    Gravity,
    Height,
    JointAngle,
    JointVel,
    EndEffector,
    LastAction,
}

/// Meaning of each observation entry.
pub fn observation_layout(model: &RobotModel) -> Vec<ObsKind> {
    use ObsKind::*;
    let nj = model.n_joints();
    let mut v = Vec::new();
    if model.fixed_base {
        v.extend(std::iter::repeat(JointAngle).take(nj));
        v.extend(std::iter::repeat(Attitude).take(2 * nj));
        v.extend(std::iter::repeat(JointVel).take(nj));
        return v;
    }
    match model.kind {
        RobotKind::Humanoid => {
            v.extend([Attitude, Attitude, RootVel, RootVel, RootVel, Height]);
        }
        RobotKind::Quadruped => {
            v.extend([Gravity, Gravity, RootVel]);
        }
    }
    v.extend(std::iter::repeat(JointAngle).take(nj));
    v.extend(std::iter::repeat(JointVel).take(nj));
    v.extend(std::iter::repeat(EndEffector).take(2 * model.end_effectors().len()));
    if model.kind == RobotKind::Quadruped {
        v.extend(std::iter::repeat(LastAction).take(nj));
    }
    v
}

/// Observation without noise. Humanoid-kind models see attitude and root
/// velocity in the root frame; quadruped-kind models see projected gravity,
/// pitch rate and the previous action instead of linear velocity.
pub fn observe_clean(model: &RobotModel, cfg: &SimConfig, s: &SimState, last_action: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(observation_layout(model).len());
    if model.fixed_base {
        v.extend_from_slice(&s.q);
        for &a in &s.q {
            v.push(a.sin());
            v.push(a.cos());
        }
        v.extend_from_slice(&s.qd);
        return v;
    }
    let (sp, cp) = s.pitch.sin_cos();
    let height = s.root_pos[1] - terrain_height(&cfg.terrain, s.root_pos[0]).0;
    match model.kind {
        RobotKind::Humanoid => {
            // world velocity expressed in the root frame
            let local = super::dynamics::rot2(-s.pitch, s.root_vel);
            v.extend_from_slice(&[sp, cp, local[0], local[1], s.pitch_rate, height]);
        }
        RobotKind::Quadruped => {
            let g = cfg.gravity;
            v.extend_from_slice(&[-g * sp, -g * cp, s.pitch_rate]);
        }
    }
    v.extend_from_slice(&s.q);
    v.extend_from_slice(&s.qd);
    let kin = Kinematics::new(model, s);
    let root = kin.origin[0];
    for i in model.end_effectors() {
        let p = kin.point(i, model.links[i].tip);
        let rel = super::dynamics::rot2(-s.pitch, [p[0] - root[0], p[1] - root[1]]);
        v.extend_from_slice(&rel);
    }
    if model.kind == RobotKind::Quadruped {
        v.extend_from_slice(last_action);
    }
    v
}

/// One row of an exported trajectory trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub time: f64,
    pub root_x: f64,
    pub root_z: f64,
    pub pitch: f64,
    pub q: Vec<f64>,
    pub torques: Vec<f64>,
    pub contacts: Vec<bool>,
    pub rewards: Vec<(String, f64)>,
}

/// CSV with columns `time,root_x,root_z,pitch,q_*,tau_*,contact_*,<reward terms>`.
pub fn trace_to_csv(model: &RobotModel, rows: &[TraceRow]) -> String {
    let mut out = String::from("time,root_x,root_z,pitch");
    for l in &model.links[1..] {
        out.push_str(&format!(",q_{}", l.name));
    }
    for l in &model.links[1..] {
        out.push_str(&format!(",tau_{}", l.name));
    }
    for l in &model.links {
        out.push_str(&format!(",contact_{}", l.name));
    }
    if let Some(r) = rows.first() {
        for (name, _) in &r.rewards {
            out.push_str(&format!(",{name}"));
        }
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{}", r.time, r.root_x, r.root_z, r.pitch));
        for v in r.q.iter().chain(&r.torques) {
            out.push_str(&format!(",{v}"));
        }
        for c in &r.contacts {
            out.push_str(if *c { ",1" } else { ",0" });
        }
        for (_, v) in &r.rewards {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simworld::model;

    #[test]
    fn feet_only_continues_and_torso_falls() {
        let m = model::squatter();
        let cfg = SimConfig::default();
        let mut s = SimState::rest(&m);
        s.contacts = vec![false, false, false, true];
        assert_eq!(check_termination(&s, &m, &cfg, 1), Termination::Continue);
        s.contacts[0] = true;
        assert_eq!(check_termination(&s, &m, &cfg, 1), Termination::Fallen);
        s.contacts[0] = false;
        assert_eq!(check_termination(&s, &m, &cfg, cfg.horizon), Termination::HorizonReached);
    }

    #[test]
    fn hands_allowed_only_when_enabled() {
        let mut m = model::squatter();
        m.links[0].hand = true;
        let mut cfg = SimConfig::default();
        let mut s = SimState::rest(&m);
        s.contacts = vec![true, false, false, true];
        assert_eq!(check_termination(&s, &m, &cfg, 1), Termination::Fallen);
        cfg.allow_hands = true;
        assert_eq!(check_termination(&s, &m, &cfg, 1), Termination::Continue);
    }

    #[test]
    fn reset_is_deterministic() {
        let m = model::squatter();
        let mut cfg = SimConfig::default();
        cfg.randomization = RandomizationSpec::humanoid();
        let mut a = Env::new(m.clone(), cfg.clone(), 11);
        let mut b = Env::new(m, cfg, 11);
        assert_eq!(a.reset(InitMode::Default, None), b.reset(InitMode::Default, None));
        assert_eq!(a.observe(), b.observe());
    }

    #[test]
    fn default_reset_stands_on_ground() {
        let m = model::squatter();
        let mut env = Env::new(m.clone(), SimConfig::default(), 1);
        env.reset(InitMode::Default, None);
        let c = min_clearance(&m, &TerrainSpec::Plane, &env.state);
        assert!((c - 0.001).abs() < 1e-12);
        assert!(env.state.qd.iter().all(|v| v.abs() <= 0.02));
    }

    #[test]
    fn observation_dims() {
        for name in RobotModel::PRESETS {
            let m = RobotModel::preset(name).unwrap();
            let mut env = Env::new(m.clone(), SimConfig::default(), 0);
            env.reset(InitMode::Default, None);
            assert_eq!(env.observe().len(), env.obs_dim(), "{name}");
        }
    }

    #[test]
    fn descriptor_matches_skeleton_fk() {
        use crate::motion_io::{Frame, MotionSequence};
        use crate::similarity::descriptors_from_motion;
        let m = model::squatter();
        let mut s = SimState::rest(&m);
        s.root_pos = [0.3, 0.8];
        s.pitch = 0.2;
        s.q = vec![-0.6, 1.1, -0.4];
        let sk = m.skeleton();
        let mut jr: Vec<JointRot> = s.q.iter().map(|&a| JointRot::Angle(a)).collect();
        jr.extend(m.end_effectors().iter().map(|_| JointRot::Quat(Quat::IDENTITY)));
        let f = Frame { root_pos: Vec3::new(0.3, 0.0, 0.8), root_rot: Quat::about_y(0.2), joint_rot: jr };
        let mo = MotionSequence::new(30.0, sk, vec![f]).unwrap();
        let d_ref = &descriptors_from_motion(&mo, &m.skeleton_ee_joints())[0];
        let d_sim = state_descriptor(&m, &s);
        for (a, b) in d_ref.ee_rel_pos.iter().zip(&d_sim.ee_rel_pos) {
            assert!((*a - *b).norm() < 1e-12);
        }
        assert_eq!(d_ref.flatten(false).len(), d_sim.flatten(false).len());
        let back = state_from_reference(&m, &mo, 0);
        assert!((back.pitch - 0.2).abs() < 1e-12);
        assert_eq!(back.q, s.q);
    }
}
