//! The training loop: vectorised rollouts, reward assembly, GAE, PPO and
//! discriminator updates, matching refreshes, checkpoints and metrics.

use std::collections::VecDeque;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ConfigError, InitKind, MeMode, RunConfig, TaskKind, TOOL_VERSION};
use super::policy::{PolicyNet, ValueNet};
use super::ppo::{gae, normalize_advantages, ppo_update, PpoBatch, PpoParams};
use super::rewards::{
    augment_critic_obs, aux_rewards, baseline_task_reward, combined_reward, swing_reward, AuxInputs, TaskHistory,
};
use crate::adversarial::Discriminator;
use crate::matching::{dp_optimal_matching, select_best_matching, Matching};
use crate::motion_io::{motion_from_json, motion_to_json, resample, MotionSequence};
use crate::nn::{AdamState, NnError};
use crate::similarity::{descriptors_from_motion, similarity, similarity_matrix, Metric, SimWeights, StateDescriptor};
use crate::simworld::env::{allowed_contact, env_seed};
use crate::simworld::{Env, InitMode, RobotModel, SimConfig, Termination};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("reference motion: {0}")]
    Motion(String),
    #[error("network error: {0}")]
    Nn(#[from] NnError),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Reference motion prepared for one robot: per-frame descriptors, their
/// flat features and the consecutive-frame transitions.
#[derive(Debug, Clone)]
pub struct Reference {
    pub motion: MotionSequence,
    pub descs: Vec<StateDescriptor>,
    pub features: Vec<Vec<f64>>,
    pub transitions: Array2<f64>,
}

impl Reference {
    /// Resamples to the control rate and checks the skeleton against the
    /// model's.
    pub fn new(model: &RobotModel, motion: &MotionSequence, control_dt: f64) -> Result<Self, TrainError> {
        let skel = model.skeleton();
        let ms = &motion.skeleton;
        if ms.len() != skel.len() || ms.joints.iter().zip(&skel.joints).any(|(a, b)| a.dof != b.dof) {
            return Err(TrainError::Motion(format!(
                "motion skeleton ({} joints) does not match robot '{}' ({} joints)",
                ms.len(),
                model.name,
                skel.len()
            )));
        }
        let fps = 1.0 / control_dt;
        let motion = if (motion.fps - fps).abs() > 1e-9 { resample(motion, fps) } else { motion.clone() };
        if motion.frames.len() < 2 {
            return Err(TrainError::Motion("reference needs at least two frames".into()));
        }
        let descs: Vec<StateDescriptor> =
            descriptors_from_motion(&motion, &model.skeleton_ee_joints()).into_iter().map(|d| d.canonicalized()).collect();
        let features: Vec<Vec<f64>> = descs.iter().map(|d| d.flatten(true)).collect();
        let w = features[0].len();
        let mut transitions = Array2::zeros((features.len() - 1, 2 * w));
        for u in 0..features.len() - 1 {
            for k in 0..w {
                transitions[[u, k]] = features[u][k];
                transitions[[u, w + k]] = features[u + 1][k];
            }
        }
        Ok(Reference { motion, descs, features, transitions })
    }

    pub fn len(&self) -> usize {
        self.descs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descs.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].len()
    }
}

fn transition_features(a: &StateDescriptor, b: &StateDescriptor) -> Vec<f64> {
    let mut v = a.flatten(true);
    v.extend(b.flatten(true));
    v
}

fn init_mode(k: InitKind) -> InitMode {
    match k {
        InitKind::Default => InitMode::Default,
        InitKind::ReferenceStart => InitMode::ReferenceFrame(0),
    }
}

/// Everything the policy and value networks need besides the weights.
#[derive(Debug, Clone)]
pub struct Setup {
    pub cfg: RunConfig,
    pub model: RobotModel,
    pub sim: SimConfig,
    pub reference: Option<Reference>,
    pub metric: Metric,
    pub weights: SimWeights,
}

impl Setup {
    pub fn new(cfg: RunConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let model = cfg.robot.load()?;
        let sim = cfg.sim_config()?;
        let reference = match &cfg.motion.path {
            Some(p) => {
                let m = crate::motion_io::load_motion(p).map_err(|e| TrainError::Motion(format!("{}: {e}", p.display())))?;
                Some(Reference::new(&model, &m, sim.control_dt())?)
            }
            None => None,
        };
        Ok(Self::with_parts(cfg, model, sim, reference))
    }

    pub fn with_parts(cfg: RunConfig, model: RobotModel, sim: SimConfig, reference: Option<Reference>) -> Self {
        let metric = cfg.rewards.metric;
        let weights = cfg.rewards.similarity;
        Setup { cfg, model, sim, reference, metric, weights }
    }

    pub fn policy_obs_dim(&self) -> usize {
        crate::simworld::env::observation_layout(&self.model).len() + self.cfg.ppo.time_obs as usize
    }

    pub fn aug_dim(&self) -> usize {
        self.reference.as_ref().map_or(0, |r| r.feature_dim() + 1)
    }

    pub fn uses_disc(&self) -> bool {
        self.reference.is_some() && self.cfg.rewards.lambda_adv != 0.0
    }

    /// Policy observation for the environment's current state.
    pub fn observe(&self, env: &mut Env) -> Vec<f64> {
        let mut o = env.observe();
        if self.cfg.ppo.time_obs {
            o.push(env.steps as f64 / self.sim.horizon.max(1) as f64);
        }
        o
    }

    pub fn sim(&self, y: &StateDescriptor, s: &StateDescriptor) -> f64 {
        similarity(self.metric, y, s, &self.weights).expect("descriptor layouts checked at setup")
    }

    /// Matching of one finished episode against the reference.
    pub fn match_episode(&self, descs: &[StateDescriptor]) -> Option<(Matching, crate::similarity::SimMatrix)> {
        let r = self.reference.as_ref()?;
        let s = similarity_matrix(self.metric, &r.descs, descs, &self.weights).expect("layouts checked");
        Some((dp_optimal_matching(&s, self.cfg.matching.min_sim), s))
    }

    pub fn critic_aug(&self, t: usize, m: &Matching) -> Vec<f64> {
        match &self.reference {
            Some(r) => augment_critic_obs(t, m, &r.features, self.sim.horizon),
            None => Vec::new(),
        }
    }
}

/// Saved training state. Loading rejects network shapes that do not fit the
/// stored robot and configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub config_hash: String,
    pub iteration: usize,
    pub config: RunConfig,
    pub model: RobotModel,
    pub reference_motion: Option<serde_json::Value>,
    pub policy: PolicyNet,
    pub value: ValueNet,
    pub disc: Option<Discriminator>,
    pub policy_opt: AdamState,
    pub value_opt: AdamState,
    pub disc_opt: Option<AdamState>,
    pub matchings: Vec<Matching>,
    pub lr_halved: bool,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialises")
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let c: Checkpoint = serde_json::from_str(text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let setup = c.setup()?;
        let obs = setup.policy_obs_dim();
        let act = c.model.n_joints();
        let check = |what: &str, want: usize, got: usize| {
            if want == got {
                Ok(())
            } else {
                Err(TrainError::Checkpoint(format!("{what}: expected {want}, got {got}")))
            }
        };
        check("policy input", obs, c.policy.obs_dim())?;
        check("policy output", act, c.policy.act_dim())?;
        check("policy normaliser", obs, c.policy.obs_norm.dim())?;
        check("value input", obs + setup.aug_dim(), c.value.input_dim())?;
        check("value normaliser", obs + setup.aug_dim(), c.value.norm.dim())?;
        check("policy optimiser", c.policy.net.params().len(), c.policy_opt.m.len())?;
        check("value optimiser", c.value.net.params().len(), c.value_opt.m.len())?;
        if let (Some(d), Some(r)) = (&c.disc, &setup.reference) {
            check("discriminator input", 2 * r.feature_dim(), d.input_dim())?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Rebuilds the setup from the embedded model and reference.
    pub fn setup(&self) -> Result<Setup, TrainError> {
        let sim = self.config.sim_config()?;
        let reference = match &self.reference_motion {
            Some(v) => {
                let m = motion_from_json(&v.to_string()).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
                Some(Reference::new(&self.model, &m, sim.control_dt())?)
            }
            None => None,
        };
        Ok(Setup::with_parts(self.config.clone(), self.model.clone(), sim, reference))
    }
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IterMetrics {
    pub iteration: usize,
    /// Mean return over the most recent finished episodes (NaN before any).
    pub mean_return: f64,
    pub mean_episode_length: f64,
    pub mean_step_reward: f64,
    pub mean_adv_reward: f64,
    pub mean_me_reward: f64,
    pub disc_accuracy: f64,
    pub matched_pairs: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    pub lr: f64,
    pub episodes: usize,
    pub divergences: usize,
}

pub const METRICS_HEADER: &str = "iteration,mean_return,mean_episode_length,mean_step_reward,mean_adv_reward,\
mean_me_reward,disc_accuracy,matched_pairs,policy_loss,value_loss,clip_fraction,lr,episodes,divergences";

impl IterMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.mean_return,
            self.mean_episode_length,
            self.mean_step_reward,
            self.mean_adv_reward,
            self.mean_me_reward,
            self.disc_accuracy,
            self.matched_pairs,
            self.policy_loss,
            self.value_loss,
            self.clip_fraction,
            self.lr,
            self.episodes,
            self.divergences
        )
    }
}

#[derive(Debug, Clone)]
struct StepRec {
    obs: Vec<f64>,
    aug: Vec<f64>,
    u: Vec<f64>,
    logp: f64,
    trans: Vec<f64>,
    me: f64,
    aux: [f64; 6],
    task: f64,
    done: bool,
    /// Critic input of the final state when the episode hit the horizon.
    bootstrap: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct Worker {
    env: Env,
    mode: usize,
    obs: Vec<f64>,
    desc: StateDescriptor,
    hist: TaskHistory,
    ep_descs: Vec<StateDescriptor>,
    ep_return: f64,
    ep_len: usize,
    ep_me: f64,
    /// Stale matching seen at the episode's first step and whether a refresh
    /// replaced it before the episode ended (debug bookkeeping only).
    ep_matching: Option<Matching>,
    ep_mixed: bool,
    /// Record index and episode step of the first record of the current
    /// episode inside this batch.
    ep_first_rec: usize,
    ep_first_k: usize,
    records: Vec<StepRec>,
    /// Episode ends in this batch: record index.
    ends: Vec<usize>,
    divergences: usize,
}

fn keep_descs(setup: &Setup) -> bool {
    setup.reference.is_some() && (setup.cfg.rewards.me_mode == MeMode::PerEpisode || cfg!(debug_assertions))
}

impl Worker {
    fn reset(&mut self, setup: &Setup) {
        let modes = &setup.cfg.matching.init_modes;
        self.mode = if modes.len() > 1 { self.env.rng().gen_range(0..modes.len()) } else { 0 };
        let reference = setup.reference.as_ref().map(|r| &r.motion);
        self.env.reset(init_mode(modes[self.mode]), reference);
        self.obs = setup.observe(&mut self.env);
        self.desc = self.env.descriptor();
        self.hist = TaskHistory::default();
        if let Some(t) = setup.cfg.task.baseline() {
            baseline_task_reward(t, &setup.model, &self.env.state, &mut self.hist);
        }
        self.ep_descs.clear();
        if keep_descs(setup) {
            self.ep_descs.push(self.desc.clone());
        }
        self.ep_me = 0.0;
        self.ep_matching = None;
        self.ep_mixed = false;
        self.ep_first_rec = self.records.len();
        self.ep_first_k = 0;
    }

    fn step(&mut self, setup: &Setup, policy: &PolicyNet, matchings: &[Matching], allowed: &[bool]) -> Result<(), NnError> {
        let t = self.env.steps;
        let obs = std::mem::take(&mut self.obs);
        let aug = setup.critic_aug(t, &matchings[self.mode]);
        let (u, logp) = policy.sample(&obs, self.env.rng())?;
        let action = policy.to_action(&u);
        let prev_action = self.env.last_action.clone();
        let rec_idx = self.records.len();
        let step = match self.env.step(&action) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("environment diverged ({e}); resetting");
                self.divergences += 1;
                let trans = transition_features(&self.desc, &self.desc);
                self.records.push(StepRec {
                    obs,
                    aug,
                    u,
                    logp,
                    trans,
                    me: 0.0,
                    aux: [0.0; 6],
                    task: 0.0,
                    done: true,
                    bootstrap: None,
                });
                self.ends.push(rec_idx);
                self.reset(setup);
                return Ok(());
            }
        };
        let next_desc = self.env.descriptor();
        let trans = transition_features(&self.desc, &next_desc);
        let mut me = 0.0;
        if let (Some(r), MeMode::Stale) = (&setup.reference, setup.cfg.rewards.me_mode) {
            let m = &matchings[self.mode];
            if cfg!(debug_assertions) {
                match &self.ep_matching {
                    None => self.ep_matching = Some(m.clone()),
                    Some(first) => self.ep_mixed |= first != m,
                }
            }
            if t == 0 {
                if let Some(u0) = m.reference_for(0) {
                    me += setup.sim(&r.descs[u0], &self.desc);
                }
            }
            if let Some(u1) = m.reference_for(t + 1) {
                me += setup.sim(&r.descs[u1], &next_desc);
            }
        }
        let aux = aux_rewards(&AuxInputs {
            model: &setup.model,
            limits: &self.env.phys.limits,
            prev: &step.prev_state,
            next: &self.env.state,
            action: &action,
            prev_action: &prev_action,
            info: &step.info,
            allowed,
            dt: setup.sim.control_dt(),
            margin: setup.cfg.rewards.aux_margin,
        });
        let task = match setup.cfg.task {
            TaskKind::Swing => swing_reward(&self.env.state),
            TaskKind::RunBackward | TaskKind::Kick => {
                baseline_task_reward(setup.cfg.task.baseline().unwrap(), &setup.model, &self.env.state, &mut self.hist)
            }
            TaskKind::Imitate => 0.0,
        };
        self.desc = next_desc;
        if keep_descs(setup) {
            self.ep_descs.push(self.desc.clone());
        }
        self.ep_me += me;
        let done = step.termination != Termination::Continue;
        let bootstrap = (step.termination == Termination::HorizonReached).then(|| {
            let mut x = setup.observe(&mut self.env);
            x.extend(setup.critic_aug(t + 1, &matchings[self.mode]));
            x
        });
        self.records.push(StepRec { obs, aug, u, logp, trans, me, aux, task, done, bootstrap });
        if done {
            self.ends.push(rec_idx);
            self.finish_episode(setup, &matchings[self.mode]);
            self.reset(setup);
        } else {
            self.obs = setup.observe(&mut self.env);
        }
        Ok(())
    }

    /// Matched rewards for the per-episode mode and the bookkeeping check
    /// for the stale mode.
    fn finish_episode(&mut self, setup: &Setup, stale: &Matching) {
        let Some(r) = &setup.reference else { return };
        match setup.cfg.rewards.me_mode {
            MeMode::PerEpisode => {
                let (m, s) = setup.match_episode(&self.ep_descs).expect("reference present");
                let last = self.records.len() - 1;
                for &(u, v) in m.pairs() {
                    let k = v.max(1) - 1;
                    let idx = if k >= self.ep_first_k { self.ep_first_rec + (k - self.ep_first_k) } else { last };
                    self.records[idx].me += s.get(u, v);
                }
            }
            MeMode::Stale => {
                if cfg!(debug_assertions) && !self.ep_descs.is_empty() && !self.ep_mixed {
                    let total: f64 = stale
                        .pairs()
                        .iter()
                        .filter(|p| p.1 < self.ep_descs.len())
                        .map(|&(u, v)| setup.sim(&r.descs[u], &self.ep_descs[v]))
                        .sum();
                    debug_assert!(
                        (total - self.ep_me).abs() <= 1e-9 * (1.0 + total.abs()),
                        "matched reward bookkeeping: {total} vs {}",
                        self.ep_me
                    );
                }
            }
        }
    }
}

/// Stateful trainer; `iterate` runs one collection + update cycle.
pub struct Trainer {
    pub setup: Setup,
    pub policy: PolicyNet,
    pub value: ValueNet,
    pub disc: Option<Discriminator>,
    pub policy_opt: AdamState,
    pub value_opt: AdamState,
    pub disc_opt: Option<AdamState>,
    /// One matching per initialisation mode.
    pub matchings: Vec<Matching>,
    pub iteration: usize,
    pub lr_halved: bool,
    workers: Vec<Worker>,
    rng: ChaCha8Rng,
    allowed: Vec<bool>,
    recent: VecDeque<(f64, usize)>,
    consecutive_skips: usize,
}

impl Trainer {
    pub fn new(setup: Setup) -> Result<Self, TrainError> {
        let cfg = &setup.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(env_seed(cfg.seed, u64::MAX));
        let nj = setup.model.n_joints();
        let obs_dim = setup.policy_obs_dim();
        let policy = PolicyNet::new(
            obs_dim,
            &cfg.ppo.hidden,
            cfg.ppo.sigma2,
            setup.model.default_pose(),
            vec![cfg.ppo.action_scale; nj],
            &mut rng,
        );
        let value = ValueNet::new(obs_dim, setup.aug_dim(), &cfg.ppo.value_hidden, &mut rng);
        let disc = setup
            .uses_disc()
            .then(|| {
                let r = setup.reference.as_ref().unwrap();
                Discriminator::new(2 * r.feature_dim(), &cfg.disc.hidden, cfg.disc.disc_config(), &mut rng)
            });
        let policy_opt = AdamState::new(policy.net.params().len(), cfg.ppo.lr);
        let value_opt = AdamState::new(value.net.params().len(), cfg.ppo.lr);
        let disc_opt = disc.as_ref().map(|d| AdamState::new(d.net.params().len(), cfg.disc.lr));
        let n_match = setup.reference.as_ref().map_or(0, |r| r.len().min(setup.sim.horizon + 1));
        let matchings = vec![Matching::identity(n_match); cfg.matching.init_modes.len()];
        let mut t = Trainer {
            allowed: allowed_contact(&setup.model, setup.sim.allow_hands),
            policy,
            value,
            disc,
            policy_opt,
            value_opt,
            disc_opt,
            matchings,
            iteration: 0,
            lr_halved: false,
            workers: Vec::new(),
            rng,
            recent: VecDeque::new(),
            consecutive_skips: 0,
            setup,
        };
        t.spawn_workers();
        Ok(t)
    }

    pub fn from_config(cfg: RunConfig) -> Result<Self, TrainError> {
        Self::new(Setup::new(cfg)?)
    }

    /// Resumes from a checkpoint; environments restart from fresh seeds
    /// derived from the iteration count.
    pub fn from_checkpoint(c: Checkpoint) -> Result<Self, TrainError> {
        let setup = c.setup()?;
        let mut t = Trainer::new(setup)?;
        t.policy = c.policy;
        t.value = c.value;
        t.disc = c.disc;
        t.policy_opt = c.policy_opt;
        t.value_opt = c.value_opt;
        t.disc_opt = c.disc_opt;
        t.matchings = c.matchings;
        t.iteration = c.iteration;
        t.lr_halved = c.lr_halved;
        t.rng = ChaCha8Rng::seed_from_u64(env_seed(t.setup.cfg.seed ^ c.iteration as u64, u64::MAX));
        t.spawn_workers();
        Ok(t)
    }

    fn spawn_workers(&mut self) {
        let setup = &self.setup;
        let salt = self.iteration as u64 * 1_000_003;
        self.workers = (0..setup.cfg.ppo.envs)
            .map(|i| {
                let env = Env::new(setup.model.clone(), setup.sim.clone(), env_seed(setup.cfg.seed, salt + i as u64));
                let mut w = Worker {
                    desc: StateDescriptor {
                        joint_rot: Vec::new(),
                        joint_vel: Vec::new(),
                        ee_rel_pos: Vec::new(),
                        root_pos: crate::rotmath::Vec3::ZERO,
                        root_rot: crate::rotmath::Quat::IDENTITY,
                    },
                    env,
                    mode: 0,
                    obs: Vec::new(),
                    hist: TaskHistory::default(),
                    ep_descs: Vec::new(),
                    ep_return: 0.0,
                    ep_len: 0,
                    ep_me: 0.0,
                    ep_matching: None,
                    ep_mixed: false,
                    ep_first_rec: 0,
                    ep_first_k: 0,
                    records: Vec::new(),
                    ends: Vec::new(),
                    divergences: 0,
                };
                w.reset(setup);
                w
            })
            .collect();
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: TOOL_VERSION.to_string(),
            config_hash: self.setup.cfg.hash(),
            iteration: self.iteration,
            config: self.setup.cfg.clone(),
            model: self.setup.model.clone(),
            reference_motion: self
                .setup
                .reference
                .as_ref()
                .map(|r| serde_json::from_str(&motion_to_json(&r.motion)).expect("motion json")),
            policy: self.policy.clone(),
            value: self.value.clone(),
            disc: self.disc.clone(),
            policy_opt: self.policy_opt.clone(),
            value_opt: self.value_opt.clone(),
            disc_opt: self.disc_opt.clone(),
            matchings: self.matchings.clone(),
            lr_halved: self.lr_halved,
        }
    }

    /// Runs the configured number of iterations, streaming metrics rows to
    /// `on_iter`.
    pub fn run(&mut self, mut on_iter: impl FnMut(&IterMetrics)) -> Result<Vec<IterMetrics>, TrainError> {
        let mut out = Vec::new();
        while self.iteration < self.setup.cfg.iterations {
            let m = self.iterate()?;
            on_iter(&m);
            out.push(m);
        }
        Ok(out)
    }

    pub fn iterate(&mut self) -> Result<IterMetrics, TrainError> {
        let steps = self.setup.cfg.ppo.steps;
        let setup = &self.setup;
        let policy = &self.policy;
        let matchings = &self.matchings;
        let allowed = &self.allowed;
        for w in &mut self.workers {
            w.records.clear();
            w.ends.clear();
            w.divergences = 0;
            w.ep_first_rec = 0;
            w.ep_first_k = w.env.steps;
        }
        self.workers.par_iter_mut().try_for_each(|w| -> Result<(), NnError> {
            for _ in 0..steps {
                w.step(setup, policy, matchings, allowed)?;
            }
            Ok(())
        })?;

        let n_env = self.workers.len();
        let n = n_env * steps;
        let obs_dim = self.policy.obs_dim();
        let aug_dim = self.value.aug_dim;
        let act_dim = self.policy.act_dim();

        // adversarial rewards for every transition
        let adv_r: Vec<f64> = match &self.disc {
            Some(d) => {
                let w = d.input_dim();
                let mut x = Array2::zeros((n, w));
                for (e, wk) in self.workers.iter().enumerate() {
                    for (t, r) in wk.records.iter().enumerate() {
                        x.row_mut(e * steps + t).assign(&ndarray::ArrayView1::from(&r.trans));
                    }
                }
                d.rewards(x.view())?
            }
            None => vec![0.0; n],
        };

        let weights = self.setup.cfg.rewards.weights();
        let mut rewards = vec![0.0; n];
        let mut obs = Array2::zeros((n, obs_dim));
        let mut critic = Array2::zeros((n, obs_dim + aug_dim));
        let mut u = Array2::zeros((n, act_dim));
        let mut logp = vec![0.0; n];
        let mut dones = vec![false; n];
        let (mut sum_adv, mut sum_me, mut sum_r) = (0.0, 0.0, 0.0);
        let mut boot_rows: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut finished = 0usize;
        let mut divergences = 0usize;
        for (e, wk) in self.workers.iter_mut().enumerate() {
            divergences += wk.divergences;
            for (t, rec) in wk.records.iter().enumerate() {
                let i = e * steps + t;
                let r = combined_reward(adv_r[i], rec.me, &rec.aux, &weights) + weights.task * rec.task;
                if !r.is_finite() {
                    return Err(TrainError::Diverged(format!("non-finite reward at env {e} step {t}")));
                }
                rewards[i] = r;
                sum_adv += adv_r[i];
                sum_me += rec.me;
                sum_r += r;
                obs.row_mut(i).assign(&ndarray::ArrayView1::from(&rec.obs));
                for k in 0..obs_dim {
                    critic[[i, k]] = rec.obs[k];
                }
                for k in 0..aug_dim {
                    critic[[i, obs_dim + k]] = rec.aug[k];
                }
                u.row_mut(i).assign(&ndarray::ArrayView1::from(&rec.u));
                logp[i] = rec.logp;
                dones[i] = rec.done;
                if let Some(b) = &rec.bootstrap {
                    boot_rows.push((i, b.clone()));
                }
                wk.ep_return += r;
                wk.ep_len += 1;
                if rec.done {
                    self.recent.push_back((wk.ep_return, wk.ep_len));
                    finished += 1;
                    wk.ep_return = 0.0;
                    wk.ep_len = 0;
                }
            }
        }
        let window = n_env.max(16);
        while self.recent.len() > window {
            self.recent.pop_front();
        }

        // values: all steps, then the states after each env's last step,
        // then states where the horizon cut an episode
        let mut vin = Array2::zeros((n + n_env + boot_rows.len(), obs_dim + aug_dim));
        vin.slice_mut(ndarray::s![..n, ..]).assign(&critic);
        for (e, wk) in self.workers.iter().enumerate() {
            let mut x = wk.obs.clone();
            x.extend(self.setup.critic_aug(wk.env.steps, &self.matchings[wk.mode]));
            vin.row_mut(n + e).assign(&ndarray::ArrayView1::from(&x));
        }
        for (k, (_, b)) in boot_rows.iter().enumerate() {
            vin.row_mut(n + n_env + k).assign(&ndarray::ArrayView1::from(b));
        }
        let values = self.value.values(vin.view())?;
        let gamma = self.setup.cfg.ppo.gamma;
        // horizon cut: fold the bootstrapped value into the reward
        for (k, (i, _)) in boot_rows.iter().enumerate() {
            rewards[*i] += gamma * values[n + n_env + k];
        }
        let mut adv = vec![0.0; n];
        let mut ret = vec![0.0; n];
        for e in 0..n_env {
            let sl = e * steps..(e + 1) * steps;
            let (a, r) = gae(
                &rewards[sl.clone()],
                &values[sl.clone()],
                &dones[sl.clone()],
                values[n + e],
                gamma,
                self.setup.cfg.ppo.gae_lambda,
            );
            adv[sl.clone()].copy_from_slice(&a);
            ret[sl].copy_from_slice(&r);
        }
        normalize_advantages(&mut adv);

        let batch = PpoBatch { obs: obs.clone(), critic: critic.clone(), u, logp, adv, returns: ret };
        let p = PpoParams {
            clip: self.setup.cfg.ppo.clip,
            epochs: self.setup.cfg.ppo.epochs,
            minibatch: self.setup.cfg.ppo.minibatch,
            max_grad_norm: self.setup.cfg.ppo.max_grad_norm,
        };
        let stats = ppo_update(
            &batch,
            &mut self.policy,
            &mut self.value,
            &mut self.policy_opt,
            &mut self.value_opt,
            &p,
            &mut self.rng,
        )?;
        if stats.skipped {
            log::warn!("non-finite PPO loss at iteration {}; update skipped", self.iteration);
            if !self.lr_halved {
                self.policy_opt.lr *= 0.5;
                self.value_opt.lr *= 0.5;
                self.lr_halved = true;
            }
            self.consecutive_skips += 1;
            if self.consecutive_skips >= 3 {
                return Err(TrainError::Diverged("three consecutive non-finite updates".into()));
            }
        } else {
            self.consecutive_skips = 0;
        }

        let disc_accuracy = self.update_disc()?;
        self.policy.obs_norm.update_batch(obs.view());
        self.value.norm.update_batch(critic.view());

        self.iteration += 1;
        let every = self.setup.cfg.matching.refresh_every;
        if self.setup.reference.is_some() && every > 0 && self.iteration % every == 0 {
            self.refresh_matchings()?;
        }

        let (mean_return, mean_len) = if self.recent.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let k = self.recent.len() as f64;
            (
                self.recent.iter().map(|r| r.0).sum::<f64>() / k,
                self.recent.iter().map(|r| r.1 as f64).sum::<f64>() / k,
            )
        };
        let nf = n as f64;
        Ok(IterMetrics {
            iteration: self.iteration,
            mean_return,
            mean_episode_length: mean_len,
            mean_step_reward: sum_r / nf,
            mean_adv_reward: sum_adv / nf,
            mean_me_reward: sum_me / nf,
            disc_accuracy,
            matched_pairs: self.matchings.iter().map(|m| m.len()).max().unwrap_or(0),
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            clip_fraction: stats.clip_fraction,
            lr: self.policy_opt.lr,
            episodes: finished,
            divergences,
        })
    }

    fn update_disc(&mut self) -> Result<f64, TrainError> {
        let (Some(d), Some(opt), Some(r)) = (&mut self.disc, &mut self.disc_opt, &self.setup.reference) else {
            return Ok(f64::NAN);
        };
        let rows: Vec<&Vec<f64>> = self.workers.iter().flat_map(|w| w.records.iter().map(|r| &r.trans)).collect();
        let w = d.input_dim();
        let mut pol = Array2::zeros((rows.len(), w));
        for (i, t) in rows.iter().enumerate() {
            pol.row_mut(i).assign(&ndarray::ArrayView1::from(&t[..]));
        }
        if d.cfg.normalize_inputs {
            d.norm.update_batch(pol.view());
            d.norm.update_batch(r.transitions.view());
        }
        let b = self.setup.cfg.disc.batch.min(pol.nrows()).max(1);
        let mut acc = 0.0;
        let updates = self.setup.cfg.disc.updates;
        for _ in 0..updates {
            let pi: Vec<usize> = (0..b).map(|_| self.rng.gen_range(0..pol.nrows())).collect();
            let ri: Vec<usize> = (0..b).map(|_| self.rng.gen_range(0..r.transitions.nrows())).collect();
            let xp = crate::nn::gather_rows(&pol, &pi);
            let xr = crate::nn::gather_rows(&r.transitions, &ri);
            let (stats, grad) = d.loss_and_grad(xr.view(), xp.view())?;
            if !stats.loss.is_finite() || opt.step(d.net.params_mut(), &grad).is_err() {
                log::warn!("non-finite discriminator loss; update skipped");
                continue;
            }
            acc += stats.accuracy;
        }
        Ok(if updates > 0 { acc / updates as f64 } else { f64::NAN })
    }

    /// Fresh rollouts per initialisation mode; keeps the matching of the
    /// episode with the most pairs, or the previous one if all are empty.
    pub fn refresh_matchings(&mut self) -> Result<(), TrainError> {
        let episodes = self.setup.cfg.matching.episodes;
        for mode in 0..self.matchings.len() {
            let seeds: Vec<u64> = (0..episodes)
                .map(|e| env_seed(self.setup.cfg.seed ^ 0x6d61_7463_6800_0000, (self.iteration * 64 + mode * 16 + e) as u64))
                .collect();
            let setup = &self.setup;
            let policy = &self.policy;
            let found: Vec<Matching> = seeds
                .par_iter()
                .map(|&s| {
                    let descs = rollout_descriptors(setup, policy, setup.cfg.matching.init_modes[mode], s, true)?;
                    Ok(setup.match_episode(&descs).expect("reference present").0)
                })
                .collect::<Result<_, NnError>>()?;
            match select_best_matching(&found) {
                Ok(m) => self.matchings[mode] = m,
                Err(e) => log::warn!("matching refresh for mode {mode}: {e}; keeping previous matching"),
            }
        }
        Ok(())
    }
}

/// One full episode; returns the descriptors `s_0..s_T`.
pub fn rollout_descriptors(
    setup: &Setup,
    policy: &PolicyNet,
    init: InitKind,
    seed: u64,
    stochastic: bool,
) -> Result<Vec<StateDescriptor>, NnError> {
    let mut env = Env::new(setup.model.clone(), setup.sim.clone(), seed);
    env.reset(init_mode(init), setup.reference.as_ref().map(|r| &r.motion));
    let mut descs = vec![env.descriptor()];
    loop {
        let o = setup.observe(&mut env);
        let u = if stochastic { policy.sample(&o, env.rng())?.0 } else { policy.mean(&o)? };
        let a = policy.to_action(&u);
        match env.step(&a) {
            Ok(s) => {
                descs.push(env.descriptor());
                if s.termination != Termination::Continue {
                    break;
                }
            }
            Err(_) => break,
        }
    }
    Ok(descs)
}

/// Trains per the config, writing `metrics.csv`, `config.toml` and
/// checkpoints to `out` when given.
pub fn train(cfg: RunConfig, out: Option<&Path>) -> Result<(Trainer, Vec<IterMetrics>), TrainError> {
    let mut t = Trainer::from_config(cfg)?;
    let hash = t.setup.cfg.hash();
    let mut csv = format!("# mimic {TOOL_VERSION} config {hash}\n{METRICS_HEADER}\n");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), format!("# mimic {TOOL_VERSION} config {hash}\n{}", t.setup.cfg.to_toml()))?;
        t.checkpoint().save(&dir.join("checkpoint_0000.json"))?;
    }
    let metrics = t.run(|m| {
        csv.push_str(&m.csv_row());
        csv.push('\n');
    })?;
    if let Some(dir) = out {
        std::fs::write(dir.join("metrics.csv"), &csv)?;
        if t.iteration > 0 {
            let c = t.checkpoint();
            c.save(&dir.join(format!("checkpoint_{:04}.json", t.iteration)))?;
            c.save(&dir.join("checkpoint_final.json"))?;
        }
    }
    Ok((t, metrics))
}

/// Mean undiscounted task reward per episode of the current policy.
pub fn mean_episode_return(setup: &Setup, policy: &PolicyNet, episodes: usize, seed: u64, stochastic: bool) -> Result<f64, NnError> {
    let returns: Vec<f64> = (0..episodes)
        .into_par_iter()
        .map(|e| {
            let mut env = Env::new(setup.model.clone(), setup.sim.clone(), env_seed(seed, e as u64));
            env.reset(init_mode(setup.cfg.matching.init_modes[0]), setup.reference.as_ref().map(|r| &r.motion));
            let mut hist = TaskHistory::default();
            let mut total = 0.0;
            loop {
                let o = setup.observe(&mut env);
                let u = if stochastic { policy.sample(&o, env.rng())?.0 } else { policy.mean(&o)? };
                let Ok(s) = env.step(&policy.to_action(&u)) else { break };
                total += match setup.cfg.task {
                    TaskKind::Swing => swing_reward(&env.state),
                    TaskKind::RunBackward | TaskKind::Kick => {
                        baseline_task_reward(setup.cfg.task.baseline().unwrap(), &setup.model, &env.state, &mut hist)
                    }
                    TaskKind::Imitate => 0.0,
                };
                if s.termination != Termination::Continue {
                    break;
                }
            }
            Ok(total)
        })
        .collect::<Result<_, NnError>>()?;
    Ok(returns.iter().sum::<f64>() / episodes.max(1) as f64)
}

/// Per-row flat features helper for external callers (disc inputs).
pub fn transitions_of(descs: &[StateDescriptor]) -> Array2<f64> {
    let w = descs.first().map_or(0, |d| d.flatten(true).len());
    let mut x = Array2::zeros((descs.len().saturating_sub(1), 2 * w));
    for i in 0..descs.len().saturating_sub(1) {
        x.row_mut(i).assign(&ndarray::ArrayView1::from(&transition_features(&descs[i], &descs[i + 1])));
    }
    x
}
