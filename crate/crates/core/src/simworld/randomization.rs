//! Per-episode physics randomization and per-step observation/action noise.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Gaussian rows are truncated at this many standard deviations.
pub const GAUSS_TRUNC: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandParam {
    /// Noise added to every observation entry.
    ObsNoise,
    /// Noise on the projected-gravity observation entries.
    ObsGravity,
    /// Noise on joint-angle observation entries.
    ObsRot,
    /// Noise on joint-velocity observation entries.
    ObsVel,
    ActionNoise,
    Gravity,
    /// All link masses.
    Mass,
    /// Root link mass only.
    TrunkMass,
    Friction,
    Restitution,
    Damping,
    Stiffness,
    LimitLower,
    LimitUpper,
}

impl RandParam {
    /// Noise rows are sampled every step; the rest once per episode.
    pub fn is_noise(self) -> bool {
        matches!(self, RandParam::ObsNoise | RandParam::ObsGravity | RandParam::ObsRot | RandParam::ObsVel | RandParam::ActionNoise)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RandOp {
    Additive,
    Scaling,
}

impl RandOp {
    /// Value meaning "no randomization".
    pub fn nominal(self) -> f64 {
        match self {
            RandOp::Additive => 0.0,
            RandOp::Scaling => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dist {
    Uniform { lo: f64, hi: f64 },
    /// Normal with standard deviation `std`, truncated to `mean ± 4 std`.
    Gaussian { mean: f64, std: f64 },
}

impl Dist {
    pub fn interval(&self) -> (f64, f64) {
        match *self {
            Dist::Uniform { lo, hi } => (lo, hi),
            Dist::Gaussian { mean, std } => (mean - GAUSS_TRUNC * std, mean + GAUSS_TRUNC * std),
        }
    }

    pub fn center(&self) -> f64 {
        match *self {
            Dist::Uniform { lo, hi } => 0.5 * (lo + hi),
            Dist::Gaussian { mean, .. } => mean,
        }
    }

    /// Standard deviation of the (untruncated) distribution.
    pub fn std(&self) -> f64 {
        match *self {
            Dist::Uniform { lo, hi } => (hi - lo) / 12f64.sqrt(),
            Dist::Gaussian { std, .. } => std,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Dist::Uniform { lo, hi } => {
                if hi > lo {
                    rng.gen_range(lo..=hi)
                } else {
                    lo
                }
            }
            Dist::Gaussian { mean, std } => {
                if std <= 0.0 {
                    return mean;
                }
                loop {
                    let z: f64 = StandardNormal.sample(rng);
                    if z.abs() <= GAUSS_TRUNC {
                        return mean + std * z;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandRow {
    pub param: RandParam,
    pub op: RandOp,
    pub dist: Dist,
    /// Linearly blend from the nominal value over the ramp window.
    #[serde(default)]
    pub ramp: bool,
    /// Drawn once per environment instead of once per episode.
    #[serde(default)]
    pub once: bool,
}

impl RandRow {
    pub fn new(param: RandParam, op: RandOp, dist: Dist) -> Self {
        RandRow { param, op, dist, ramp: false, once: false }
    }

    fn ramped(mut self) -> Self {
        self.ramp = true;
        self
    }

    fn once(mut self) -> Self {
        self.once = true;
        self
    }

    /// Draw, blended toward the nominal value by `ramp_frac` when the row
    /// ramps in.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, ramp_frac: f64) -> f64 {
        let v = self.dist.sample(rng);
        if self.ramp {
            let f = ramp_frac.clamp(0.0, 1.0);
            let n = self.op.nominal();
            n + f * (v - n)
        } else {
            v
        }
    }

    /// Every possible draw lies in this interval (any ramp fraction).
    pub fn interval(&self) -> (f64, f64) {
        let (lo, hi) = self.dist.interval();
        if self.ramp {
            let n = self.op.nominal();
            (lo.min(n), hi.max(n))
        } else {
            (lo, hi)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RandomizationSpec {
    #[serde(default)]
    pub rows: Vec<RandRow>,
    /// Environment steps over which ramped rows reach full width.
    #[serde(default)]
    pub ramp_steps: u64,
}

impl RandomizationSpec {
    pub fn none() -> Self {
        RandomizationSpec::default()
    }

    pub fn humanoid() -> Self {
        use Dist::*;
        use RandOp::*;
        use RandParam::*;
        let g = |std| Gaussian { mean: 0.0, std };
        let u = |lo, hi| Uniform { lo, hi };
        RandomizationSpec {
            rows: vec![
                RandRow::new(ObsNoise, Additive, g(0.002)),
                RandRow::new(ActionNoise, Additive, g(0.02)),
                RandRow::new(Gravity, Additive, g(0.4)).ramped(),
                RandRow::new(Mass, Scaling, u(0.5, 1.5)).once(),
                RandRow::new(Friction, Scaling, u(0.7, 1.3)).ramped(),
                RandRow::new(Restitution, Scaling, u(0.0, 0.7)).ramped(),
                RandRow::new(Damping, Scaling, u(0.5, 1.5)).ramped(),
                RandRow::new(Stiffness, Scaling, u(0.5, 1.5)).ramped(),
                RandRow::new(LimitLower, Additive, g(0.01)).ramped(),
                RandRow::new(LimitUpper, Additive, g(0.01)).ramped(),
            ],
            ramp_steps: 3000,
        }
    }

    pub fn quadruped() -> Self {
        use Dist::*;
        use RandOp::*;
        use RandParam::*;
        let u = |lo, hi| Uniform { lo, hi };
        RandomizationSpec {
            rows: vec![
                RandRow::new(ObsGravity, Additive, u(-0.05, 0.05)),
                RandRow::new(ObsRot, Additive, u(-0.01, 0.01)),
                RandRow::new(ObsVel, Additive, u(-1.5, 1.5)),
                RandRow::new(TrunkMass, Additive, u(-1.0, 1.0)),
                RandRow::new(Friction, Scaling, u(0.3, 3.0)),
                RandRow::new(Stiffness, Scaling, u(0.7, 1.3)),
                RandRow::new(Damping, Scaling, u(0.7, 1.3)),
            ],
            ramp_steps: 0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "none" => Some(Self::none()),
            "humanoid" => Some(Self::humanoid()),
            "quadruped" => Some(Self::quadruped()),
            _ => None,
        }
    }

    pub fn row(&self, p: RandParam) -> Option<&RandRow> {
        self.rows.iter().find(|r| r.param == p)
    }

    pub fn validate(&self) -> Result<(), String> {
        for r in &self.rows {
            let ok = match r.dist {
                Dist::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
                Dist::Gaussian { mean, std } => mean.is_finite() && std.is_finite() && std >= 0.0,
            };
            if !ok {
                return Err(format!("invalid distribution for {:?}", r.param));
            }
        }
        Ok(())
    }

    pub fn ramp_fraction(&self, env_steps: u64) -> f64 {
        if self.ramp_steps == 0 {
            1.0
        } else {
            (env_steps as f64 / self.ramp_steps as f64).min(1.0)
        }
    }
}

/// One episode's physics parameters plus the noise distributions in force.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomizationDraw {
    pub gravity_offset: f64,
    pub mass_scale: f64,
    pub trunk_mass_offset: f64,
    pub friction_scale: f64,
    pub restitution_scale: f64,
    pub damping_scale: f64,
    pub stiffness_scale: f64,
    pub lower_offset: Vec<f64>,
    pub upper_offset: Vec<f64>,
    /// `(row, ramp fraction)` for rows sampled every step.
    pub noise: Vec<(RandRow, f64)>,
}

impl RandomizationDraw {
    pub fn nominal(n_joints: usize) -> Self {
        RandomizationDraw {
            gravity_offset: 0.0,
            mass_scale: 1.0,
            trunk_mass_offset: 0.0,
            friction_scale: 1.0,
            restitution_scale: 1.0,
            damping_scale: 1.0,
            stiffness_scale: 1.0,
            lower_offset: vec![0.0; n_joints],
            upper_offset: vec![0.0; n_joints],
            noise: Vec::new(),
        }
    }

    pub fn noise_row(&self, p: RandParam) -> Option<(&RandRow, f64)> {
        self.noise.iter().find(|(r, _)| r.param == p).map(|(r, f)| (r, *f))
    }
}

/// Draw a fresh set of episode parameters. Rows flagged `once` keep the
/// value from `previous` when one is supplied.
pub fn sample_randomization<R: Rng + ?Sized>(
    spec: &RandomizationSpec,
    n_joints: usize,
    env_steps: u64,
    previous: Option<&RandomizationDraw>,
    rng: &mut R,
) -> RandomizationDraw {
    let frac = spec.ramp_fraction(env_steps);
    let mut d = RandomizationDraw::nominal(n_joints);
    for row in &spec.rows {
        if row.param.is_noise() {
            d.noise.push((*row, frac));
            continue;
        }
        if row.once {
            if let Some(prev) = previous {
                match row.param {
                    RandParam::Mass => d.mass_scale = prev.mass_scale,
                    RandParam::TrunkMass => d.trunk_mass_offset = prev.trunk_mass_offset,
                    _ => {}
                }
                if matches!(row.param, RandParam::Mass | RandParam::TrunkMass) {
                    continue;
                }
            }
        }
        use RandParam::*;
        match row.param {
            Gravity => d.gravity_offset = row.sample(rng, frac),
            Mass => d.mass_scale = row.sample(rng, frac),
            TrunkMass => d.trunk_mass_offset = row.sample(rng, frac),
            Friction => d.friction_scale = row.sample(rng, frac),
            Restitution => d.restitution_scale = row.sample(rng, frac),
            Damping => d.damping_scale = row.sample(rng, frac),
            Stiffness => d.stiffness_scale = row.sample(rng, frac),
            LimitLower => d.lower_offset = (0..n_joints).map(|_| row.sample(rng, frac)).collect(),
            LimitUpper => d.upper_offset = (0..n_joints).map(|_| row.sample(rng, frac)).collect(),
            ObsNoise | ObsGravity | ObsRot | ObsVel | ActionNoise => unreachable!(),
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn humanoid_friction_in_range() {
        let spec = RandomizationSpec::humanoid();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let d = sample_randomization(&spec, 3, 1_000_000, None, &mut rng);
            assert!((0.7..=1.3).contains(&d.friction_scale));
        }
    }

    #[test]
    fn zero_width_is_nominal() {
        let mut spec = RandomizationSpec::humanoid();
        for r in &mut spec.rows {
            r.dist = match r.dist {
                Dist::Uniform { .. } => Dist::Uniform { lo: r.op.nominal(), hi: r.op.nominal() },
                Dist::Gaussian { .. } => Dist::Gaussian { mean: r.op.nominal(), std: 0.0 },
            };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut d = sample_randomization(&spec, 2, 10_000, None, &mut rng);
        d.noise.clear();
        assert_eq!(d, RandomizationDraw::nominal(2));
    }

    #[test]
    fn quadruped_trunk_offset_range() {
        let spec = RandomizationSpec::quadruped();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let d = sample_randomization(&spec, 4, 0, None, &mut rng);
            assert!((-1.0..=1.0).contains(&d.trunk_mass_offset));
        }
    }

    #[test]
    fn ramp_starts_at_nominal() {
        let spec = RandomizationSpec::humanoid();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = sample_randomization(&spec, 2, 0, None, &mut rng);
        assert_eq!(d.friction_scale, 1.0);
        assert_eq!(d.gravity_offset, 0.0);
        // mass is not ramped
        assert_ne!(d.mass_scale, 1.0);
    }

    #[test]
    fn once_rows_persist() {
        let spec = RandomizationSpec::humanoid();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = sample_randomization(&spec, 2, 5000, None, &mut rng);
        let b = sample_randomization(&spec, 2, 5000, Some(&a), &mut rng);
        assert_eq!(a.mass_scale, b.mass_scale);
        assert_ne!(a.friction_scale, b.friction_scale);
    }
}
