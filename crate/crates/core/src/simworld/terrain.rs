//! One-dimensional terrain height fields.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TerrainSpec {
    Plane,
    /// Cells of width `cell` whose height is drawn from `{0, step}`.
    RandUniform {
        #[serde(default = "default_cell")]
        cell: f64,
        #[serde(default = "default_rand_step")]
        step: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Stepped cone centred at `x = 0` with a flat top of width `platform`.
    PyramidSteps {
        #[serde(default = "default_cell")]
        step_width: f64,
        #[serde(default = "default_pyramid_step")]
        step_height: f64,
        #[serde(default = "default_platform")]
        platform: f64,
        #[serde(default = "default_pyramid_levels")]
        levels: u32,
    },
    /// `h(x) = 0.5 cos(pi x / 6)`.
    Wave,
}

fn default_cell() -> f64 {
    0.5
}
fn default_rand_step() -> f64 {
    0.2
}
fn default_pyramid_step() -> f64 {
    0.05
}
fn default_platform() -> f64 {
    1.0
}
fn default_pyramid_levels() -> u32 {
    20
}

impl Default for TerrainSpec {
    fn default() -> Self {
        TerrainSpec::Plane
    }
}

impl TerrainSpec {
    pub fn rand_uniform(seed: u64) -> Self {
        TerrainSpec::RandUniform { cell: 0.5, step: 0.2, seed }
    }

    pub fn pyramid() -> Self {
        TerrainSpec::PyramidSteps { step_width: 0.5, step_height: 0.05, platform: 1.0, levels: 20 }
    }

    /// Short lowercase name used in reports.
    pub fn name(&self) -> &'static str {
        match self {
            TerrainSpec::Plane => "plane",
            TerrainSpec::RandUniform { .. } => "rand",
            TerrainSpec::PyramidSteps { .. } => "pyramid",
            TerrainSpec::Wave => "wave",
        }
    }

    pub fn from_name(name: &str, seed: u64) -> Option<Self> {
        match name {
            "plane" => Some(TerrainSpec::Plane),
            "rand" | "rand_uniform" => Some(TerrainSpec::rand_uniform(seed)),
            "pyramid" => Some(TerrainSpec::pyramid()),
            "wave" => Some(TerrainSpec::Wave),
            _ => None,
        }
    }
}

/// splitmix64 finaliser; used to give each cell an independent bit.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Height (m) and slope `dh/dx` at `x`.
pub fn terrain_height(spec: &TerrainSpec, x: f64) -> (f64, f64) {
    use std::f64::consts::PI;
    match *spec {
        TerrainSpec::Plane => (0.0, 0.0),
        TerrainSpec::RandUniform { cell, step, seed } => {
            let k = (x / cell).floor() as i64;
            let bit = mix(seed ^ mix(k as u64)) & 1;
            (if bit == 1 { step } else { 0.0 }, 0.0)
        }
        TerrainSpec::PyramidSteps { step_width, step_height, platform, levels } => {
            let r = x.abs() - 0.5 * platform;
            let down = if r <= 0.0 { 0 } else { (r / step_width).ceil() as i64 };
            let level = (levels as i64 - down).max(0);
            (level as f64 * step_height, 0.0)
        }
        TerrainSpec::Wave => {
            let k = PI / 6.0;
            (0.5 * (k * x).cos(), -0.5 * k * (k * x).sin())
        }
    }
}
