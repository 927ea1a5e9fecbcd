//! Planar articulated simulator: model, terrain, randomization, dynamics and
//! the episodic environment.

pub mod dynamics;
pub mod env;
pub mod model;
pub mod randomization;
pub mod terrain;

pub use dynamics::{mechanical_energy, pd_torque, step, ContactParams, Physics, SimError, SimState, StepInfo};
pub use env::{check_termination, state_descriptor, Env, InitMode, SimConfig, Termination};
pub use model::{RobotKind, RobotModel};
pub use randomization::{sample_randomization, RandomizationDraw, RandomizationSpec};
pub use terrain::{terrain_height, TerrainSpec};
