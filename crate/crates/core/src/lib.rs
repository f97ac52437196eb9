//! Particle-grid neural dynamics for deformable objects.

pub mod dataset;
pub mod encoder;
pub mod dynamics;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod par;
pub mod planner;
pub mod skinning;
pub mod spatial;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod types;

pub use error::{Error, Result};
pub use types::{Action, ActionType, ArmCommand, Backbone, ParticleState, RunConfig, Vec3};
