//! Domain types shared across the crate.

use nalgebra::{Isometry3, Quaternion, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Exec;

pub type Vec3 = Vector3<f64>;

/// Lagrangian object state: particle positions plus a velocity ring of
/// `h + 1` frames, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleState {
    pub positions: Vec<Vec3>,
    pub velocity_history: Vec<Vec<Vec3>>,
    pub time: f64,
}

impl ParticleState {
    pub fn new(positions: Vec<Vec3>, velocity_history: Vec<Vec<Vec3>>, time: f64) -> Result<Self> {
        let s = ParticleState { positions, velocity_history, time };
        s.validate()?;
        Ok(s)
    }

    /// State at rest: every history slot zero.
    pub fn at_rest(positions: Vec<Vec3>, history: usize, time: f64) -> Self {
        let n = positions.len();
        ParticleState {
            positions,
            velocity_history: vec![vec![Vec3::zeros(); n]; history + 1],
            time,
        }
    }

    pub fn n(&self) -> usize {
        self.positions.len()
    }

    /// Number of history frames beyond the current one.
    pub fn history(&self) -> usize {
        self.velocity_history.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.is_empty() {
            return Err(Error::Contract("particle state must hold at least one particle".into()));
        }
        if self.velocity_history.is_empty() {
            return Err(Error::Contract("velocity history must hold at least one frame".into()));
        }
        for (i, frame) in self.velocity_history.iter().enumerate() {
            if frame.len() != self.positions.len() {
                return Err(Error::Contract(format!(
                    "velocity frame {i} has {} rows, expected {}",
                    frame.len(),
                    self.positions.len()
                )));
            }
        }
        let finite = self
            .positions
            .iter()
            .chain(self.velocity_history.iter().flatten())
            .all(|v| v.iter().all(|x| x.is_finite()));
        if !finite || !self.time.is_finite() {
            return Err(Error::Validation("particle state holds non-finite values".into()));
        }
        Ok(())
    }

    /// Keep only the listed particles, preserving history alignment.
    pub fn subset(&self, indices: &[usize]) -> ParticleState {
        ParticleState {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            velocity_history: self
                .velocity_history
                .iter()
                .map(|f| indices.iter().map(|&i| f[i]).collect())
                .collect(),
            time: self.time,
        }
    }

    pub fn translated(&self, delta: &Vec3) -> ParticleState {
        ParticleState {
            positions: self.positions.iter().map(|p| p + delta).collect(),
            velocity_history: self.velocity_history.clone(),
            time: self.time,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionType {
    Grasped,
    Nonprehensile,
}

impl ActionType {
    pub fn code(self) -> u8 {
        match self {
            ActionType::Grasped => 0,
            ActionType::Nonprehensile => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ActionType::Grasped),
            1 => Some(ActionType::Nonprehensile),
            _ => None,
        }
    }
}

/// Command for a single end effector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmCommand {
    pub action_type: ActionType,
    pub pose: Isometry3<f64>,
    /// Angular velocity (rad/s).
    pub angular: Vec3,
    /// Linear velocity (m/s).
    pub linear: Vec3,
    /// Gripper opening (m).
    pub gripper_open: f64,
}

impl ArmCommand {
    pub fn grasp_at(position: Vec3, linear: Vec3) -> Self {
        ArmCommand {
            action_type: ActionType::Grasped,
            pose: Isometry3::from_parts(Translation3::from(position), UnitQuaternion::identity()),
            angular: Vec3::zeros(),
            linear,
            gripper_open: 0.0,
        }
    }

    pub fn position(&self) -> Vec3 {
        self.pose.translation.vector
    }

    /// Packed pose `[qw, qx, qy, qz, tx, ty, tz]`.
    pub fn pose_array(&self) -> [f64; 7] {
        let q = self.pose.rotation.quaternion();
        let t = self.pose.translation.vector;
        [q.w, q.i, q.j, q.k, t.x, t.y, t.z]
    }

    pub fn from_arrays(action_type: ActionType, pose: [f64; 7], twist: [f64; 6], open: f64) -> Result<Self> {
        let q = Quaternion::new(pose[0], pose[1], pose[2], pose[3]);
        if (q.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("quaternion norm {} is not unit", q.norm())));
        }
        if open < 0.0 {
            return Err(Error::Validation(format!("gripper opening {open} is negative")));
        }
        Ok(ArmCommand {
            action_type,
            pose: Isometry3::from_parts(
                Translation3::new(pose[4], pose[5], pose[6]),
                UnitQuaternion::new_unchecked(q),
            ),
            angular: Vec3::new(twist[0], twist[1], twist[2]),
            linear: Vec3::new(twist[3], twist[4], twist[5]),
            gripper_open: open,
        })
    }

    pub fn translated(&self, delta: &Vec3) -> ArmCommand {
        let mut c = *self;
        c.pose.translation.vector += delta;
        c
    }
}

/// Robot action at one time step: one or two arms.
#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub arms: Vec<ArmCommand>,
}

impl Action {
    pub fn new(arms: Vec<ArmCommand>) -> Result<Self> {
        if arms.is_empty() || arms.len() > 2 {
            return Err(Error::Validation(format!("arm count {} not in {{1, 2}}", arms.len())));
        }
        Ok(Action { arms })
    }

    pub fn single(arm: ArmCommand) -> Self {
        Action { arms: vec![arm] }
    }

    pub fn translated(&self, delta: &Vec3) -> Action {
        Action { arms: self.arms.iter().map(|a| a.translated(delta)).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    /// Velocity field queried on the Eulerian grid, transferred by B-spline.
    #[default]
    Grid,
    /// Ablation: velocity field queried directly at particle positions.
    Particle,
}

impl std::str::FromStr for Backbone {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(Backbone::Grid),
            "particle" => Ok(Backbone::Particle),
            other => Err(Error::Parameter(format!("unknown backbone `{other}`"))),
        }
    }
}

/// Run configuration. Serialized as JSON; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid_l: usize,
    pub grid_delta: f64,
    pub radius_r: f64,
    pub history_h: usize,
    pub horizon_k: usize,
    pub dt: f64,
    pub scale_s: f64,
    pub grasp_radius_a: f64,
    pub friction_mu: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// World-frame table height; `None` disables ground editing.
    pub ground_height: Option<f64>,
    pub backbone: Backbone,
    pub feature_dim: usize,
    pub encoder_hidden: usize,
    pub field_hidden: Vec<usize>,
    pub posenc_freqs: usize,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub train_steps: usize,
    pub eval_every: usize,
    pub exec: Exec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            grid_l: 50,
            grid_delta: 0.02,
            radius_r: 0.2,
            history_h: 2,
            horizon_k: 5,
            dt: 0.1,
            scale_s: 1.0,
            grasp_radius_a: 0.1,
            friction_mu: 0.5,
            batch_size: 32,
            seed: 0,
            ground_height: Some(0.0),
            backbone: Backbone::Grid,
            feature_dim: 64,
            encoder_hidden: 64,
            field_hidden: vec![128, 128],
            posenc_freqs: 6,
            learning_rate: 1e-4,
            max_grad_norm: 1.0,
            train_steps: 2000,
            eval_every: 100,
            exec: Exec::Parallel,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Parameter(m.to_string()));
        if self.grid_l < 2 {
            return bad("grid_l must be at least 2");
        }
        if !(self.grid_delta > 0.0) {
            return bad("grid_delta must be positive");
        }
        if !(self.radius_r > 0.0) {
            return bad("radius_r must be positive");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !(self.scale_s > 0.0) {
            return bad("scale_s must be positive");
        }
        if !(self.grasp_radius_a > 0.0) {
            return bad("grasp_radius_a must be positive");
        }
        if self.friction_mu < 0.0 {
            return bad("friction_mu must be non-negative");
        }
        if self.batch_size == 0 || self.horizon_k == 0 {
            return bad("batch_size and horizon_k must be at least 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if self.feature_dim == 0 || self.encoder_hidden == 0 || self.field_hidden.iter().any(|&h| h == 0) {
            return bad("network widths must be positive");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Format {
            offset: json_offset(text, e.line(), e.column()),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Convert serde_json's 1-based line/column into a byte offset.
pub(crate) fn json_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    start + column.saturating_sub(1)
}
