//! One-step particle-grid dynamics and its rollout.
//!
//! Every stage is recorded on a [`Tape`], so the same code path serves
//! inference and training. Only the grid nodes inside the particles' B-spline
//! stencils are evaluated; the transfer never reads any other node.

use nalgebra::Matrix3;

use crate::encoder::{radius_groups, BoundModel, ModelParams};
use crate::error::{Error, Result};
use crate::grid::{active_nodes, Grid};
use crate::spatial::bounds;
use crate::tensor::{posenc_rows, Tape, Var};
use crate::types::{Action, ActionType, ArmCommand, Backbone, ParticleState, RunConfig, Vec3};

/// Points sampled per gripper.
pub const ROBOT_POINTS_PER_GRIPPER: usize = 32;
/// Finger box size in the gripper frame: x width, y thickness, z length (m).
pub const FINGER_BOX: [f64; 3] = [0.02, 0.01, 0.04];

#[derive(Debug, Clone)]
pub struct DynamicsModel {
    pub params: ModelParams,
    pub config: RunConfig,
    pub mode: Backbone,
}

/// Gripper surface points with their rigid velocities, world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotParticleSet {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
}

impl RobotParticleSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Encoder tag for robot rows.
    pub const TAG: f64 = 1.0;
}

/// Rigid-body velocity of a point attached to the arm.
pub fn rigid_velocity(arm: &ArmCommand, x: &Vec3) -> Vec3 {
    arm.angular.cross(&(x - arm.position())) + arm.linear
}

/// Finger surface points in the gripper frame: two boxes on either side of
/// the jaw opening, 16 points each (inner and outer face, 2 x 4 lattice).
pub fn finger_points(open: f64) -> Vec<Vec3> {
    let [w, t, len] = FINGER_BOX;
    let mut out = Vec::with_capacity(ROBOT_POINTS_PER_GRIPPER);
    for side in [-1.0, 1.0] {
        let inner = side * 0.5 * open;
        for face in [inner, inner + side * t] {
            for i in 0..2 {
                for k in 0..4 {
                    let x = (i as f64 - 0.5) * w;
                    let z = -len * k as f64 / 3.0;
                    out.push(Vec3::new(x, face, z));
                }
            }
        }
    }
    out
}

/// Robot particles for every nonprehensile arm of `action`.
pub fn augment_robot_particles(action: &Action) -> RobotParticleSet {
    let mut set = RobotParticleSet { positions: Vec::new(), velocities: Vec::new() };
    for arm in action.arms.iter().filter(|a| a.action_type == ActionType::Nonprehensile) {
        for local in finger_points(arm.gripper_open) {
            let x = arm.pose.transform_point(&local.into()).coords;
            set.velocities.push(rigid_velocity(arm, &x));
            set.positions.push(x);
        }
    }
    set
}

fn cross_matrix_t(w: &Vec3) -> Vec<f64> {
    // row-vector form: (w x r)^T = r^T [w]x^T
    let m = Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0).transpose();
    (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]).collect()
}

fn rows(points: &[Vec3]) -> Vec<f64> {
    points.iter().flat_map(|p| p.iter().copied()).collect()
}

fn to_points(v: &[f64]) -> Vec<Vec3> {
    v.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

impl DynamicsModel {
    pub fn new(params: ModelParams, config: RunConfig) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        if !params.matches(&config) {
            return Err(Error::Validation("model parameters do not match the configuration".into()));
        }
        Ok(DynamicsModel { params, mode: config.backbone, config })
    }

    pub fn init(config: RunConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed);
        Self::new(params, config)
    }

    pub fn grid(&self) -> Grid {
        Grid { l: self.config.grid_l, delta: self.config.grid_delta }
    }

    /// Object velocities for one step, recorded on `tape`. `positions` is
    /// n x 3 (world), `history` holds h+1 velocity frames, oldest first.
    pub fn velocity_on_tape(
        &self,
        tape: &mut Tape,
        model: &BoundModel,
        positions: Var,
        history: &[Var],
        action: &Action,
    ) -> Result<Var> {
        let cfg = &self.config;
        let grid = self.grid();
        let (n, _) = tape.shape(positions);
        if n == 0 {
            return Err(Error::Contract("empty particle state".into()));
        }
        if history.len() != cfg.history_h + 1 {
            return Err(Error::Validation(format!(
                "velocity history has {} frames, expected {}",
                history.len(),
                cfg.history_h + 1
            )));
        }
        let world = to_points(tape.value(positions));
        let (lo, hi) = bounds(&world);
        if (hi - lo).max() > grid.capacity() {
            return Err(Error::Capacity(format!(
                "object spans {:.3} m but the grid holds {:.3} m (l={}, delta={}); increase l or delta",
                (hi - lo).max(),
                grid.capacity(),
                grid.l,
                grid.delta
            )));
        }

        // translate so the bounding-box center sits at the grid center
        let center = tape.col_midrange(positions)?;
        let neg = tape.scale(center, -1.0);
        let gc = tape.constant(1, 3, grid.center().as_slice().to_vec())?;
        let offset = tape.add(neg, gc)?;
        let x = tape.add_row(positions, offset)?;
        let offset_value = Vec3::from_column_slice(tape.value(offset));

        // encoder input: object rows, then robot rows
        let zeros = tape.constant(n, 1, vec![0.0; n])?;
        let mut cols = vec![x];
        cols.extend_from_slice(history);
        cols.push(zeros);
        let mut input = tape.concat_cols(&cols)?;
        let mut points = to_points(tape.value(x));
        let robot = augment_robot_particles(action);
        if !robot.is_empty() {
            let m = robot.len();
            let rw = tape.constant(m, 3, rows(&robot.positions))?;
            let rx = tape.add_row(rw, offset)?;
            let rv = tape.constant(m, 3, rows(&robot.velocities))?;
            let tag = tape.constant(m, 1, vec![RobotParticleSet::TAG; m])?;
            let mut rcols = vec![rx];
            rcols.extend(std::iter::repeat_n(rv, cfg.history_h + 1));
            rcols.push(tag);
            let rinput = tape.concat_cols(&rcols)?;
            points.extend(to_points(tape.value(rx)));
            input = tape.concat_rows(&[input, rinput])?;
        }
        let latent = model.encode(tape, input)?;

        let ground = cfg.ground_height.map(|g| g + offset_value.z + grid.delta);
        let grasps: Vec<&ArmCommand> =
            action.arms.iter().filter(|a| a.action_type == ActionType::Grasped).collect();

        match self.mode {
            Backbone::Grid => {
                let object = to_points(tape.value(x));
                let act = active_nodes(&grid, &object)?;
                let nodes = act.positions(&grid);
                let groups = radius_groups(&points, &nodes, cfg.radius_r);
                let pooled = tape.segment_mean(latent, groups)?;
                let node_rows = rows(&nodes);
                let enc = posenc_rows(&node_rows, 3, cfg.posenc_freqs);
                let enc = tape.constant(nodes.len(), enc.len() / nodes.len(), enc)?;
                let mut v = model.field(tape, enc, pooled)?;
                let node_var = tape.constant(nodes.len(), 3, node_rows)?;
                v = self.edit(tape, v, node_var, &nodes, ground, &grasps, offset)?;
                tape.g2p(v, x, act.stencil)
            }
            Backbone::Particle => {
                let object = to_points(tape.value(x));
                let groups = radius_groups(&points, &object, cfg.radius_r);
                let pooled = tape.segment_mean(latent, groups)?;
                let enc = tape.posenc(x, cfg.posenc_freqs)?;
                let v = model.field(tape, enc, pooled)?;
                self.edit(tape, v, x, &object, ground, &grasps, offset)
            }
        }
    }

    /// Ground contact, then rigid grasp overwrite, at query locations `q`.
    #[allow(clippy::too_many_arguments)]
    fn edit(
        &self,
        tape: &mut Tape,
        mut v: Var,
        q: Var,
        q_points: &[Vec3],
        ground: Option<f64>,
        grasps: &[&ArmCommand],
        offset: Var,
    ) -> Result<Var> {
        let m = q_points.len();
        if let Some(band) = ground {
            let contact = q_points.iter().map(|p| p.z <= band).collect();
            v = tape.ground_edit(v, contact, self.config.friction_mu)?;
        }
        let offset_value = Vec3::from_column_slice(tape.value(offset));
        for arm in grasps {
            let center = arm.position() + offset_value;
            let mask: Vec<bool> =
                q_points.iter().map(|p| (p - center).norm() <= self.config.grasp_radius_a).collect();
            if !mask.iter().any(|&b| b) {
                continue;
            }
            let eef = tape.constant(1, 3, arm.position().as_slice().to_vec())?;
            let eef = tape.add(eef, offset)?;
            let eef = tape.gather_rows(eef, vec![0; m])?;
            let rel = tape.sub(q, eef)?;
            let wt = tape.constant(3, 3, cross_matrix_t(&arm.angular))?;
            let spin = tape.matmul(rel, wt)?;
            let lin = tape.constant(1, 3, arm.linear.as_slice().to_vec())?;
            let rigid = tape.add_row(spin, lin)?;
            v = tape.select_rows(mask, rigid, v)?;
        }
        Ok(v)
    }

    /// K chained steps on `tape`; returns predicted positions per step.
    pub fn rollout_on_tape(
        &self,
        tape: &mut Tape,
        model: &BoundModel,
        state: &ParticleState,
        actions: &[Action],
    ) -> Result<Vec<Var>> {
        state.validate()?;
        let n = state.n();
        let mut x = tape.constant(n, 3, rows(&state.positions))?;
        let mut history = state
            .velocity_history
            .iter()
            .map(|f| tape.constant(n, 3, rows(f)))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(actions.len());
        for (k, action) in actions.iter().enumerate() {
            let v = self.velocity_on_tape(tape, model, x, &history, action)?;
            if let Some(bad) = tape.value(v).iter().position(|a| !a.is_finite()) {
                return Err(Error::NonFinite { step: k, message: format!("velocity of particle {} is not finite", bad / 3) });
            }
            let dx = tape.scale(v, self.config.dt);
            x = tape.add(x, dx)?;
            history.remove(0);
            history.push(v);
            out.push(x);
        }
        Ok(out)
    }

    pub fn predict_velocity(&self, state: &ParticleState, action: &Action) -> Result<Vec<Vec3>> {
        state.validate()?;
        if state.history() != self.config.history_h {
            return Err(Error::Validation(format!(
                "state carries history {} but the model expects {}",
                state.history(),
                self.config.history_h
            )));
        }
        let mut tape = Tape::new();
        let model = self.params.bind(&mut tape);
        let n = state.n();
        let x = tape.constant(n, 3, rows(&state.positions))?;
        let history = state
            .velocity_history
            .iter()
            .map(|f| tape.constant(n, 3, rows(f)))
            .collect::<Result<Vec<_>>>()?;
        let v = self.velocity_on_tape(&mut tape, &model, x, &history, action)?;
        Ok(to_points(tape.value(v)))
    }

    pub fn step(&self, state: &ParticleState, action: &Action) -> Result<ParticleState> {
        let v = self.predict_velocity(state, action)?;
        Ok(advance(state, v, self.config.dt))
    }

    pub fn rollout(&self, state: &ParticleState, actions: &[Action]) -> Result<Vec<ParticleState>> {
        if actions.is_empty() {
            return Err(Error::Contract("rollout needs at least one action".into()));
        }
        let mut out: Vec<ParticleState> = Vec::with_capacity(actions.len());
        for (k, action) in actions.iter().enumerate() {
            let current = out.last().unwrap_or(state);
            let next = self.step(current, action)?;
            if next.positions.iter().any(|p| !p.iter().all(|x| x.is_finite())) {
                return Err(Error::NonFinite { step: k, message: "predicted positions are not finite".into() });
            }
            out.push(next);
        }
        Ok(out)
    }
}

/// Anything that can predict future particle positions from a state and a
/// sequence of actions. Implementations must be shareable across threads.
pub trait RolloutModel: Sync {
    /// Velocity frames of history expected in the state, minus one.
    fn history(&self) -> usize;
    fn dt(&self) -> f64;
    /// Positions after each action.
    fn predict(&self, state: &ParticleState, actions: &[Action]) -> Result<Vec<Vec<Vec3>>>;
}

impl RolloutModel for DynamicsModel {
    fn history(&self) -> usize {
        self.config.history_h
    }

    fn dt(&self) -> f64 {
        self.config.dt
    }

    fn predict(&self, state: &ParticleState, actions: &[Action]) -> Result<Vec<Vec<Vec3>>> {
        Ok(self.rollout(state, actions)?.into_iter().map(|s| s.positions).collect())
    }
}

/// Baseline that predicts no motion at all.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticModel {
    pub history: usize,
    pub dt: f64,
}

impl RolloutModel for StaticModel {
    fn history(&self) -> usize {
        self.history
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn predict(&self, state: &ParticleState, actions: &[Action]) -> Result<Vec<Vec<Vec3>>> {
        Ok(vec![state.positions.clone(); actions.len()])
    }
}

/// Forward Euler: move by `dt * v` and push `v` onto the history.
pub fn advance(state: &ParticleState, v: Vec<Vec3>, dt: f64) -> ParticleState {
    let positions = state.positions.iter().zip(&v).map(|(x, v)| x + v * dt).collect();
    let mut velocity_history = state.velocity_history[1..].to_vec();
    velocity_history.push(v);
    ParticleState { positions, velocity_history, time: state.time + dt }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Isometry3, Translation3, UnitQuaternion};

    fn small_cfg() -> RunConfig {
        RunConfig { feature_dim: 8, encoder_hidden: 8, field_hidden: vec![16], grid_l: 30, ..Default::default() }
    }

    fn state() -> ParticleState {
        let pos = vec![
            Vec3::new(0.10, 0.00, 0.05),
            Vec3::new(0.13, 0.02, 0.06),
            Vec3::new(0.16, -0.01, 0.04),
            Vec3::new(0.12, 0.03, 0.08),
        ];
        let hist = (0..3).map(|k| pos.iter().map(|p| Vec3::new(0.05 * p.y, 0.01 * k as f64, -0.1 * p.x)).collect()).collect();
        ParticleState::new(pos, hist, 0.0).unwrap()
    }

    fn push_arm(at: Vec3) -> Action {
        let mut arm = ArmCommand::grasp_at(at, Vec3::new(0.05, 0.0, 0.0));
        arm.action_type = ActionType::Nonprehensile;
        arm.gripper_open = 0.02;
        Action::single(arm)
    }

    #[test]
    fn zero_model_gives_zero_velocity() {
        let cfg = small_cfg();
        let model = DynamicsModel::new(ModelParams::zeros(&cfg), cfg).unwrap();
        let s = state();
        let v = model.predict_velocity(&s, &Action::single(ArmCommand::grasp_at(Vec3::new(1.0, 1.0, 1.0), Vec3::zeros()))).unwrap();
        assert_eq!(v.len(), 4);
        assert!(v.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn grasp_velocity_reaches_particle() {
        let cfg = small_cfg();
        let model = DynamicsModel::new(ModelParams::zeros(&cfg), cfg).unwrap();
        let p = Vec3::new(0.2, 0.1, 0.3);
        let s = ParticleState::at_rest(vec![p], 2, 0.0);
        let v = model.predict_velocity(&s, &Action::single(ArmCommand::grasp_at(p, Vec3::new(0.0, 0.0, 0.1)))).unwrap();
        assert!((v[0] - Vec3::new(0.0, 0.0, 0.1)).norm() < 1e-12);
    }

    #[test]
    fn robot_particle_velocities() {
        let mut arm = ArmCommand::grasp_at(Vec3::new(0.1, 0.2, 0.3), Vec3::zeros());
        arm.action_type = ActionType::Nonprehensile;
        let still = augment_robot_particles(&Action::single(arm.clone()));
        assert_eq!(still.len(), ROBOT_POINTS_PER_GRIPPER);
        assert!(still.velocities.iter().all(|v| v.norm() == 0.0));
        arm.linear = Vec3::new(0.1, 0.0, 0.0);
        assert!(augment_robot_particles(&Action::single(arm.clone())).velocities.iter().all(|v| *v == Vec3::new(0.1, 0.0, 0.0)));
        arm.linear = Vec3::zeros();
        arm.angular = Vec3::new(0.0, 0.0, 1.0);
        let v = rigid_velocity(&arm, &(arm.position() + Vec3::new(0.05, 0.0, 0.0)));
        assert!((v - Vec3::new(0.0, 0.05, 0.0)).norm() < 1e-15);
        arm.action_type = ActionType::Grasped;
        assert!(augment_robot_particles(&Action::single(arm)).is_empty());
    }

    #[test]
    fn rotated_gripper_points_follow_pose() {
        let rot = UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1);
        let mut arm = ArmCommand::grasp_at(Vec3::zeros(), Vec3::zeros());
        arm.pose = Isometry3::from_parts(Translation3::new(0.5, 0.1, 0.2), rot);
        arm.action_type = ActionType::Nonprehensile;
        let set = augment_robot_particles(&Action::single(arm));
        for (p, local) in set.positions.iter().zip(finger_points(0.0)) {
            assert!((p - (rot * local + Vec3::new(0.5, 0.1, 0.2))).norm() < 1e-12);
        }
    }

    #[test]
    fn euler_step_arithmetic() {
        let s = ParticleState::at_rest(vec![Vec3::new(0.1, 0.2, 0.3), Vec3::zeros()], 2, 1.0);
        let one = advance(&s, vec![Vec3::new(1.0, 0.0, 0.0); 2], 0.1);
        assert!((one.positions[0] - Vec3::new(0.2, 0.2, 0.3)).norm() < 1e-15);
        assert_eq!(one.velocity_history[2][1], Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(one.velocity_history[0], s.velocity_history[1]);
        assert!((one.time - 1.1).abs() < 1e-15);
        let two = advance(&one, vec![Vec3::new(1.0, 0.0, 0.0); 2], 0.1);
        assert!((two.positions[1].x - 0.2).abs() < 1e-15);
        let still = advance(&s, vec![Vec3::zeros(); 2], 0.1);
        assert_eq!(still.positions, s.positions);
    }

    #[test]
    fn both_modes_run_and_preserve_count() {
        for mode in [Backbone::Grid, Backbone::Particle] {
            let cfg = RunConfig { backbone: mode, ..small_cfg() };
            let model = DynamicsModel::init(cfg, 3).unwrap();
            let s = state();
            let out = model.rollout(&s, &vec![push_arm(Vec3::new(0.05, 0.0, 0.05)); 3]).unwrap();
            assert_eq!(out.len(), 3);
            assert!(out.iter().all(|o| o.n() == 4));
            let again = model.rollout(&s, &vec![push_arm(Vec3::new(0.05, 0.0, 0.05)); 3]).unwrap();
            assert_eq!(out, again);
        }
    }

    #[test]
    fn history_length_mismatch_is_rejected() {
        let cfg = small_cfg();
        let model = DynamicsModel::init(cfg, 0).unwrap();
        let s = ParticleState::at_rest(vec![Vec3::new(0.1, 0.1, 0.1)], 1, 0.0);
        assert!(matches!(model.predict_velocity(&s, &push_arm(Vec3::zeros())), Err(Error::Validation(_))));
    }

    #[test]
    fn oversized_object_is_capacity_error() {
        let cfg = small_cfg();
        let model = DynamicsModel::init(cfg, 0).unwrap();
        let s = ParticleState::at_rest(vec![Vec3::zeros(), Vec3::new(2.0, 0.0, 0.0)], 2, 0.0);
        assert!(matches!(model.predict_velocity(&s, &push_arm(Vec3::zeros())), Err(Error::Capacity(_))));
    }
}
