//! MPPI over end-effector trajectories with a Chamfer cost, and a
//! closed-loop MPC driver that executes plans on the mass-spring oracle.

use nalgebra::{Isometry3, Rotation3, Translation3, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicsModel, RolloutModel};
use crate::error::{Error, Result};
use crate::metrics::chamfer;
use crate::par::Exec;
use crate::synth::oracle::OracleScene;
use crate::synth::{voxel_downsample, ArmScript, Grasp, GripperScript};
use crate::train::scale_action;
use crate::types::{Action, ActionType, ArmCommand, ParticleState, Vec3};

/// Added to the cost when the grippers end up farther apart than allowed.
pub const GRIPPER_PENALTY: f64 = 1e3;
pub const DEFAULT_GRIPPER_LIMIT: f64 = 0.6;

/// One row per planned step: for each arm its position and, when rotations
/// are planned, an axis-angle offset from the starting orientation.
pub type PlanTrajectory = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct PlanArm {
    pub action_type: ActionType,
    pub gripper_open: f64,
    pub start: Isometry3<f64>,
}

impl PlanArm {
    pub fn grasp_at(position: Vec3) -> Self {
        PlanArm {
            action_type: ActionType::Grasped,
            gripper_open: 0.0,
            start: Isometry3::from_parts(Translation3::from(position), UnitQuaternion::identity()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanProblem {
    pub state: ParticleState,
    pub target: Vec<Vec3>,
    pub arms: Vec<PlanArm>,
    pub rotations: bool,
    pub horizon: usize,
    pub dt: f64,
    /// Maximum gripper separation; only checked with two arms.
    pub gripper_limit: Option<f64>,
}

impl PlanProblem {
    pub fn dof_per_arm(&self) -> usize {
        if self.rotations {
            6
        } else {
            3
        }
    }

    pub fn dof(&self) -> usize {
        self.arms.len() * self.dof_per_arm()
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Parameter("planning horizon must be at least 1".into()));
        }
        if self.arms.is_empty() || self.arms.len() > 2 {
            return Err(Error::Parameter(format!("planning supports one or two arms, got {}", self.arms.len())));
        }
        if let Some(l) = self.gripper_limit {
            if !(l > 0.0) {
                return Err(Error::Parameter(format!("gripper distance limit {l} must be positive")));
            }
        }
        if self.target.is_empty() {
            return Err(Error::Parameter("target cloud is empty".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Parameter(format!("dt {} must be positive", self.dt)));
        }
        self.state.validate()
    }

    /// Every arm holding still at its start pose.
    pub fn hold(&self) -> PlanTrajectory {
        let row: Vec<f64> = self
            .arms
            .iter()
            .flat_map(|a| {
                let p = a.start.translation.vector;
                let mut v = vec![p.x, p.y, p.z];
                if self.rotations {
                    v.extend([0.0; 3]);
                }
                v
            })
            .collect();
        vec![row; self.horizon]
    }

    fn arm_pose(&self, row: &[f64], a: usize) -> (Vec3, Rotation3<f64>) {
        let d = self.dof_per_arm();
        let r = &row[a * d..(a + 1) * d];
        let start = self.arms[a].start.rotation.to_rotation_matrix();
        let rot = if self.rotations { Rotation3::new(Vec3::new(r[3], r[4], r[5])) * start } else { start };
        (Vec3::new(r[0], r[1], r[2]), rot)
    }

    fn start_row(&self) -> Vec<f64> {
        self.hold().swap_remove(0)
    }

    /// Commands that move each arm from one planned pose to the next.
    pub fn to_actions(&self, traj: &PlanTrajectory) -> Vec<Action> {
        let start = self.start_row();
        (0..traj.len())
            .map(|t| {
                let prev = if t == 0 { &start } else { &traj[t - 1] };
                let arms = (0..self.arms.len())
                    .map(|a| {
                        let (x0, r0) = self.arm_pose(prev, a);
                        let (x1, r1) = self.arm_pose(&traj[t], a);
                        ArmCommand {
                            action_type: self.arms[a].action_type,
                            pose: Isometry3::from_parts(Translation3::from(x0), UnitQuaternion::from_rotation_matrix(&r0)),
                            angular: (r1 * r0.inverse()).scaled_axis() / self.dt,
                            linear: (x1 - x0) / self.dt,
                            gripper_open: self.arms[a].gripper_open,
                        }
                    })
                    .collect();
                Action { arms }
            })
            .collect()
    }

    fn exceeds_limit(&self, traj: &PlanTrajectory) -> bool {
        match self.gripper_limit {
            Some(l) if self.arms.len() == 2 => traj.iter().any(|row| (self.arm_pose(row, 0).0 - self.arm_pose(row, 1).0).norm() > l),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MppiConfig {
    pub samples: usize,
    /// Standard deviation of translation deltas (m).
    pub sigma_translation: f64,
    /// Standard deviation of rotation deltas (rad).
    pub sigma_rotation: f64,
    /// Temperature (m).
    pub beta: f64,
    pub iterations: usize,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for MppiConfig {
    fn default() -> Self {
        MppiConfig { samples: 64, sigma_translation: 0.02, sigma_rotation: 0.05, beta: 0.05, iterations: 10, seed: 0, exec: Exec::Parallel }
    }
}

impl MppiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::Parameter("MPPI needs at least 2 samples".into()));
        }
        if !(self.sigma_translation >= 0.0 && self.sigma_rotation >= 0.0) {
            return Err(Error::Parameter("MPPI standard deviations must be non-negative".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Parameter(format!("MPPI temperature {} must be positive", self.beta)));
        }
        Ok(())
    }

    fn sigma(&self, problem: &PlanProblem) -> Vec<f64> {
        let mut arm = vec![self.sigma_translation; 3];
        if problem.rotations {
            arm.extend([self.sigma_rotation; 3]);
        }
        arm.iter().copied().cycle().take(problem.dof()).collect()
    }
}

/// Per sample, one Gaussian delta per degree of freedom added to the
/// nominal with a linear ramp: step `t` (1-based) gets `t * delta`.
pub fn sample_action_trajectories<R: Rng>(nominal: &PlanTrajectory, sigma: &[f64], samples: usize, rng: &mut R) -> Vec<PlanTrajectory> {
    (0..samples)
        .map(|_| {
            let delta: Vec<f64> = sigma.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect();
            nominal
                .iter()
                .enumerate()
                .map(|(t, row)| row.iter().zip(&delta).map(|(x, d)| x + (t + 1) as f64 * d).collect())
                .collect()
        })
        .collect()
}

/// Sum of per-step Chamfer distances to the target plus the gripper
/// penalty. Failed or non-finite rollouts cost infinity.
pub fn trajectory_cost<M: RolloutModel + ?Sized>(model: &M, problem: &PlanProblem, traj: &PlanTrajectory) -> f64 {
    let actions = problem.to_actions(traj);
    let preds = match model.predict(&problem.state, &actions) {
        Ok(p) => p,
        Err(_) => return f64::INFINITY,
    };
    let mut j = 0.0;
    for x in &preds {
        if x.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return f64::INFINITY;
        }
        match chamfer(x, &problem.target) {
            Ok(c) => j += c,
            Err(_) => return f64::INFINITY,
        }
    }
    if problem.exceeds_limit(traj) {
        j += GRIPPER_PENALTY;
    }
    j
}

/// Softmin weights `exp(-(J - J_min) / beta)`, normalized; infinite costs
/// get zero weight. `None` when every cost is infinite.
pub fn mppi_weights(costs: &[f64], beta: f64) -> Option<Vec<f64>> {
    let jmin = costs.iter().copied().filter(|c| c.is_finite()).fold(f64::INFINITY, f64::min);
    if !jmin.is_finite() {
        return None;
    }
    let raw: Vec<f64> = costs.iter().map(|&c| if c.is_finite() { (-(c - jmin) / beta).exp() } else { 0.0 }).collect();
    let total: f64 = raw.iter().sum();
    Some(raw.into_iter().map(|w| w / total).collect())
}

fn weighted_mean(trajs: &[PlanTrajectory], weights: &[f64]) -> PlanTrajectory {
    let mut out: PlanTrajectory = trajs[0].iter().map(|r| vec![0.0; r.len()]).collect();
    for (traj, &w) in trajs.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for (o, r) in out.iter_mut().zip(traj) {
            for (a, b) in o.iter_mut().zip(r) {
                *a += w * b;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MppiResult {
    pub plan: PlanTrajectory,
    /// Nominal cost after each iteration.
    pub cost_trace: Vec<f64>,
}

/// Iteratively resample around the nominal and replace it with the
/// cost-weighted average of the samples.
pub fn mppi_plan<M: RolloutModel + ?Sized>(model: &M, problem: &PlanProblem, config: &MppiConfig, initial: Option<PlanTrajectory>) -> Result<MppiResult> {
    problem.validate()?;
    config.validate()?;
    let mut nominal = initial.unwrap_or_else(|| problem.hold());
    if nominal.len() != problem.horizon || nominal.iter().any(|r| r.len() != problem.dof()) {
        return Err(Error::Contract(format!("nominal plan must be {}x{}", problem.horizon, problem.dof())));
    }
    let sigma = config.sigma(problem);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut cost_trace = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let samples = sample_action_trajectories(&nominal, &sigma, config.samples, &mut rng);
        let costs = config.exec.map(&samples, |s| trajectory_cost(model, problem, s));
        let w = mppi_weights(&costs, config.beta).ok_or_else(|| Error::Planning("every sampled trajectory has infinite cost".into()))?;
        nominal = weighted_mean(&samples, &w);
        cost_trace.push(trajectory_cost(model, problem, &nominal));
    }
    Ok(MppiResult { plan: nominal, cost_trace })
}

/// Toy dynamics: every particle moves with the first arm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreeParticleModel {
    pub dt: f64,
}

impl RolloutModel for FreeParticleModel {
    fn history(&self) -> usize {
        0
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn predict(&self, state: &ParticleState, actions: &[Action]) -> Result<Vec<Vec<Vec3>>> {
        let mut x = state.positions.clone();
        let mut out = Vec::with_capacity(actions.len());
        for a in actions {
            let v = a.arms.first().map_or(Vec3::zeros(), |arm| arm.linear);
            x.iter_mut().for_each(|p| *p += v * self.dt);
            out.push(x.clone());
        }
        Ok(out)
    }
}

/// A trained model used in world units: inputs are multiplied by the
/// training scale and predictions divided by it.
#[derive(Debug, Clone)]
pub struct WorldModel<'a> {
    pub model: &'a DynamicsModel,
}

impl RolloutModel for WorldModel<'_> {
    fn history(&self) -> usize {
        self.model.config.history_h
    }

    fn dt(&self) -> f64 {
        self.model.config.dt
    }

    fn predict(&self, state: &ParticleState, actions: &[Action]) -> Result<Vec<Vec<Vec3>>> {
        let s = self.model.config.scale_s;
        if s == 1.0 {
            return self.model.predict(state, actions);
        }
        let scaled = ParticleState {
            positions: state.positions.iter().map(|p| p * s).collect(),
            velocity_history: state.velocity_history.iter().map(|f| f.iter().map(|v| v * s).collect()).collect(),
            time: state.time,
        };
        let acts: Vec<Action> = actions.iter().map(|a| scale_action(a, s)).collect();
        Ok(self.model.predict(&scaled, &acts)?.into_iter().map(|f| f.into_iter().map(|p| p / s).collect()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Lift,
    Straighten,
    Relocate,
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lift" => Ok(Task::Lift),
            "straighten" => Ok(Task::Straighten),
            "relocate" => Ok(Task::Relocate),
            _ => Err(Error::Validation(format!("unknown task '{s}' (expected lift, straighten or relocate)"))),
        }
    }
}

/// A rope scene, the grasped particle and a reference gripper path whose
/// outcome on the oracle defines the target shape.
#[derive(Debug, Clone)]
pub struct TaskSetup {
    pub scene: OracleScene,
    pub grasp_particle: usize,
    pub reference: Vec<Vec3>,
}

pub const REFERENCE_STEPS: usize = 8;

pub fn task_setup(task: Task, seed: u64) -> TaskSetup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bend = match task {
        Task::Straighten => rng.random_range(0.06..0.1),
        _ => rng.random_range(0.0..0.04),
    };
    let scene = OracleScene::rope(bend);
    let n = scene.n();
    let end = if rng.random_bool(0.5) { 0 } else { n - 1 };
    let (grasp_particle, goal) = match task {
        Task::Lift => (end, Vec3::new(0.0, rng.random_range(-0.03..0.03), rng.random_range(0.1..0.14))),
        Task::Straighten => {
            let p = scene.positions[end];
            let along = Vec3::new(p.x.signum(), 0.0, 0.0);
            (end, along * rng.random_range(0.06..0.09) + Vec3::new(0.0, -0.5 * bend, 0.02))
        }
        Task::Relocate => (n / 2, Vec3::new(rng.random_range(-0.04..0.04), rng.random_range(0.1..0.14) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }, 0.03)),
    };
    let start = scene.positions[grasp_particle];
    let reference = (1..=REFERENCE_STEPS).map(|k| start + goal * (k as f64 / REFERENCE_STEPS as f64)).collect();
    TaskSetup { scene, grasp_particle, reference }
}

/// The oracle with one grasping arm that can be moved step by step.
#[derive(Debug, Clone)]
pub struct GraspEnv {
    pub scene: OracleScene,
    pub grasp: Grasp,
    pub eef: Vec3,
}

impl GraspEnv {
    pub fn new(mut scene: OracleScene, eef: Vec3) -> Self {
        scene.time = 0.0;
        let grasp = Grasp::capture(&scene, &Self::script(eef, eef, 1.0), 0.0);
        GraspEnv { scene, grasp, eef }
    }

    fn script(from: Vec3, to: Vec3, dt: f64) -> GripperScript {
        GripperScript { arms: vec![ArmScript { action_type: ActionType::Grasped, waypoints: vec![from, to], duration: dt, open: 0.0 }] }
    }

    /// Move the gripper to `to` over `dt`.
    pub fn execute(&mut self, to: Vec3, dt: f64) -> Result<()> {
        let t0 = self.scene.time;
        self.scene.time = 0.0;
        let script = Self::script(self.eef, to, dt);
        self.scene.run(&script, &self.grasp, dt)?;
        self.scene.time = t0 + dt;
        self.eef = to;
        Ok(())
    }
}

/// Oracle outcome of the task's reference path.
pub fn task_target(setup: &TaskSetup, dt: f64) -> Result<Vec<Vec3>> {
    let mut env = GraspEnv::new(setup.scene.clone(), setup.scene.positions[setup.grasp_particle]);
    for &p in &setup.reference {
        env.execute(p, dt)?;
    }
    // let the rope settle with the gripper still
    for _ in 0..3 {
        env.execute(env.eef, dt)?;
    }
    Ok(env.scene.positions)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcOptions {
    pub steps: usize,
    pub horizon: usize,
    pub mppi: MppiConfig,
    /// Voxel size of the particles handed to the model.
    pub voxel: f64,
}

impl Default for MpcOptions {
    fn default() -> Self {
        MpcOptions { steps: 15, horizon: 5, mppi: MppiConfig::default(), voxel: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub task: Task,
    pub seed: u64,
    /// Executed gripper position per step.
    pub actions: Vec<[f64; 3]>,
    /// Final nominal cost of each replanning round.
    pub cost_trace: Vec<f64>,
    /// Chamfer distance to the target before the first step and after each.
    pub error_curve: Vec<f64>,
}

impl PlanReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan report serializes")
    }

    pub fn error_csv(&self) -> String {
        let mut s = String::from("step,chamfer\n");
        for (i, e) in self.error_curve.iter().enumerate() {
            s.push_str(&format!("{i},{e}\n"));
        }
        s
    }
}

fn group_centroids(points: &[Vec3], members: &[Vec<usize>]) -> Vec<Vec3> {
    members.iter().map(|m| m.iter().map(|&i| points[i]).sum::<Vec3>() / m.len() as f64).collect()
}

/// Plan, execute the first step on the oracle, observe, replan.
pub fn mpc_loop<M: RolloutModel + ?Sized>(model: &M, env: &mut GraspEnv, target: &[Vec3], opts: &MpcOptions) -> Result<(Vec<Vec3>, Vec<f64>, Vec<f64>)> {
    let dt = model.dt();
    let h = model.history();
    let (_, members) = voxel_downsample(&env.scene.positions, opts.voxel);
    let target_obs = group_centroids(target, &members);
    let mut observed = vec![group_centroids(&env.scene.positions, &members)];
    let mut executed = Vec::with_capacity(opts.steps);
    let mut costs = Vec::with_capacity(opts.steps);
    let mut errors = vec![chamfer(&env.scene.positions, target)?];
    let mut nominal: Option<PlanTrajectory> = None;
    for step in 0..opts.steps {
        let cur = observed.last().expect("observed").clone();
        let n = cur.len();
        let velocity_history = (0..=h)
            .map(|j| {
                let back = h - j;
                let len = observed.len();
                if len >= back + 2 {
                    observed[len - 1 - back].iter().zip(&observed[len - 2 - back]).map(|(a, b)| (a - b) / dt).collect()
                } else {
                    vec![Vec3::zeros(); n]
                }
            })
            .collect();
        let problem = PlanProblem {
            state: ParticleState { positions: cur, velocity_history, time: step as f64 * dt },
            target: target_obs.clone(),
            arms: vec![PlanArm::grasp_at(env.eef)],
            rotations: false,
            horizon: opts.horizon,
            dt,
            gripper_limit: None,
        };
        let cfg = MppiConfig { seed: opts.mppi.seed.wrapping_add(step as u64 * 0x9e37_79b9), ..opts.mppi };
        let result = mppi_plan(model, &problem, &cfg, nominal.take())?;
        let first = &result.plan[0];
        let next = Vec3::new(first[0], first[1], first[2]);
        env.execute(next, dt)?;
        executed.push(next);
        costs.push(result.cost_trace.last().copied().unwrap_or(f64::NAN));
        observed.push(group_centroids(&env.scene.positions, &members));
        errors.push(chamfer(&env.scene.positions, target)?);
        let mut shifted = result.plan[1..].to_vec();
        shifted.push(result.plan.last().expect("non-empty plan").clone());
        nominal = Some(shifted);
    }
    Ok((executed, costs, errors))
}

/// Set up `task`, derive its target on the oracle and run MPC.
pub fn run_task<M: RolloutModel + ?Sized>(model: &M, task: Task, seed: u64, opts: &MpcOptions) -> Result<PlanReport> {
    let setup = task_setup(task, seed);
    let dt = model.dt();
    let target = task_target(&setup, dt)?;
    let mut env = GraspEnv::new(setup.scene.clone(), setup.scene.positions[setup.grasp_particle]);
    let opts = MpcOptions { mppi: MppiConfig { seed: opts.mppi.seed ^ seed, ..opts.mppi }, ..opts.clone() };
    let (executed, cost_trace, error_curve) = mpc_loop(model, &mut env, &target, &opts)?;
    Ok(PlanReport { task, seed, actions: executed.iter().map(|p| [p.x, p.y, p.z]).collect(), cost_trace, error_curve })
}
