//! Mass-spring ground truth: semi-implicit Euler with gravity, Coulomb ground
//! contact, kinematic grasps and box pushers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Vec3;

use super::scripts::GripperScript;

pub const DT_SIM: f64 = 1e-3;
pub const GRAVITY: f64 = -9.81;
/// Speed above which a simulation is declared unstable (m/s).
pub const BLOW_UP_SPEED: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    Rope,
    Cloth,
}

impl std::str::FromStr for SceneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rope" => Ok(SceneKind::Rope),
            "cloth" => Ok(SceneKind::Cloth),
            _ => Err(Error::Validation(format!("unknown scene kind '{s}' (expected rope or cloth)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spring {
    pub i: usize,
    pub j: usize,
    pub rest: f64,
    pub k: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleScene {
    pub kind: SceneKind,
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub springs: Vec<Spring>,
    /// Per-particle mass (kg).
    pub mass: f64,
    /// Spring damping along the spring axis (N s/m).
    pub damping: f64,
    pub gravity: Vec3,
    pub ground: Option<f64>,
    pub friction: f64,
    pub dt_sim: f64,
    /// Particles within this distance of a grasping gripper are pinned.
    pub pin_radius: f64,
    pub time: f64,
}

/// Rope fixture: 64 particles, 0.5 m long, stretch 500 N/m, bend 10 N/m.
pub const ROPE_PARTICLES: usize = 64;
pub const ROPE_LENGTH: f64 = 0.5;
/// Cloth fixture: 16 x 16 particles over 0.3 m.
pub const CLOTH_SIDE: usize = 16;
pub const CLOTH_SIZE: f64 = 0.3;

fn spring(positions: &[Vec3], i: usize, j: usize, k: f64) -> Spring {
    Spring { i, j, rest: (positions[i] - positions[j]).norm(), k }
}

impl OracleScene {
    fn with_topology(kind: SceneKind, positions: Vec<Vec3>, springs: Vec<Spring>) -> Self {
        let n = positions.len();
        OracleScene {
            kind,
            positions,
            velocities: vec![Vec3::zeros(); n],
            springs,
            mass: 0.002,
            damping: 0.05,
            gravity: Vec3::new(0.0, 0.0, GRAVITY),
            ground: Some(0.0),
            friction: 0.5,
            dt_sim: DT_SIM,
            pin_radius: 0.1,
            time: 0.0,
        }
    }

    /// A rope lying on the ground along x, centered at the origin. `bend`
    /// adds a transverse sine of that amplitude (m).
    pub fn rope(bend: f64) -> Self {
        let n = ROPE_PARTICLES;
        let positions: Vec<Vec3> = (0..n)
            .map(|i| {
                let u = i as f64 / (n - 1) as f64;
                Vec3::new(ROPE_LENGTH * (u - 0.5), bend * (std::f64::consts::PI * u).sin(), 0.0)
            })
            .collect();
        let mut springs = Vec::new();
        for i in 0..n - 1 {
            springs.push(spring(&positions, i, i + 1, 500.0));
        }
        for i in 0..n - 2 {
            springs.push(spring(&positions, i, i + 2, 10.0));
        }
        Self::with_topology(SceneKind::Rope, positions, springs)
    }

    /// A flat cloth on the ground, centered at the origin.
    pub fn cloth() -> Self {
        let m = CLOTH_SIDE;
        let h = CLOTH_SIZE / (m - 1) as f64;
        let id = |i: usize, j: usize| i * m + j;
        let positions: Vec<Vec3> = (0..m * m)
            .map(|k| Vec3::new((k / m) as f64 * h - 0.5 * CLOTH_SIZE, (k % m) as f64 * h - 0.5 * CLOTH_SIZE, 0.0))
            .collect();
        let mut springs = Vec::new();
        for i in 0..m {
            for j in 0..m {
                if i + 1 < m {
                    springs.push(spring(&positions, id(i, j), id(i + 1, j), 400.0));
                }
                if j + 1 < m {
                    springs.push(spring(&positions, id(i, j), id(i, j + 1), 400.0));
                }
                if i + 1 < m && j + 1 < m {
                    springs.push(spring(&positions, id(i, j), id(i + 1, j + 1), 200.0));
                    springs.push(spring(&positions, id(i + 1, j), id(i, j + 1), 200.0));
                }
                if i + 2 < m {
                    springs.push(spring(&positions, id(i, j), id(i + 2, j), 20.0));
                }
                if j + 2 < m {
                    springs.push(spring(&positions, id(i, j), id(i, j + 2), 20.0));
                }
            }
        }
        Self::with_topology(SceneKind::Cloth, positions, springs)
    }

    pub fn new(kind: SceneKind) -> Self {
        match kind {
            SceneKind::Rope => Self::rope(0.0),
            SceneKind::Cloth => Self::cloth(),
        }
    }

    pub fn n(&self) -> usize {
        self.positions.len()
    }

    /// Largest explicit-integration stiffness ratio `k dt^2 / m`.
    pub fn stiffness_ratio(&self) -> f64 {
        let k = self.springs.iter().map(|s| s.k).fold(0.0, f64::max);
        k * self.dt_sim * self.dt_sim / self.mass
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0) || !(self.dt_sim > 0.0) || self.damping < 0.0 || self.friction < 0.0 {
            return Err(Error::Parameter("mass and dt_sim must be positive; damping and friction non-negative".into()));
        }
        // the shipped rope sits exactly on the bound, which is stable for
        // semi-implicit Euler (the limit for a chain is 1.0)
        if self.stiffness_ratio() > 0.25 + 1e-12 {
            return Err(Error::Parameter(format!(
                "unstable parameters: k dt^2 / m = {:.3} exceeds 0.25",
                self.stiffness_ratio()
            )));
        }
        if self.velocities.len() != self.n() || self.springs.iter().any(|s| s.i >= self.n() || s.j >= self.n()) {
            return Err(Error::Contract("scene arrays are inconsistent".into()));
        }
        if !self.is_connected() {
            return Err(Error::Parameter("spring graph is not connected".into()));
        }
        Ok(())
    }

    fn is_connected(&self) -> bool {
        let n = self.n();
        if n == 0 {
            return true;
        }
        let mut adj = vec![Vec::new(); n];
        for s in &self.springs {
            adj[s.i].push(s.j);
            adj[s.j].push(s.i);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn momentum(&self) -> Vec3 {
        self.velocities.iter().sum::<Vec3>() * self.mass
    }

    fn forces(&self) -> Vec<Vec3> {
        let mut f = vec![self.gravity * self.mass; self.n()];
        for s in &self.springs {
            let d = self.positions[s.j] - self.positions[s.i];
            let len = d.norm();
            if len < 1e-12 {
                continue;
            }
            let dir = d / len;
            let rel = (self.velocities[s.j] - self.velocities[s.i]).dot(&dir);
            let fs = dir * (s.k * (len - s.rest) + self.damping * rel);
            f[s.i] += fs;
            f[s.j] -= fs;
        }
        f
    }

    /// One internal step of length `dt_sim`. `pins` lists
    /// `(particle, position, velocity)` overrides applied after integration.
    pub fn step_with(&mut self, pins: &[(usize, Vec3, Vec3)], pushers: &[PusherBox]) -> Result<()> {
        let dt = self.dt_sim;
        let f = self.forces();
        for ((x, v), f) in self.positions.iter_mut().zip(self.velocities.iter_mut()).zip(&f) {
            *v += f * (dt / self.mass);
            *x += *v * dt;
        }
        if let Some(g) = self.ground {
            for (x, v) in self.positions.iter_mut().zip(self.velocities.iter_mut()) {
                if x.z < g {
                    x.z = g;
                    if v.z < 0.0 {
                        let vn = -v.z;
                        v.z = 0.0;
                        let vt = (v.x * v.x + v.y * v.y).sqrt();
                        let scale = if vt > 0.0 { (1.0 - self.friction * vn / vt).max(0.0) } else { 0.0 };
                        v.x *= scale;
                        v.y *= scale;
                    }
                }
            }
        }
        for p in pushers {
            for (x, v) in self.positions.iter_mut().zip(self.velocities.iter_mut()) {
                p.resolve(x, v);
            }
        }
        for &(i, x, v) in pins {
            self.positions[i] = x;
            self.velocities[i] = v;
        }
        self.time += dt;
        let speed = self.velocities.iter().map(|v| v.norm()).fold(0.0, |a: f64, b| if b.is_nan() { b } else { a.max(b) });
        if !(speed <= BLOW_UP_SPEED) {
            return Err(Error::BlowUp { time: self.time, speed });
        }
        Ok(())
    }

    pub fn step(&mut self) -> Result<()> {
        self.step_with(&[], &[])
    }

    /// Advance by `duration` following `script` from the current time.
    pub fn run(&mut self, script: &GripperScript, grasp: &Grasp, duration: f64) -> Result<()> {
        let steps = (duration / self.dt_sim).round() as usize;
        for _ in 0..steps {
            let t = self.time + self.dt_sim;
            let pins = grasp.pins(script, t);
            let pushers = script.pushers(t);
            self.step_with(&pins, &pushers)?;
        }
        Ok(())
    }
}

/// Axis-aligned kinematic box that particles cannot enter from the side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PusherBox {
    pub lo: Vec3,
    pub hi: Vec3,
    pub velocity: Vec3,
}

impl PusherBox {
    fn resolve(&self, x: &mut Vec3, v: &mut Vec3) {
        if (0..3).any(|a| x[a] <= self.lo[a] || x[a] >= self.hi[a]) {
            return;
        }
        // exit sideways through the nearest vertical face; fingers reach
        // below the ground plane, so never push down or up
        let mut best = (f64::INFINITY, 0, 0.0);
        for a in 0..2 {
            for (face, sign) in [(self.lo[a], -1.0), (self.hi[a], 1.0)] {
                let d = (x[a] - face).abs();
                if d < best.0 {
                    best = (d, a, sign);
                }
            }
        }
        let (_, a, sign) = best;
        x[a] = if sign > 0.0 { self.hi[a] } else { self.lo[a] };
        if (v[a] - self.velocity[a]) * sign < 0.0 {
            v[a] = self.velocity[a];
        }
    }
}

/// Particles held by each grasping arm, with offsets from the gripper.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Grasp {
    pub held: Vec<(usize, usize, Vec3)>,
}

impl Grasp {
    /// Pin every particle within `scene.pin_radius` of a grasping arm at `t`.
    pub fn capture(scene: &OracleScene, script: &GripperScript, t: f64) -> Self {
        let mut held = Vec::new();
        for (a, arm) in script.arms.iter().enumerate() {
            if !arm.grasps() {
                continue;
            }
            let c = arm.position(t);
            for (i, x) in scene.positions.iter().enumerate() {
                if (x - c).norm() <= scene.pin_radius {
                    held.push((i, a, x - c));
                }
            }
        }
        Grasp { held }
    }

    pub fn pins(&self, script: &GripperScript, t: f64) -> Vec<(usize, Vec3, Vec3)> {
        self.held
            .iter()
            .map(|&(i, a, off)| {
                let arm = &script.arms[a];
                (i, arm.position(t) + off, arm.velocity(t))
            })
            .collect()
    }
}
