//! Scripted end-effector motion: Catmull-Rom splines through random waypoints.

use nalgebra::{Isometry3, Translation3, UnitQuaternion};
use rand::Rng;

use crate::dynamics::FINGER_BOX;
use crate::types::{Action, ActionType, ArmCommand, Vec3};

use super::oracle::{OracleScene, PusherBox, SceneKind};

#[derive(Debug, Clone, PartialEq)]
pub struct ArmScript {
    pub action_type: ActionType,
    /// Visited at uniform times over `[0, duration]`.
    pub waypoints: Vec<Vec3>,
    pub duration: f64,
    pub open: f64,
}

fn catmull_rom(p: [Vec3; 4], u: f64) -> (Vec3, Vec3) {
    let [p0, p1, p2, p3] = p;
    let u2 = u * u;
    let u3 = u2 * u;
    let pos = ((2.0 * p1) + (p2 - p0) * u + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u2 + (3.0 * p1 - p0 - 3.0 * p2 + p3) * u3) * 0.5;
    let vel = ((p2 - p0) + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * (2.0 * u) + (3.0 * p1 - p0 - 3.0 * p2 + p3) * (3.0 * u2)) * 0.5;
    (pos, vel)
}

impl ArmScript {
    pub fn hold(action_type: ActionType, at: Vec3) -> Self {
        ArmScript { action_type, waypoints: vec![at], duration: 1.0, open: 0.0 }
    }

    pub fn grasps(&self) -> bool {
        self.action_type == ActionType::Grasped
    }

    fn segment(&self, t: f64) -> Option<([Vec3; 4], f64, f64)> {
        let w = &self.waypoints;
        if w.len() < 2 || self.duration <= 0.0 {
            return None;
        }
        let segs = (w.len() - 1) as f64;
        let s = (t / self.duration).clamp(0.0, 1.0) * segs;
        let i = (s.floor() as usize).min(w.len() - 2);
        let get = |k: isize| w[k.clamp(0, w.len() as isize - 1) as usize];
        let i = i as isize;
        Some(([get(i - 1), get(i), get(i + 1), get(i + 2)], s - i as f64, segs / self.duration))
    }

    pub fn position(&self, t: f64) -> Vec3 {
        match self.segment(t) {
            Some((p, u, _)) => catmull_rom(p, u).0,
            None => self.waypoints[0],
        }
    }

    pub fn velocity(&self, t: f64) -> Vec3 {
        if t < 0.0 || t > self.duration {
            return Vec3::zeros();
        }
        match self.segment(t) {
            Some((p, u, rate)) => catmull_rom(p, u).1 * rate,
            None => Vec3::zeros(),
        }
    }

    /// Recorded command at `t`: pose at `t`, linear velocity as the forward
    /// difference over `[t, t + dt]`.
    pub fn command(&self, t: f64, dt: f64) -> ArmCommand {
        let x = self.position(t);
        ArmCommand {
            action_type: self.action_type,
            pose: Isometry3::from_parts(Translation3::from(x), UnitQuaternion::identity()),
            angular: Vec3::zeros(),
            linear: (self.position(t + dt) - x) / dt,
            gripper_open: self.open,
        }
    }

    /// Finger volume of a nonprehensile arm, matching the robot particles.
    pub fn pusher(&self, t: f64) -> Option<PusherBox> {
        if self.grasps() {
            return None;
        }
        let [w, th, len] = FINGER_BOX;
        let c = self.position(t);
        let half_y = 0.5 * self.open + th;
        Some(PusherBox {
            lo: c + Vec3::new(-0.5 * w, -half_y, -len),
            hi: c + Vec3::new(0.5 * w, half_y, 0.0),
            velocity: self.velocity(t),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GripperScript {
    pub arms: Vec<ArmScript>,
}

impl GripperScript {
    pub fn action(&self, t: f64, dt: f64) -> Action {
        Action { arms: self.arms.iter().map(|a| a.command(t, dt)).collect() }
    }

    pub fn pushers(&self, t: f64) -> Vec<PusherBox> {
        self.arms.iter().filter_map(|a| a.pusher(t)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interaction {
    Grasp,
    Push,
}

impl std::str::FromStr for Interaction {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s {
            "grasp" => Ok(Interaction::Grasp),
            "push" => Ok(Interaction::Push),
            _ => Err(crate::error::Error::Validation(format!("unknown interaction '{s}' (expected grasp or push)"))),
        }
    }
}

/// A random smooth interaction for `scene`: a grasp that lifts and drags a
/// random point, or a finger sweeping across the object.
pub fn random_script<R: Rng>(scene: &OracleScene, kind: Interaction, duration: f64, rng: &mut R) -> GripperScript {
    let n = scene.n();
    let arm = match kind {
        Interaction::Grasp => {
            let i = match scene.kind {
                SceneKind::Rope => [0, n - 1, rng.random_range(0..n)][rng.random_range(0..3)],
                SceneKind::Cloth => {
                    let m = (n as f64).sqrt() as usize;
                    [0, m - 1, n - m, n - 1][rng.random_range(0..4)]
                }
            };
            let start = scene.positions[i];
            let mut waypoints = vec![start];
            let mut p = start;
            for _ in 0..3 {
                p += Vec3::new(rng.random_range(-0.12..0.12), rng.random_range(-0.12..0.12), rng.random_range(0.0..0.1));
                p.z = p.z.clamp(0.02, 0.3);
                waypoints.push(p);
            }
            ArmScript { action_type: ActionType::Grasped, waypoints, duration, open: 0.0 }
        }
        Interaction::Push => {
            let i = rng.random_range(n / 4..3 * n / 4);
            let target = scene.positions[i];
            let tangent = scene.positions[(i + 1).min(n - 1)] - scene.positions[i.saturating_sub(1)];
            let mut normal = tangent.cross(&Vec3::z());
            normal.z = 0.0;
            let normal = if normal.norm() > 1e-9 { normal.normalize() } else { Vec3::y() };
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let reach = rng.random_range(0.1..0.2);
            let drift = rng.random_range(-0.05..0.05);
            // finger tips just below the ground plane so they sweep resting points
            let z = FINGER_BOX[2] - 0.005;
            let start = Vec3::new(target.x, target.y, z) - normal * (side * 0.05);
            let end = start + normal * (side * reach) + tangent.normalize() * drift;
            ArmScript { action_type: ActionType::Nonprehensile, waypoints: vec![start, 0.5 * (start + end), end], duration, open: 0.0 }
        }
    };
    GripperScript { arms: vec![arm] }
}
