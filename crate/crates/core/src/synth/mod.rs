//! Synthetic interaction data: a mass-spring oracle driven by scripted
//! grippers, depth-camera visibility and persistent track extraction.

pub mod camera;
pub mod oracle;
pub mod scripts;
pub mod tracks;

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{Frame, Trajectory};
use crate::error::{Error, Result};
use crate::types::Vec3;

pub use camera::{default_rig, load_cameras, mask_partial_view, CameraSpec};
pub use oracle::{Grasp, OracleScene, SceneKind};
pub use scripts::{random_script, ArmScript, GripperScript, Interaction};
pub use tracks::{extract_tracks, persistent_trajectory, voxel_downsample, Observation};

/// Number of frames, including t = 0, for `duration` sampled every `dt`.
pub fn frame_count(duration: f64, dt: f64) -> Result<usize> {
    let steps = duration / dt;
    if !(dt > 0.0) || !(duration >= 0.0) || (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
        return Err(Error::Parameter(format!("duration {duration} is not a multiple of dt {dt}")));
    }
    Ok(steps.round() as usize + 1)
}

/// Run the oracle under `script`, recording the full particle set every `dt`.
/// Arm commands carry the forward-difference velocity over the next interval.
pub fn gen_trajectory(scene: &OracleScene, script: &GripperScript, duration: f64, dt: f64) -> Result<Trajectory> {
    scene.validate()?;
    let frames = frame_count(duration, dt)?;
    if scene.dt_sim > dt / 10.0 + 1e-15 {
        return Err(Error::Parameter(format!("dt_sim {} must be at most dt/10", scene.dt_sim)));
    }
    let mut sim = scene.clone();
    sim.time = 0.0;
    let grasp = Grasp::capture(&sim, script, 0.0);
    for (i, x, v) in grasp.pins(script, 0.0) {
        sim.positions[i] = x;
        sim.velocities[i] = v;
    }
    let mut out = Vec::with_capacity(frames);
    for f in 0..frames {
        let t = f as f64 * dt;
        out.push(Frame { time: t, points: sim.positions.clone(), velocities: None, action: script.action(t, dt) });
        if f + 1 < frames {
            sim.run(script, &grasp, dt)?;
            sim.time = (f + 1) as f64 * dt;
        }
    }
    Ok(Trajectory { dt, frames: out })
}

/// Replace every frame by what `cameras` see, adding per-point velocities
/// (forward differences, backward on the last frame) and optional Gaussian
/// jitter of standard deviation `depth_noise` along the viewing ray.
pub fn observe<R: Rng>(traj: &Trajectory, cameras: &[CameraSpec], depth_noise: f64, rng: &mut R) -> Result<Trajectory> {
    if cameras.is_empty() {
        return Err(Error::Validation("at least one camera is required".into()));
    }
    let noise = Normal::new(0.0, depth_noise.max(0.0)).map_err(|e| Error::Parameter(e.to_string()))?;
    let last = traj.frames.len() - 1;
    let mut frames = Vec::with_capacity(traj.frames.len());
    for (f, frame) in traj.frames.iter().enumerate() {
        let (a, b) = if f < last { (f, f + 1) } else { (f - 1, f) };
        let vis = mask_partial_view(&frame.points, cameras);
        let mut points = Vec::with_capacity(vis.len());
        let mut velocities = Vec::with_capacity(vis.len());
        for &i in &vis {
            let mut p = frame.points[i];
            if depth_noise > 0.0 {
                if let Some(cam) = cameras.iter().find(|c| c.project(&p).is_some()) {
                    p += cam.ray(&p) * noise.sample(rng);
                }
            }
            points.push(p);
            velocities.push((traj.frames[b].points[i] - traj.frames[a].points[i]) / traj.dt);
        }
        frames.push(Frame { time: frame.time, points, velocities: Some(velocities), action: frame.action.clone() });
    }
    Ok(Trajectory { dt: traj.dt, frames })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenOptions {
    pub kind: SceneKind,
    pub duration: f64,
    pub dt: f64,
    pub seed: u64,
    pub interaction: Interaction,
    /// Observe through the first `views` cameras instead of recording the
    /// full particle set.
    pub views: Option<usize>,
    pub cameras: Option<Vec<CameraSpec>>,
    pub depth_noise: f64,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            kind: SceneKind::Rope,
            duration: 3.0,
            dt: 0.1,
            seed: 0,
            interaction: Interaction::Grasp,
            views: None,
            cameras: None,
            depth_noise: 0.0,
        }
    }
}

/// A seeded random scene: rope with a random bend and heading, or cloth
/// with a random heading.
pub fn random_scene<R: Rng>(kind: SceneKind, rng: &mut R) -> OracleScene {
    let mut scene = match kind {
        SceneKind::Rope => OracleScene::rope(rng.random_range(-0.08..0.08)),
        SceneKind::Cloth => OracleScene::cloth(),
    };
    let yaw = Rotation3::from_axis_angle(&Vector3::z_axis(), rng.random_range(0.0..std::f64::consts::TAU));
    for p in scene.positions.iter_mut() {
        *p = yaw * *p;
    }
    scene
}

/// Generate one trajectory file's content from options alone.
pub fn generate(opts: &GenOptions) -> Result<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let scene = random_scene(opts.kind, &mut rng);
    let script = random_script(&scene, opts.interaction, opts.duration, &mut rng);
    let traj = gen_trajectory(&scene, &script, opts.duration, opts.dt)?;
    match opts.views {
        None => Ok(traj),
        Some(v) => {
            let rig = opts.cameras.clone().unwrap_or_else(|| default_rig(Vec3::new(0.0, 0.0, 0.05)));
            if v == 0 || v > rig.len() {
                return Err(Error::Validation(format!("views must be between 1 and {}", rig.len())));
            }
            observe(&traj, &rig[..v], opts.depth_noise, &mut rng)
        }
    }
}
