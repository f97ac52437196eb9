//! On-disk trajectory format and training windows.
//!
//! A trajectory file is UTF-8 JSON lines: a header record
//! `{"version":1,"n":..,"dt":..,"arms":..,"frames":..}` followed by one
//! record per frame
//! `{"t":..,"x":[[x,y,z],..],"eef":[{"type":0|1,"pose":[qw,qx,qy,qz,tx,ty,tz],"twist":[wx,wy,wz,vx,vy,vz],"open":..},..]}`.
//! Frames written from partial views may also carry per-point velocities
//! under `"v"`, which the track extractor consumes.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{json_offset, Action, ActionType, ArmCommand, ParticleState, Vec3};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub time: f64,
    pub points: Vec<Vec3>,
    pub velocities: Option<Vec<Vec3>>,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub frames: Vec<Frame>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    n: usize,
    dt: f64,
    arms: usize,
    frames: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EefRecord {
    #[serde(rename = "type")]
    kind: u8,
    pose: [Option<f64>; 7],
    twist: [Option<f64>; 6],
    open: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    t: f64,
    x: Vec<[Option<f64>; 3]>,
    eef: Vec<EefRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    v: Option<Vec<[Option<f64>; 3]>>,
}

fn finite_or_err<const N: usize>(vals: &[Option<f64>; N], what: &str, line: usize) -> Result<[f64; N]> {
    let mut out = [0.0; N];
    for (o, v) in out.iter_mut().zip(vals) {
        match v {
            Some(x) if x.is_finite() => *o = *x,
            _ => {
                return Err(Error::Validation(format!("non-finite {what} on line {line}")));
            }
        }
    }
    Ok(out)
}

fn opt3(v: &Vec3) -> [Option<f64>; 3] {
    [Some(v.x), Some(v.y), Some(v.z)]
}

impl Trajectory {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    /// Particle count if every frame holds the same number of points.
    pub fn persistent_n(&self) -> Option<usize> {
        let n = self.frames.first()?.points.len();
        self.frames.iter().all(|f| f.points.len() == n).then_some(n)
    }

    pub fn duration(&self) -> f64 {
        match (self.frames.first(), self.frames.last()) {
            (Some(a), Some(b)) => b.time - a.time,
            _ => 0.0,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            version: FORMAT_VERSION,
            n: self.frames.first().map_or(0, |f| f.points.len()),
            dt: self.dt,
            arms: self.frames.first().map_or(0, |f| f.action.arms.len()),
            frames: self.frames.len(),
        };
        writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        for f in &self.frames {
            let rec = FrameRecord {
                t: f.time,
                x: f.points.iter().map(opt3).collect(),
                eef: f
                    .action
                    .arms
                    .iter()
                    .map(|a| {
                        let p = a.pose_array();
                        EefRecord {
                            kind: a.action_type.code(),
                            pose: p.map(Some),
                            twist: [
                                a.angular.x, a.angular.y, a.angular.z, a.linear.x, a.linear.y, a.linear.z,
                            ]
                            .map(Some),
                            open: Some(a.gripper_open),
                        }
                    })
                    .collect(),
                v: f.velocities.as_ref().map(|v| v.iter().map(opt3).collect()),
            };
            writeln!(w, "{}", serde_json::to_string(&rec).expect("frame serializes"))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut reader = BufReader::new(r);
        let mut offset = 0usize;
        let mut line = String::new();
        let mut lineno = 0usize;
        let read = reader.read_line(&mut line)?;
        if read == 0 || line.trim().is_empty() {
            return Err(Error::Format { offset: 0, message: "missing header record".into() });
        }
        lineno += 1;
        let header: Header = serde_json::from_str(&line).map_err(|e| Error::Format {
            offset: json_offset(&line, e.line(), e.column()),
            message: format!("header: {e}"),
        })?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Format { offset: 0, message: format!("unsupported version {}", header.version) });
        }
        if !(header.dt > 0.0) {
            return Err(Error::Validation(format!("dt {} must be positive", header.dt)));
        }
        offset += read;
        let mut frames = Vec::with_capacity(header.frames);
        loop {
            line.clear();
            let read = reader.read_line(&mut line)?;
            if read == 0 {
                break;
            }
            lineno += 1;
            if line.trim().is_empty() {
                offset += read;
                continue;
            }
            let rec: FrameRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
                offset: offset + json_offset(&line, e.line(), e.column()),
                message: format!("frame on line {lineno}: {e}"),
            })?;
            frames.push(frame_from_record(rec, lineno)?);
            offset += read;
        }
        if frames.len() != header.frames {
            return Err(Error::Format {
                offset,
                message: format!("header declares {} frames, found {}", header.frames, frames.len()),
            });
        }
        if frames.windows(2).any(|w| w[1].time < w[0].time) {
            return Err(Error::Validation("frames are not in time order".into()));
        }
        Ok(Trajectory { dt: header.dt, frames })
    }
}

fn frame_from_record(rec: FrameRecord, line: usize) -> Result<Frame> {
    if !rec.t.is_finite() {
        return Err(Error::Validation(format!("non-finite time on line {line}")));
    }
    let points = rec
        .x
        .iter()
        .map(|p| finite_or_err(p, "position", line).map(|a| Vec3::new(a[0], a[1], a[2])))
        .collect::<Result<Vec<_>>>()?;
    let velocities = match rec.v {
        Some(v) => {
            if v.len() != points.len() {
                return Err(Error::Validation(format!("velocity count mismatch on line {line}")));
            }
            Some(
                v.iter()
                    .map(|p| finite_or_err(p, "velocity", line).map(|a| Vec3::new(a[0], a[1], a[2])))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        None => None,
    };
    let arms = rec
        .eef
        .iter()
        .map(|e| {
            let kind = ActionType::from_code(e.kind)
                .ok_or_else(|| Error::Validation(format!("unknown action type {} on line {line}", e.kind)))?;
            let pose = finite_or_err(&e.pose, "pose", line)?;
            let twist = finite_or_err(&e.twist, "twist", line)?;
            let open = finite_or_err(&[e.open], "gripper opening", line)?[0];
            ArmCommand::from_arrays(kind, pose, twist, open)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Frame { time: rec.t, points, velocities, action: Action::new(arms)? })
}

/// Load a trajectory file as time-ordered frames.
pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let file = std::fs::File::open(path)?;
    Trajectory::read_from(file)
}

pub fn save_trajectory(traj: &Trajectory, path: &Path) -> Result<()> {
    traj.save(path)
}

/// Training sample of `h + K + 1` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryWindow {
    pub tracks: Vec<Vec<Vec3>>,
    /// Finite-difference velocities for the first `h + 1` frames, zero before
    /// the episode starts.
    pub velocities: Vec<Vec<Vec3>>,
    pub actions: Vec<Action>,
    pub first_frame_index: usize,
    pub history: usize,
    pub dt: f64,
}

impl TrajectoryWindow {
    pub fn horizon(&self) -> usize {
        self.tracks.len() - self.history - 1
    }

    /// State at the last history frame.
    pub fn initial_state(&self) -> ParticleState {
        ParticleState {
            positions: self.tracks[self.history].clone(),
            velocity_history: self.velocities.clone(),
            time: (self.first_frame_index + self.history) as f64 * self.dt,
        }
    }

    /// Actions applied over the rollout, one per step.
    pub fn rollout_actions(&self) -> &[Action] {
        &self.actions[self.history..self.history + self.horizon()]
    }

    pub fn targets(&self) -> &[Vec<Vec3>] {
        &self.tracks[self.history + 1..]
    }
}

/// Backward-difference velocities for every frame of a persistent track set.
pub fn track_velocities(tracks: &[Vec<Vec3>], dt: f64) -> Vec<Vec<Vec3>> {
    (0..tracks.len())
        .map(|j| {
            if j == 0 {
                vec![Vec3::zeros(); tracks[0].len()]
            } else {
                tracks[j].iter().zip(&tracks[j - 1]).map(|(a, b)| (a - b) / dt).collect()
            }
        })
        .collect()
}

pub fn window_count(frames: usize, h: usize, k: usize) -> usize {
    (frames + 1).saturating_sub(h + k + 1)
}

/// Stride-1 sliding windows over a trajectory with persistent tracks.
pub fn make_windows(traj: &Trajectory, h: usize, k: usize) -> Result<Vec<TrajectoryWindow>> {
    if traj.frames.is_empty() {
        return Ok(Vec::new());
    }
    if traj.persistent_n().is_none() {
        return Err(Error::Contract("windows need persistent tracks (constant particle count)".into()));
    }
    let tracks: Vec<Vec<Vec3>> = traj.frames.iter().map(|f| f.points.clone()).collect();
    let vels = track_velocities(&tracks, traj.dt);
    let len = h + k + 1;
    Ok((0..window_count(tracks.len(), h, k))
        .map(|s| TrajectoryWindow {
            tracks: tracks[s..s + len].to_vec(),
            velocities: vels[s..=s + h].to_vec(),
            actions: traj.frames[s..s + len].iter().map(|f| f.action.clone()).collect(),
            first_frame_index: s,
            history: h,
            dt: traj.dt,
        })
        .collect())
}

pub fn centroid(points: &[Vec3]) -> Vec3 {
    points.iter().sum::<Vec3>() / points.len().max(1) as f64
}

/// Scale a point cloud about its centroid.
pub fn scale_object(points: &[Vec3], s: f64) -> Result<Vec<Vec3>> {
    if !(s > 0.0) {
        return Err(Error::Parameter(format!("scale factor {s} must be positive")));
    }
    let c = centroid(points);
    Ok(points.iter().map(|p| c + (p - c) * s).collect())
}
