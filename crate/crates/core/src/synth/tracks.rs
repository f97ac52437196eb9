//! Persistent tracks from per-frame observations with per-point velocities.

use std::collections::BTreeMap;

use crate::dataset::{Frame, Trajectory};
use crate::error::{Error, Result};
use crate::spatial::NearestIndex;
use crate::types::Vec3;

pub const DEFAULT_TRACK_K: usize = 5;

/// One observed frame: points and their velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub points: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
}

/// Voxel-grid downsampling: the centroid of each occupied voxel, in voxel
/// order, with the member indices of each.
pub fn voxel_downsample(points: &[Vec3], voxel: f64) -> (Vec<Vec3>, Vec<Vec<usize>>) {
    let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        let key = [0, 1, 2].map(|a| (p[a] / voxel).floor() as i64);
        cells.entry(key).or_default().push(i);
    }
    let members: Vec<Vec<usize>> = cells.into_values().collect();
    let centers = members
        .iter()
        .map(|m| m.iter().map(|&i| points[i]).sum::<Vec3>() / m.len() as f64)
        .collect();
    (centers, members)
}

fn mean_velocity(obs: &Observation, index: &NearestIndex, q: &Vec3, k: usize) -> Vec3 {
    let nn = index.knn(q, k);
    nn.iter().map(|&(i, _)| obs.velocities[i]).sum::<Vec3>() / nn.len() as f64
}

/// Evolve `seeds` through the frames: each track moves by its velocity times
/// `dt`, then takes the mean velocity of its `k` nearest observed points.
pub fn extract_tracks(frames: &[Observation], seeds: &[Vec3], dt: f64, k: usize) -> Result<Vec<Vec<Vec3>>> {
    if frames.len() < 2 {
        return Err(Error::Contract("track extraction needs at least two frames".into()));
    }
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    for (f, obs) in frames.iter().enumerate() {
        if obs.points.is_empty() {
            return Err(Error::Tracking { frame: f, message: "no observed points".into() });
        }
        if obs.velocities.len() != obs.points.len() {
            return Err(Error::Tracking { frame: f, message: "velocity count differs from point count".into() });
        }
    }
    let mut tracks = Vec::with_capacity(frames.len());
    let mut x = seeds.to_vec();
    let mut v: Vec<Vec3> = {
        let index = NearestIndex::new(&frames[0].points);
        x.iter().map(|q| mean_velocity(&frames[0], &index, q, k)).collect()
    };
    tracks.push(x.clone());
    for obs in &frames[1..] {
        for (p, u) in x.iter_mut().zip(&v) {
            *p += u * dt;
        }
        let index = NearestIndex::new(&obs.points);
        v = x.iter().map(|q| mean_velocity(obs, &index, q, k)).collect();
        tracks.push(x.clone());
    }
    Ok(tracks)
}

/// A trajectory with a fixed particle set. Files that already hold one are
/// returned as-is; partial-view files are tracked from voxel seeds.
pub fn persistent_trajectory(traj: &Trajectory, voxel: f64, k: usize) -> Result<Trajectory> {
    let has_velocities = traj.frames.iter().all(|f| f.velocities.is_some());
    if traj.persistent_n().is_some() && !has_velocities {
        return Ok(traj.clone());
    }
    if !has_velocities {
        return Err(Error::Validation("varying point counts without per-point velocities cannot be tracked".into()));
    }
    let obs: Vec<Observation> = traj
        .frames
        .iter()
        .map(|f| Observation { points: f.points.clone(), velocities: f.velocities.clone().unwrap_or_default() })
        .collect();
    if obs[0].points.is_empty() {
        return Err(Error::Tracking { frame: 0, message: "no observed points".into() });
    }
    let (seeds, _) = voxel_downsample(&obs[0].points, voxel);
    let tracks = extract_tracks(&obs, &seeds, traj.dt, k)?;
    Ok(Trajectory {
        dt: traj.dt,
        frames: traj
            .frames
            .iter()
            .zip(tracks)
            .map(|(f, points)| Frame { time: f.time, points, velocities: None, action: f.action.clone() })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud() -> Vec<Vec3> {
        (0..50).map(|i| Vec3::new(0.01 * i as f64, (i as f64 * 0.7).sin() * 0.05, 0.02 * (i % 4) as f64)).collect()
    }

    #[test]
    fn static_scene_keeps_tracks() {
        let pts = cloud();
        let obs = vec![Observation { points: pts.clone(), velocities: vec![Vec3::zeros(); pts.len()] }; 5];
        let tracks = extract_tracks(&obs, &pts[..10], 0.1, 5).unwrap();
        assert!(tracks.iter().all(|t| t == &pts[..10].to_vec()));
    }

    #[test]
    fn rigid_translation_is_followed() {
        let pts = cloud();
        let v = Vec3::new(0.1, 0.0, 0.0);
        let obs: Vec<Observation> = (0..10)
            .map(|f| Observation { points: pts.iter().map(|p| p + v * (0.1 * f as f64)).collect(), velocities: vec![v; pts.len()] })
            .collect();
        let tracks = extract_tracks(&obs, &pts, 0.1, 5).unwrap();
        for (f, frame) in tracks.iter().enumerate() {
            assert_eq!(frame.len(), pts.len());
            for (a, b) in frame.iter().zip(&pts) {
                assert!((a - (b + v * (0.1 * f as f64))).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn empty_frame_is_tracking_error() {
        let pts = cloud();
        let obs = vec![
            Observation { points: pts.clone(), velocities: vec![Vec3::zeros(); pts.len()] },
            Observation { points: vec![], velocities: vec![] },
        ];
        assert!(matches!(extract_tracks(&obs, &pts, 0.1, 5), Err(Error::Tracking { frame: 1, .. })));
    }

    #[test]
    fn voxel_centroids() {
        let pts = vec![Vec3::new(0.001, 0.001, 0.001), Vec3::new(0.003, 0.001, 0.001), Vec3::new(0.05, 0.0, 0.0)];
        let (c, m) = voxel_downsample(&pts, 0.02);
        assert_eq!(c.len(), 2);
        assert!((c[0] - Vec3::new(0.002, 0.001, 0.001)).norm() < 1e-15);
        assert_eq!(m, vec![vec![0, 1], vec![2]]);
    }
}
