//! Pinhole depth cameras and z-buffer visibility.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{json_offset, Vec3};

/// A point is visible when within this depth of its cell's nearest point (m).
pub const VISIBILITY_TOLERANCE: f64 = 0.01;

fn default_up() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

fn default_res() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    #[serde(default = "default_up")]
    pub up: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default = "default_res")]
    pub width: usize,
    #[serde(default = "default_res")]
    pub height: usize,
}

impl CameraSpec {
    /// Camera at `position` looking at `target` with the given horizontal
    /// field of view on a square 64 x 64 raster.
    pub fn looking_at(position: Vec3, target: Vec3, fov_deg: f64) -> Self {
        let f = 32.0 / (0.5 * fov_deg.to_radians()).tan();
        CameraSpec {
            position: position.into(),
            look_at: target.into(),
            up: default_up(),
            fx: f,
            fy: f,
            cx: 32.0,
            cy: 32.0,
            width: 64,
            height: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::Validation("camera intrinsics need positive focal lengths and raster size".into()));
        }
        let (p, t) = (Vec3::from(self.position), Vec3::from(self.look_at));
        let f = t - p;
        if f.norm() < 1e-9 || f.normalize().cross(&Vec3::from(self.up)).norm() < 1e-9 {
            return Err(Error::Validation("camera look direction is degenerate".into()));
        }
        Ok(())
    }

    fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let f = (Vec3::from(self.look_at) - Vec3::from(self.position)).normalize();
        let r = f.cross(&Vec3::from(self.up)).normalize();
        let down = f.cross(&r);
        (r, down, f)
    }

    /// Pixel cell and depth of `x`, or `None` when outside the frame.
    pub fn project(&self, x: &Vec3) -> Option<((usize, usize), f64)> {
        let (r, d, f) = self.basis();
        let rel = x - Vec3::from(self.position);
        let z = rel.dot(&f);
        if z <= 1e-9 {
            return None;
        }
        let u = self.fx * rel.dot(&r) / z + self.cx;
        let v = self.fy * rel.dot(&d) / z + self.cy;
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return None;
        }
        Some(((u as usize, v as usize), z))
    }

    /// Unit viewing ray from the camera toward `x`.
    pub fn ray(&self, x: &Vec3) -> Vec3 {
        (x - Vec3::from(self.position)).normalize()
    }
}

/// Four cameras at 45-degree azimuth steps plus 90, elevated 35 degrees,
/// 1.2 m from `target`.
pub fn default_rig(target: Vec3) -> Vec<CameraSpec> {
    (0..4)
        .map(|k| {
            let az = (45.0 + 90.0 * k as f64).to_radians();
            let el = 35f64.to_radians();
            let dir = Vec3::new(az.cos() * el.cos(), az.sin() * el.cos(), el.sin());
            CameraSpec::looking_at(target + dir * 1.2, target, 50.0)
        })
        .collect()
}

pub fn load_cameras(path: &Path) -> Result<Vec<CameraSpec>> {
    let text = std::fs::read_to_string(path)?;
    let cams: Vec<CameraSpec> = serde_json::from_str(&text).map_err(|e| Error::Format {
        offset: json_offset(&text, e.line(), e.column()),
        message: format!("camera file: {e}"),
    })?;
    if cams.is_empty() {
        return Err(Error::Validation("camera file lists no cameras".into()));
    }
    for c in &cams {
        c.validate()?;
    }
    Ok(cams)
}

/// Indices (ascending) of the points visible from at least one camera.
pub fn mask_partial_view(points: &[Vec3], cameras: &[CameraSpec]) -> Vec<usize> {
    let mut visible = vec![false; points.len()];
    for cam in cameras {
        let proj: Vec<Option<((usize, usize), f64)>> = points.iter().map(|p| cam.project(p)).collect();
        let mut nearest: HashMap<(usize, usize), f64> = HashMap::new();
        for (cell, z) in proj.iter().flatten() {
            let e = nearest.entry(*cell).or_insert(f64::INFINITY);
            *e = e.min(*z);
        }
        for (i, p) in proj.iter().enumerate() {
            if let Some((cell, z)) = p {
                if *z <= nearest[cell] + VISIBILITY_TOLERANCE {
                    visible[i] = true;
                }
            }
        }
    }
    (0..points.len()).filter(|&i| visible[i]).collect()
}
