//! Per-particle rotations from neighbourhood motion and linear blend
//! skinning of kernel poses.

use std::path::Path;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Exec;
use crate::spatial::NearestIndex;
use crate::types::Vec3;

pub const DEFAULT_K: usize = 8;

/// Kernel centers and orientations; `extra` rides along untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSet {
    pub centers: Vec<Vec3>,
    pub quats: Vec<UnitQuaternion<f64>>,
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KernelFile {
    centers: Vec<[f64; 3]>,
    /// `[w, x, y, z]`
    quats: Vec<[f64; 4]>,
    #[serde(default)]
    extra: serde_json::Value,
}

impl KernelSet {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: KernelFile = serde_json::from_str(text).map_err(|e| Error::Validation(format!("kernel file: {e}")))?;
        if f.centers.is_empty() {
            return Err(Error::Validation("kernel file has no kernels".into()));
        }
        if f.centers.len() != f.quats.len() {
            return Err(Error::Validation(format!("kernel file has {} centers but {} quaternions", f.centers.len(), f.quats.len())));
        }
        let mut quats = Vec::with_capacity(f.quats.len());
        for (i, q) in f.quats.iter().enumerate() {
            let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
            if (raw.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::Validation(format!("quats[{i}] has norm {}, expected 1", raw.norm())));
            }
            quats.push(UnitQuaternion::new_unchecked(raw));
        }
        let centers = f.centers.iter().map(|c| Vec3::new(c[0], c[1], c[2])).collect();
        Ok(KernelSet { centers, quats, extra: f.extra })
    }

    pub fn to_json(&self) -> String {
        let f = KernelFile {
            centers: self.centers.iter().map(|c| [c.x, c.y, c.z]).collect(),
            quats: self.quats.iter().map(|q| [q.w, q.i, q.j, q.k]).collect(),
            extra: self.extra.clone(),
        };
        serde_json::to_string_pretty(&f).expect("kernel set serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleRotations {
    pub rotations: Vec<Rotation3<f64>>,
    /// Particles whose neighbourhood was too degenerate to fit; they got
    /// the identity.
    pub degenerate: Vec<usize>,
}

/// Proper rotation `R` minimizing `Σ |R a_i - b_i|²`, or `None` when the
/// offsets `a` span fewer than two dimensions.
pub fn kabsch(a: &[Vec3], b: &[Vec3]) -> Option<Rotation3<f64>> {
    let mut cov = Matrix3::zeros();
    let mut h = Matrix3::zeros();
    for (x, y) in a.iter().zip(b) {
        cov += x * x.transpose();
        h += x * y.transpose();
    }
    let eig = cov.symmetric_eigen().eigenvalues;
    let mut ev = [eig[0], eig[1], eig[2]];
    ev.sort_by(|p, q| q.total_cmp(p));
    if !(ev[0] > 0.0) || ev[1] <= 1e-12 * ev[0] {
        return None;
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * u.transpose();
    Some(Rotation3::from_matrix_unchecked(r))
}

/// Rotation of every particle's `k` nearest neighbours (found at the new
/// positions) from `prev` to `next`.
pub fn estimate_rotations(prev: &[Vec3], next: &[Vec3], k: usize, exec: Exec) -> Result<ParticleRotations> {
    if prev.len() != next.len() {
        return Err(Error::Contract(format!("rotation estimate needs matching frames, got {} and {}", prev.len(), next.len())));
    }
    if prev.len() <= k {
        return Err(Error::Validation(format!("need more than {k} particles to estimate rotations, got {}", prev.len())));
    }
    let index = NearestIndex::new(next);
    let fits = exec.map_range(prev.len(), |p| {
        let nb: Vec<usize> = index.knn(&next[p], k + 1).into_iter().map(|(i, _)| i).filter(|&i| i != p).take(k).collect();
        let a: Vec<Vec3> = nb.iter().map(|&s| prev[s] - prev[p]).collect();
        let b: Vec<Vec3> = nb.iter().map(|&s| next[s] - next[p]).collect();
        kabsch(&a, &b)
    });
    let degenerate = fits.iter().enumerate().filter(|(_, r)| r.is_none()).map(|(i, _)| i).collect();
    Ok(ParticleRotations { rotations: fits.into_iter().map(|r| r.unwrap_or_else(Rotation3::identity)).collect(), degenerate })
}

/// Inverse-distance weights over the `k` particles nearest to `center`.
pub fn lbs_weights(center: &Vec3, particles: &[Vec3], k: usize) -> (Vec<usize>, Vec<f64>) {
    lbs_weights_with(&NearestIndex::new(particles), center, k)
}

fn lbs_weights_with(index: &NearestIndex, center: &Vec3, k: usize) -> (Vec<usize>, Vec<f64>) {
    let nb = index.knn(center, k);
    let idx: Vec<usize> = nb.iter().map(|&(i, _)| i).collect();
    if let Some(pos) = nb.iter().position(|&(_, d)| d == 0.0) {
        let mut w = vec![0.0; nb.len()];
        w[pos] = 1.0;
        return (idx, w);
    }
    let inv: Vec<f64> = nb.iter().map(|&(_, d)| 1.0 / d).collect();
    let total: f64 = inv.iter().sum();
    (idx, inv.into_iter().map(|w| w / total).collect())
}

/// Move kernels with the particles: blended rigid transforms for centers,
/// sign-aligned blended rotations composed onto orientations.
pub fn lbs_apply(kernels: &KernelSet, prev: &[Vec3], next: &[Vec3], rotations: &ParticleRotations, k: usize, exec: Exec) -> Result<KernelSet> {
    if prev.len() != next.len() || rotations.rotations.len() != prev.len() {
        return Err(Error::Contract("skinning needs matching particle frames and rotations".into()));
    }
    if prev.len() < k {
        return Err(Error::Validation(format!("need at least {k} particles for skinning, got {}", prev.len())));
    }
    let index = NearestIndex::new(prev);
    let quats: Vec<UnitQuaternion<f64>> = rotations.rotations.iter().map(UnitQuaternion::from_rotation_matrix).collect();
    let moved = exec.map_range(kernels.len(), |i| {
        let mu = kernels.centers[i];
        let (idx, w) = lbs_weights_with(&index, &mu, k);
        let mut center = Vec3::zeros();
        let mut blend = Quaternion::new(0.0, 0.0, 0.0, 0.0);
        let reference = quats[idx[0]].coords;
        for (&p, &wp) in idx.iter().zip(&w) {
            center += wp * (rotations.rotations[p] * (mu - prev[p]) + prev[p] + (next[p] - prev[p]));
            let q = quats[p];
            let sign = if q.coords.dot(&reference) < 0.0 { -1.0 } else { 1.0 };
            blend += q.into_inner() * (wp * sign);
        }
        (center, UnitQuaternion::from_quaternion(blend) * kernels.quats[i])
    });
    let (centers, quats) = moved.into_iter().unzip();
    Ok(KernelSet { centers, quats, extra: kernels.extra.clone() })
}

/// Kernel sets for every frame of a particle track sequence, starting with
/// the input set at frame 0.
pub fn skin_sequence(kernels: &KernelSet, tracks: &[Vec<Vec3>], k: usize, exec: Exec) -> Result<(Vec<KernelSet>, usize)> {
    let mut out = vec![kernels.clone()];
    let mut degenerate = 0;
    for pair in tracks.windows(2) {
        let rot = estimate_rotations(&pair[0], &pair[1], k, exec)?;
        degenerate += rot.degenerate.len();
        let next = lbs_apply(out.last().expect("non-empty"), &pair[0], &pair[1], &rot, k, exec)?;
        out.push(next);
    }
    Ok((out, degenerate))
}
