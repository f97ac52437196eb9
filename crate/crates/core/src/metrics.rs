//! Point-cloud errors in meters: mean distance, Chamfer and earth mover's.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spatial::NearestIndex;
use crate::types::Vec3;

pub const EMD_MAX_POINTS: usize = 512;

/// Mean distance between corresponding points.
pub fn mde(pred: &[Vec3], truth: &[Vec3]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Contract(format!("mde needs equal sizes, got {} and {}", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::Contract("mde of empty clouds".into()));
    }
    Ok(pred.iter().zip(truth).map(|(a, b)| (a - b).norm()).sum::<f64>() / pred.len() as f64)
}

/// Mean distance from each point of `a` to its nearest neighbour in `b`.
pub fn one_sided(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract("nearest-neighbour distance needs non-empty clouds".into()));
    }
    let index = NearestIndex::new(b);
    Ok(a.iter().map(|p| index.nearest_distance(p)).sum::<f64>() / a.len() as f64)
}

/// Symmetric Chamfer distance with unsquared distances.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    Ok(0.5 * (one_sided(a, b)? + one_sided(b, a)?))
}

/// Minimum-cost perfect assignment on a square cost matrix (row-major).
/// Returns `assignment[row] = column`.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    // potentials formulation, 1-based with a virtual column 0
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Earth mover's distance: mean distance under the optimal one-to-one
/// correspondence.
pub fn emd(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("emd needs equal sizes, got {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    if n == 0 {
        return Err(Error::Contract("emd of empty clouds".into()));
    }
    if n > EMD_MAX_POINTS {
        return Err(Error::Capacity(format!("emd supports at most {EMD_MAX_POINTS} points, got {n}")));
    }
    let cost: Vec<f64> = a.iter().flat_map(|p| b.iter().map(move |q| (p - q).norm())).collect();
    let assign = hungarian(&cost, n);
    Ok(assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>() / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub per_clip: Vec<f64>,
}

impl MetricSummary {
    /// Population mean and standard deviation; zeros when empty.
    pub fn from_values(per_clip: Vec<f64>) -> Self {
        if per_clip.is_empty() {
            return MetricSummary { mean: 0.0, std: 0.0, per_clip };
        }
        let n = per_clip.len() as f64;
        let mean = per_clip.iter().sum::<f64>() / n;
        let var = per_clip.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        MetricSummary { mean, std: var.sqrt(), per_clip }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mde: MetricSummary,
    pub chamfer: MetricSummary,
    pub emd: MetricSummary,
}

impl MetricReport {
    pub fn from_clips(mde: Vec<f64>, chamfer: Vec<f64>, emd: Vec<f64>) -> Self {
        MetricReport {
            mde: MetricSummary::from_values(mde),
            chamfer: MetricSummary::from_values(chamfer),
            emd: MetricSummary::from_values(emd),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per clip: `clip,mde,chamfer,emd`, then mean and std rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("clip,mde,chamfer,emd\n");
        for i in 0..self.mde.per_clip.len() {
            s.push_str(&format!("{i},{},{},{}\n", self.mde.per_clip[i], self.chamfer.per_clip[i], self.emd.per_clip[i]));
        }
        s.push_str(&format!("mean,{},{},{}\n", self.mde.mean, self.chamfer.mean, self.emd.mean));
        s.push_str(&format!("std,{},{},{}\n", self.mde.std, self.chamfer.std, self.emd.std));
        s
    }
}
