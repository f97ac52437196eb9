//! Uniform spatial hash for radius and k-nearest-neighbor queries.

use std::collections::HashMap;

use crate::types::Vec3;

type Cell = (i64, i64, i64);

pub struct SpatialHash<'a> {
    points: &'a [Vec3],
    cell: f64,
    buckets: HashMap<Cell, Vec<usize>>,
    lo: Cell,
    hi: Cell,
}

impl<'a> SpatialHash<'a> {
    pub fn new(points: &'a [Vec3], cell: f64) -> Self {
        assert!(cell > 0.0, "cell size must be positive");
        let mut buckets: HashMap<Cell, Vec<usize>> = HashMap::new();
        let mut lo = (i64::MAX, i64::MAX, i64::MAX);
        let mut hi = (i64::MIN, i64::MIN, i64::MIN);
        for (i, p) in points.iter().enumerate() {
            let c = cell_of(p, cell);
            lo = (lo.0.min(c.0), lo.1.min(c.1), lo.2.min(c.2));
            hi = (hi.0.max(c.0), hi.1.max(c.1), hi.2.max(c.2));
            buckets.entry(c).or_default().push(i);
        }
        SpatialHash { points, cell, buckets, lo, hi }
    }

    /// Cell size from the mean nearest-neighbour spacing of a bounding box.
    pub fn auto(points: &'a [Vec3]) -> Self {
        let (lo, hi) = bounds(points);
        let ext = hi - lo;
        let vol = ext.iter().map(|e| e.max(1e-6)).product::<f64>();
        let spacing = (vol / points.len().max(1) as f64).cbrt().max(1e-6);
        Self::new(points, spacing)
    }

    /// Indices of points within `r` of `q` (inclusive), ascending.
    pub fn within(&self, q: &Vec3, r: f64) -> Vec<usize> {
        let r2 = r * r;
        let lo = cell_of(&(q - Vec3::repeat(r)), self.cell);
        let hi = cell_of(&(q + Vec3::repeat(r)), self.cell);
        let mut out = Vec::new();
        for x in lo.0.max(self.lo.0)..=hi.0.min(self.hi.0) {
            for y in lo.1.max(self.lo.1)..=hi.1.min(self.hi.1) {
                for z in lo.2.max(self.lo.2)..=hi.2.min(self.hi.2) {
                    if let Some(b) = self.buckets.get(&(x, y, z)) {
                        out.extend(b.iter().copied().filter(|&i| (self.points[i] - q).norm_squared() <= r2));
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// The `k` nearest points as `(index, distance)`, closest first; ties
    /// broken by index.
    pub fn knn(&self, q: &Vec3, k: usize) -> Vec<(usize, f64)> {
        let k = k.min(self.points.len());
        if k == 0 {
            return Vec::new();
        }
        let c = cell_of(q, self.cell);
        let max_ring = [
            (c.0 - self.lo.0).abs(),
            (c.0 - self.hi.0).abs(),
            (c.1 - self.lo.1).abs(),
            (c.1 - self.hi.1).abs(),
            (c.2 - self.lo.2).abs(),
            (c.2 - self.hi.2).abs(),
        ]
        .into_iter()
        .max()
        .unwrap_or(0);
        let mut found: Vec<(usize, f64)> = Vec::new();
        for ring in 0..=max_ring {
            for x in c.0 - ring..=c.0 + ring {
                for y in c.1 - ring..=c.1 + ring {
                    for z in c.2 - ring..=c.2 + ring {
                        let on_shell = (x - c.0).abs() == ring || (y - c.1).abs() == ring || (z - c.2).abs() == ring;
                        if !on_shell {
                            continue;
                        }
                        if let Some(b) = self.buckets.get(&(x, y, z)) {
                            found.extend(b.iter().map(|&i| (i, (self.points[i] - q).norm())));
                        }
                    }
                }
            }
            if found.len() >= k {
                sort_hits(&mut found);
                // Anything outside the searched shell is at least `ring * cell` away.
                if found[k - 1].1 <= ring as f64 * self.cell {
                    break;
                }
            }
        }
        sort_hits(&mut found);
        found.truncate(k);
        found
    }
}

fn sort_hits(v: &mut [(usize, f64)]) {
    v.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
}

fn cell_of(p: &Vec3, cell: f64) -> Cell {
    ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64)
}

pub fn bounds(points: &[Vec3]) -> (Vec3, Vec3) {
    points.iter().fold(
        (Vec3::repeat(f64::INFINITY), Vec3::repeat(f64::NEG_INFINITY)),
        |(lo, hi), p| (lo.inf(p), hi.sup(p)),
    )
}

/// Brute-force k nearest neighbours, same ordering as [`SpatialHash::knn`].
pub fn knn_brute(points: &[Vec3], q: &Vec3, k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = points.iter().enumerate().map(|(i, p)| (i, (p - q).norm())).collect();
    sort_hits(&mut all);
    all.truncate(k);
    all
}

/// Distance from `q` to its nearest point, brute force below 256 points.
pub struct NearestIndex<'a> {
    points: &'a [Vec3],
    hash: Option<SpatialHash<'a>>,
}

impl<'a> NearestIndex<'a> {
    pub const BRUTE_FORCE_BELOW: usize = 256;

    pub fn new(points: &'a [Vec3]) -> Self {
        let hash = (points.len() >= Self::BRUTE_FORCE_BELOW).then(|| SpatialHash::auto(points));
        NearestIndex { points, hash }
    }

    pub fn nearest_distance(&self, q: &Vec3) -> f64 {
        match &self.hash {
            Some(h) => h.knn(q, 1)[0].1,
            None => self.points.iter().map(|p| (p - q).norm()).fold(f64::INFINITY, f64::min),
        }
    }

    pub fn knn(&self, q: &Vec3, k: usize) -> Vec<(usize, f64)> {
        match &self.hash {
            Some(h) => h.knn(q, k),
            None => knn_brute(self.points, q, k),
        }
    }
}
