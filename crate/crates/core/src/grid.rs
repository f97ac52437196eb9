//! Uniform Eulerian grid: frame normalization, velocity editing and the
//! B-spline grid-to-particle transfer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::spatial::bounds;
use crate::tensor::{ground_row, stencil_weights, G2pStencil};
use crate::types::Vec3;

pub use crate::tensor::bspline_weight as bspline_weight_1d;

/// Free nodes kept between the point cloud and each grid face.
pub const MARGIN_NODES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    /// Nodes per axis.
    pub l: usize,
    /// Node spacing (m).
    pub delta: f64,
}

impl Grid {
    pub fn new(l: usize, delta: f64) -> Result<Self> {
        if l < 2 || !(delta > 0.0) {
            return Err(Error::Parameter(format!("invalid grid l={l} delta={delta}")));
        }
        Ok(Grid { l, delta })
    }

    pub fn extent(&self) -> f64 {
        (self.l - 1) as f64 * self.delta
    }

    pub fn center(&self) -> Vec3 {
        Vec3::repeat(0.5 * self.extent())
    }

    pub fn node_count(&self) -> usize {
        self.l * self.l * self.l
    }

    /// Flat index of node `(i, j, k)`, z fastest.
    pub fn index(&self, node: [i64; 3]) -> usize {
        let l = self.l as i64;
        ((node[0] * l + node[1]) * l + node[2]) as usize
    }

    pub fn node_position(&self, node: [i64; 3]) -> Vec3 {
        Vec3::new(node[0] as f64, node[1] as f64, node[2] as f64) * self.delta
    }

    pub fn node_at(&self, index: usize) -> [i64; 3] {
        let l = self.l;
        [(index / (l * l)) as i64, ((index / l) % l) as i64, (index % l) as i64]
    }

    /// Largest bounding-box side that fits with the node margin.
    pub fn capacity(&self) -> f64 {
        self.extent() - 2.0 * MARGIN_NODES as f64 * self.delta
    }

    /// Lower corner of the 3x3x3 quadratic B-spline stencil of `p`.
    pub fn stencil_base(&self, p: &Vec3) -> [i64; 3] {
        [0, 1, 2].map(|a| (p[a] / self.delta - 0.5).floor() as i64)
    }

    fn check_inside(&self, p: &Vec3) -> Result<()> {
        let b = self.stencil_base(p);
        if b.iter().any(|&x| x < 0 || x + 2 > self.l as i64 - 1) || p.iter().any(|x| !x.is_finite()) {
            return Err(Error::Capacity(format!(
                "particle ({:.4}, {:.4}, {:.4}) lies outside the grid support; use a larger l or delta",
                p.x, p.y, p.z
            )));
        }
        Ok(())
    }
}

/// Dense per-node velocities, z-fastest node order.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub grid: Grid,
    pub velocities: Vec<Vec3>,
    /// World-to-grid translation that produced the particle frame.
    pub offset: Vec3,
}

impl GridField {
    pub fn zeros(grid: Grid) -> Self {
        GridField { grid, velocities: vec![Vec3::zeros(); grid.node_count()], offset: Vec3::zeros() }
    }

    pub fn constant(grid: Grid, v: Vec3) -> Self {
        GridField { grid, velocities: vec![v; grid.node_count()], offset: Vec3::zeros() }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(Vec3) -> Vec3) -> Self {
        let velocities = (0..grid.node_count()).map(|i| f(grid.node_position(grid.node_at(i)))).collect();
        GridField { grid, velocities, offset: Vec3::zeros() }
    }
}

/// Grasp constraint for velocity editing, in the grid frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraspSpec {
    pub center: Vec3,
    pub angular: Vec3,
    pub linear: Vec3,
    pub radius: f64,
    pub active: bool,
}

/// Translate points and end-effector positions so the point cloud's
/// bounding box is centered in the grid volume.
pub fn normalize_to_grid(points: &[Vec3], eef: &[Vec3], grid: &Grid) -> Result<(Vec<Vec3>, Vec<Vec3>, Vec3)> {
    if points.is_empty() {
        return Err(Error::Contract("cannot normalize an empty point cloud".into()));
    }
    let (lo, hi) = bounds(points);
    let size = (hi - lo).max();
    if size > grid.capacity() {
        return Err(Error::Capacity(format!(
            "point cloud spans {size:.3} m but the grid holds {:.3} m (l={}, delta={}); increase l or delta",
            grid.capacity(),
            grid.l,
            grid.delta
        )));
    }
    let offset = grid.center() - 0.5 * (lo + hi);
    Ok((points.iter().map(|p| p + offset).collect(), eef.iter().map(|p| p + offset).collect(), offset))
}

/// Interpolate node velocities to particles with the quadratic B-spline.
pub fn g2p(field: &GridField, particles: &[Vec3]) -> Result<Vec<Vec3>> {
    let grid = &field.grid;
    particles
        .iter()
        .map(|p| {
            grid.check_inside(p)?;
            let base = grid.stencil_base(p);
            let (w, _) = stencil_weights(p.as_slice(), &base, grid.delta);
            let mut v = Vec3::zeros();
            for (s, wi) in w.iter().enumerate() {
                let node = [base[0] + (s / 9) as i64, base[1] + ((s / 3) % 3) as i64, base[2] + (s % 3) as i64];
                v += field.velocities[grid.index(node)] * *wi;
            }
            Ok(v)
        })
        .collect()
}

/// Sum of a particle's 27 transfer weights.
pub fn weight_sum(grid: &Grid, p: &Vec3) -> f64 {
    let (w, _) = stencil_weights(p.as_slice(), &grid.stencil_base(p), grid.delta);
    w.iter().sum()
}

/// Rigid grasp velocity at a node.
pub fn grasp_velocity(grasp: &GraspSpec, x: &Vec3) -> Vec3 {
    grasp.angular.cross(&(x - grasp.center)) + grasp.linear
}

/// Overwrite node velocities within the grasp radius with the rigid motion.
pub fn gve_grasp(field: &mut GridField, grasp: &GraspSpec) {
    if !grasp.active {
        return;
    }
    let grid = field.grid;
    for (i, v) in field.velocities.iter_mut().enumerate() {
        let x = grid.node_position(grid.node_at(i));
        if (x - grasp.center).norm() <= grasp.radius {
            *v = grasp_velocity(grasp, &x);
        }
    }
}

/// Remove inward normal velocity at nodes in the contact band and apply
/// Coulomb-style tangential friction.
pub fn gve_ground(field: &mut GridField, ground_height: f64, mu: f64) {
    let grid = field.grid;
    for (i, v) in field.velocities.iter_mut().enumerate() {
        if grid.node_position(grid.node_at(i)).z <= ground_height + grid.delta {
            ground_row(v.as_mut_slice(), mu);
        }
    }
}

/// The nodes touched by the particles' stencils, in ascending node order,
/// plus the transfer stencil expressed in rows of that list.
#[derive(Debug, Clone)]
pub struct ActiveNodes {
    pub nodes: Vec<[i64; 3]>,
    pub stencil: G2pStencil,
}

impl ActiveNodes {
    pub fn positions(&self, grid: &Grid) -> Vec<Vec3> {
        self.nodes.iter().map(|n| grid.node_position(*n)).collect()
    }
}

pub fn active_nodes(grid: &Grid, particles: &[Vec3]) -> Result<ActiveNodes> {
    let mut rows: BTreeMap<[i64; 3], usize> = BTreeMap::new();
    let mut bases = Vec::with_capacity(particles.len());
    for p in particles {
        grid.check_inside(p)?;
        let b = grid.stencil_base(p);
        for s in 0..27 {
            rows.insert([b[0] + (s / 9) as i64, b[1] + ((s / 3) % 3) as i64, b[2] + (s % 3) as i64], 0);
        }
        bases.push(b);
    }
    for (i, v) in rows.values_mut().enumerate() {
        *v = i;
    }
    let stencil_rows = bases
        .iter()
        .map(|b| {
            let mut r = [0usize; 27];
            for (s, slot) in r.iter_mut().enumerate() {
                *slot = rows[&[b[0] + (s / 9) as i64, b[1] + ((s / 3) % 3) as i64, b[2] + (s % 3) as i64]];
            }
            r
        })
        .collect();
    Ok(ActiveNodes {
        nodes: rows.into_keys().collect(),
        stencil: G2pStencil { delta: grid.delta, base: bases, rows: stencil_rows },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> Grid {
        Grid::new(20, 0.02).unwrap()
    }

    #[test]
    fn bspline_values() {
        assert_eq!(bspline_weight_1d(0.0), 0.75);
        assert_eq!(bspline_weight_1d(1.0), 0.125);
        assert_eq!(bspline_weight_1d(-1.0), 0.125);
        assert_eq!(bspline_weight_1d(1.6), 0.0);
        assert_eq!(bspline_weight_1d(0.5), 0.5);
    }

    #[test]
    fn normalize_cases() {
        let g = Grid::new(50, 0.02).unwrap();
        let centered = vec![g.center() - Vec3::repeat(0.1), g.center() + Vec3::repeat(0.1)];
        let (_, _, off) = normalize_to_grid(&centered, &[], &g).unwrap();
        assert_eq!(off, Vec3::zeros());
        let shifted: Vec<Vec3> = centered.iter().map(|p| p + Vec3::new(1.37, 0.0, 0.0)).collect();
        let (pts, eef, off) = normalize_to_grid(&shifted, &[Vec3::new(1.37, 0.0, 0.0)], &g).unwrap();
        assert!((off.x + 1.37).abs() < 1e-12);
        for (a, b) in pts.iter().zip(&centered) {
            assert!((a - b).amax() < 1e-12);
        }
        assert!(eef[0].x.abs() < 1e-12);
        let cloth = vec![Vec3::zeros(), Vec3::new(1.2, 0.0, 0.0)];
        assert!(matches!(normalize_to_grid(&cloth, &[], &g), Err(Error::Capacity(_))));
    }

    #[test]
    fn g2p_constant_and_single_node() {
        let g = grid();
        let c = Vec3::new(0.3, -0.2, 0.1);
        let field = GridField::constant(g, c);
        let ps = vec![Vec3::new(0.1, 0.17, 0.2), Vec3::new(0.213, 0.2, 0.1)];
        for v in g2p(&field, &ps).unwrap() {
            assert!((v - c).amax() < 1e-14);
        }
        let node = [8, 9, 10];
        let mut one = GridField::zeros(g);
        one.velocities[g.index(node)] = Vec3::new(1.0, 0.0, 0.0);
        let v = g2p(&one, &[g.node_position(node)]).unwrap()[0];
        assert!((v.x - 0.421875).abs() < 1e-15 && v.y == 0.0 && v.z == 0.0);
        assert_eq!(g2p(&GridField::zeros(g), &ps).unwrap(), vec![Vec3::zeros(); 2]);
    }

    #[test]
    fn g2p_rejects_outside() {
        let g = grid();
        assert!(matches!(g2p(&GridField::zeros(g), &[Vec3::new(0.005, 0.2, 0.2)]), Err(Error::Capacity(_))));
        assert!(matches!(g2p(&GridField::zeros(g), &[Vec3::new(0.2, 0.2, 0.375)]), Err(Error::Capacity(_))));
    }

    #[test]
    fn partition_of_unity_many_particles() {
        let g = Grid::new(50, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            let p = Vec3::from_fn(|_, _| rng.random_range(0.03..0.94));
            assert!((weight_sum(&g, &p) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grasp_cases() {
        let g = grid();
        let center = g.node_position([10, 10, 10]);
        let mut f = GridField::constant(g, Vec3::new(9.0, 9.0, 9.0));
        let spec = GraspSpec { center, angular: Vec3::zeros(), linear: Vec3::new(0.0, 0.0, 0.1), radius: 0.05, active: true };
        gve_grasp(&mut f, &spec);
        assert_eq!(f.velocities[g.index([10, 10, 10])], Vec3::new(0.0, 0.0, 0.1));
        assert_eq!(f.velocities[g.index([12, 10, 10])], Vec3::new(0.0, 0.0, 0.1));
        // a + delta away: untouched
        assert_eq!(f.velocities[g.index([13, 11, 10])], Vec3::new(9.0, 9.0, 9.0));
        assert_eq!(f.velocities[g.index([10, 10, 14])], Vec3::new(9.0, 9.0, 9.0));

        let mut r = GridField::zeros(g);
        let spin = GraspSpec { center, angular: Vec3::new(0.0, 0.0, 1.0), linear: Vec3::zeros(), radius: 0.05, active: true };
        gve_grasp(&mut r, &spin);
        let v = r.velocities[g.index([11, 10, 10])];
        assert!((v - Vec3::new(0.0, 0.02, 0.0)).amax() < 1e-15);

        let once = f.clone();
        gve_grasp(&mut f, &spec);
        assert_eq!(f, once);
    }

    #[test]
    fn ground_cases() {
        let g = grid();
        let mut f = GridField::zeros(g);
        let contact = g.index([5, 5, 1]);
        let above = g.index([5, 5, 8]);
        let separating = g.index([6, 5, 0]);
        f.velocities[contact] = Vec3::new(0.1, 0.0, -0.2);
        f.velocities[above] = Vec3::new(0.1, 0.0, -0.2);
        f.velocities[separating] = Vec3::new(0.0, 0.0, 0.3);
        gve_ground(&mut f, 0.0, 0.5);
        assert!(f.velocities[contact].amax() < 1e-9 && f.velocities[contact].z == 0.0);
        assert_eq!(f.velocities[above], Vec3::new(0.1, 0.0, -0.2));
        assert_eq!(f.velocities[separating], Vec3::new(0.0, 0.0, 0.3));

        let mut slide = GridField::zeros(g);
        slide.velocities[contact] = Vec3::new(0.3, 0.4, -0.1);
        gve_ground(&mut slide, 0.0, 0.5);
        let v = slide.velocities[contact];
        let f_expect = 1.0 - 0.5 * 0.1 / (0.5 + 1e-10);
        assert!((v - Vec3::new(0.3 * f_expect, 0.4 * f_expect, 0.0)).amax() < 1e-15);
        let once = slide.clone();
        gve_ground(&mut slide, 0.0, 0.5);
        assert_eq!(slide, once);
    }

    #[test]
    fn active_nodes_reproduce_dense_transfer() {
        let g = grid();
        let field = GridField::from_fn(g, |x| Vec3::new(x.x.sin(), x.y * x.z, 1.0 - x.x));
        let ps = vec![Vec3::new(0.1, 0.17, 0.2), Vec3::new(0.213, 0.2, 0.1), Vec3::new(0.101, 0.17, 0.21)];
        let act = active_nodes(&g, &ps).unwrap();
        let dense = g2p(&field, &ps).unwrap();
        for (p, (st_rows, want)) in ps.iter().zip(act.stencil.rows.iter().zip(&dense)) {
            let b = g.stencil_base(p);
            let (w, _) = stencil_weights(p.as_slice(), &b, g.delta);
            let mut v = Vec3::zeros();
            for (s, &row) in st_rows.iter().enumerate() {
                v += field.velocities[g.index(act.nodes[row])] * w[s];
            }
            assert!((v - want).amax() < 1e-15);
        }
        assert!(act.nodes.windows(2).all(|w| w[0] < w[1]));
    }

    proptest! {
        #[test]
        fn g2p_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..1000) {
            let g = grid();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fa = GridField::from_fn(g, |x| Vec3::new(x.x * 3.0, x.y.cos(), x.z));
            let fb = GridField::from_fn(g, |x| Vec3::new(1.0, x.x * x.y, -x.z));
            let mix = GridField { velocities: fa.velocities.iter().zip(&fb.velocities).map(|(u, v)| u * a + v * b).collect(), ..fa.clone() };
            let ps: Vec<Vec3> = (0..5).map(|_| Vec3::from_fn(|_, _| rng.random_range(0.04..0.32))).collect();
            let (va, vb, vm) = (g2p(&fa, &ps).unwrap(), g2p(&fb, &ps).unwrap(), g2p(&mix, &ps).unwrap());
            for i in 0..ps.len() {
                prop_assert!((vm[i] - (va[i] * a + vb[i] * b)).amax() < 1e-12);
            }
        }

        #[test]
        fn ground_leaves_no_inward_velocity(vs in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 20)) {
            let g = Grid::new(4, 0.1).unwrap();
            let mut f = GridField::zeros(g);
            for (i, (x, y, z)) in vs.iter().enumerate() {
                f.velocities[i] = Vec3::new(*x, *y, *z);
            }
            gve_ground(&mut f, 0.05, 0.5);
            for (i, v) in f.velocities.iter().enumerate() {
                if g.node_position(g.node_at(i)).z <= 0.15 {
                    prop_assert!(v.z >= 0.0);
                }
            }
        }
    }
}
