use nalgebra::{Rotation3, Vector3};
use pgnd::metrics::{chamfer, emd, mde, one_sided};
use pgnd::Vec3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn brute_emd(a: &[Vec3], b: &[Vec3]) -> f64 {
    permutations(a.len())
        .iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| (a[i] - b[j]).norm()).sum::<f64>() / a.len() as f64)
        .fold(f64::INFINITY, f64::min)
}

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    (0..n).map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect()
}

#[test]
fn hungarian_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..500 {
        let n = 1 + trial % 6;
        let a = cloud(&mut rng, n);
        let b = cloud(&mut rng, n);
        let (fast, slow) = (emd(&a, &b).unwrap(), brute_emd(&a, &b));
        assert!((fast - slow).abs() < 1e-12, "n={n}: {fast} vs {slow}");
    }
}

#[test]
fn large_clouds_use_the_hash_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = cloud(&mut rng, 400);
    let b = cloud(&mut rng, 300);
    let brute = |x: &[Vec3], y: &[Vec3]| {
        x.iter().map(|p| y.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min)).sum::<f64>() / x.len() as f64
    };
    let expect = 0.5 * (brute(&a, &b) + brute(&b, &a));
    assert!((chamfer(&a, &b).unwrap() - expect).abs() < 1e-12);
    let big = cloud(&mut rng, 513);
    assert!(emd(&big, &big).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn rigid_invariance_and_orderings(seed in 0u64..10_000, n in 2usize..40, ax in -1.0f64..1.0, ay in -1.0f64..1.0, angle in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = cloud(&mut rng, n);
        let b = cloud(&mut rng, n);
        let axis = Vector3::new(ax, ay, 0.5).normalize();
        let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        let t = Vec3::new(0.3, -2.0, 1.1);
        let move_all = |c: &[Vec3]| c.iter().map(|p| r * p + t).collect::<Vec<_>>();
        let (ra, rb) = (move_all(&a), move_all(&b));
        prop_assert!((mde(&a, &b).unwrap() - mde(&ra, &rb).unwrap()).abs() < 1e-9);
        prop_assert!((chamfer(&a, &b).unwrap() - chamfer(&ra, &rb).unwrap()).abs() < 1e-9);
        prop_assert!((emd(&a, &b).unwrap() - emd(&ra, &rb).unwrap()).abs() < 1e-9);
        prop_assert_eq!(chamfer(&a, &b).unwrap(), chamfer(&b, &a).unwrap());
        prop_assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        let e = emd(&a, &b).unwrap();
        prop_assert!(e <= mde(&a, &b).unwrap() + 1e-12);
        prop_assert!(e + 1e-12 >= one_sided(&a, &b).unwrap());
    }
}
