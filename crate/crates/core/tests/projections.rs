use proptest::prelude::*;

use privcloud::geometry::{project_box, project_dual, DualSet};
use privcloud::problem::BoxSet;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Brute-force oracle: the dual set is {mu >= 0, sum mu <= R}; its projection
/// is either the clipped point or `max(v - t, 0)` with `t` found by bisection.
fn dual_oracle(v: &[f64], r: f64) -> Vec<f64> {
    let clip: Vec<f64> = v.iter().map(|x| x.max(0.0)).collect();
    if clip.iter().sum::<f64>() <= r {
        return clip;
    }
    let (mut lo, mut hi) = (0.0, v.iter().cloned().fold(0.0, f64::max));
    for _ in 0..200 {
        let t = 0.5 * (lo + hi);
        let s: f64 = v.iter().map(|x| (x - t).max(0.0)).sum();
        if s > r {
            lo = t;
        } else {
            hi = t;
        }
    }
    v.iter().map(|x| (x - hi).max(0.0)).collect()
}

fn vec_strategy(len: usize, scale: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-scale..scale, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn box_projection_is_idempotent_and_nonexpansive(
        u in vec_strategy(6, 30.0),
        v in vec_strategy(6, 30.0),
        y in vec_strategy(6, 10.0),
    ) {
        let bx = BoxSet::cube(6, -10.0, 10.0).unwrap();
        let (pu, pv) = (project_box(&u, &bx), project_box(&v, &bx));
        prop_assert!(bx.contains(&pu));
        prop_assert_eq!(project_box(&pu, &bx), pu.clone());
        prop_assert!(dist(&pu, &pv) <= dist(&u, &v) + 1e-12);
        // y lies in the box: (u - Pu)^T (y - Pu) <= 0
        prop_assert!(dot(&sub(&u, &pu), &sub(&y, &pu)) <= 1e-9);
    }

    #[test]
    fn dual_projection_matches_oracle(
        v in vec_strategy(6, 80.0),
        r in 0.5f64..100.0,
    ) {
        let set = DualSet::new(6, r).unwrap();
        let p = project_dual(&v, &set);
        let o = dual_oracle(&v, r);
        prop_assert!(set.contains(&p, 1e-9));
        prop_assert!(dist(&p, &o) <= 1e-9 * (1.0 + r));
        prop_assert!(dist(&project_dual(&p, &set), &p) <= 1e-12 * (1.0 + r));
    }

    #[test]
    fn dual_projection_is_nonexpansive_and_variational(
        a in vec_strategy(6, 80.0),
        b in vec_strategy(6, 80.0),
        w in prop::collection::vec(0.0f64..1.0, 7),
        r in 0.5f64..100.0,
    ) {
        let set = DualSet::new(6, r).unwrap();
        let (pa, pb) = (project_dual(&a, &set), project_dual(&b, &set));
        prop_assert!(dist(&pa, &pb) <= dist(&a, &b) + 1e-9);
        // a point of the set: nonnegative weights scaled to total mass <= r
        let total: f64 = w.iter().sum();
        let y: Vec<f64> = w[..6].iter().map(|x| r * x / total.max(1e-12)).collect();
        prop_assert!(dot(&sub(&a, &pa), &sub(&y, &pa)) <= 1e-7 * (1.0 + r * r));
    }
}

#[test]
fn inside_points_are_fixed() {
    let set = DualSet::new(3, 5.0).unwrap();
    let mu = vec![1.0, 2.0, 1.5];
    assert_eq!(project_dual(&mu, &set), mu);
    let bx = BoxSet::cube(2, -1.0, 1.0).unwrap();
    assert_eq!(project_box(&[0.25, -0.75], &bx), vec![0.25, -0.75]);
}
