//! Distance engine against an independent brute-force transport optimum.

mod common;

use balance_core::measures::{prw_augmented, prw_direct, DiscreteMeasure};
use common::{oracle_prw, oracle_transport, random_measure, rng};
use rand::Rng;

#[test]
fn nw_corner_oracle_sanity() {
    // 2×2 with an obvious diagonal optimum
    let cost = |i: usize, j: usize| if i == j { 0.0 } else { 1.0 };
    let v = oracle_transport(&[1.0, 2.0], &[1.0, 2.0], &cost);
    assert!(v.abs() < 1e-15);
    // forced crossing: everything must traverse cost 1
    let v = oracle_transport(&[3.0], &[1.0, 2.0], &|_, _| 1.0);
    assert!((v - 3.0).abs() < 1e-12);
}

#[test]
fn distance_matches_oracle_on_random_pairs() {
    let mut rng = rng(0x0f2a);
    for case in 0..150 {
        let dim = rng.gen_range(1..=2);
        let (a1, a2) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let m1 = random_measure(&mut rng, dim, a1);
        let m2 = random_measure(&mut rng, dim, a2);
        let b = rng.gen_range(0.2..4.0);
        let want = oracle_prw(&m1, &m2, b);
        let direct = prw_direct(&m1, &m2, b).unwrap();
        assert!(
            (direct - want).abs() < 1e-8,
            "case {case}: direct {direct} vs oracle {want} (b = {b})"
        );
        let r = m1.total_mass().max(m2.total_mass()) + 0.7;
        let aug = prw_augmented(&m1, &m2, b, r).unwrap();
        assert!(
            (aug - want).abs() < 1e-8,
            "case {case}: augmented {aug} vs oracle {want} (b = {b})"
        );
    }
}

#[test]
fn distance_matches_oracle_with_shared_support() {
    // overlapping supports exercise the stay-in-place entries of the plan
    let mut rng = rng(99);
    for _ in 0..60 {
        let base: Vec<f64> = vec![rng.gen_range(-1.0..1.0)];
        let m1 = DiscreteMeasure::new(
            1,
            [(base.clone(), rng.gen_range(0.1..1.0)), (vec![base[0] + 1.0], rng.gen_range(0.1..1.0))],
        )
        .unwrap();
        let m2 = DiscreteMeasure::new(
            1,
            [(base.clone(), rng.gen_range(0.1..1.0)), (vec![base[0] - 2.0], rng.gen_range(0.1..1.0))],
        )
        .unwrap();
        let b = rng.gen_range(0.3..3.0);
        let want = oracle_prw(&m1, &m2, b);
        let got = prw_direct(&m1, &m2, b).unwrap();
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
    }
}

#[test]
fn empty_and_creation_only_cases() {
    let empty = DiscreteMeasure::empty(1);
    let m = DiscreteMeasure::dirac(vec![0.4], 1.3).unwrap();
    // all mass created/destroyed at price b
    assert!((prw_direct(&empty, &m, 2.0).unwrap() - 2.6).abs() < 1e-9);
    assert!((prw_direct(&m, &empty, 2.0).unwrap() - 2.6).abs() < 1e-9);
    assert_eq!(prw_direct(&empty, &empty, 2.0).unwrap(), 0.0);
}
