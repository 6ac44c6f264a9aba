mod common;

use advnas_core::mgda::{combine, combine_with, compute_gamma, descent_margins, dot, mgda_step, norm_sq, GradientPair};
use advnas_core::space::ArchParams;
use common::rng;
use proptest::prelude::*;
use rand::Rng;

fn pair(a: &[f64], b: &[f64]) -> GradientPair {
    GradientPair::new(a.to_vec(), b.to_vec()).unwrap()
}

fn objective(p: &GradientPair, g: f64) -> f64 {
    p.theta()
        .iter()
        .zip(p.theta_bar())
        .map(|(t, tb)| (g * t + (1.0 - g) * tb).powi(2))
        .sum()
}

fn grid_min(p: &GradientPair) -> (f64, f64) {
    (0..=10_000)
        .map(|i| i as f64 * 1e-4)
        .map(|g| (g, objective(p, g)))
        .fold((0.0, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best })
}

#[test]
fn worked_examples() {
    assert_eq!(compute_gamma(&pair(&[1.0, 0.0], &[0.0, 1.0])), 0.5);
    assert_eq!(compute_gamma(&pair(&[2.0, 0.0], &[2.0, 0.0])), 0.5);
    assert_eq!(compute_gamma(&pair(&[0.0, 0.0], &[0.0, 0.0])), 0.5);
    assert_eq!(compute_gamma(&pair(&[1.0, 0.0], &[-1.0, 0.0])), 0.5);
    assert_eq!(compute_gamma(&pair(&[1.0, 0.0], &[3.0, 0.0])), 1.0);
    assert_eq!(compute_gamma(&pair(&[3.0, 0.0], &[1.0, 0.0])), 0.0);
    let c = combine(&pair(&[1.0, 0.0], &[0.0, 1.0]));
    assert_eq!(c.direction, [0.5, 0.5]);
    let c = combine(&pair(&[1.0, 0.0], &[-1.0, 0.0]));
    assert_eq!(c.direction, [0.0, 0.0]);
}

#[test]
fn length_mismatch_and_nan_are_errors() {
    assert!(GradientPair::new(vec![1.0], vec![1.0, 2.0]).is_err());
    assert!(GradientPair::new(vec![f64::NAN], vec![1.0]).is_err());
}

#[test]
fn normalization_balances_scales() {
    let p = pair(&[1000.0, 0.0], &[0.0, 1.0]);
    assert!(compute_gamma(&p) < 1e-5);
    let c = combine_with(&p, true);
    assert!((c.gamma - 0.5).abs() < 1e-12);
    let n = p.normalized();
    assert!((norm_sq(n.theta()) - 1.0).abs() < 1e-12);
}

#[test]
fn gamma_is_scale_invariant_when_both_scale() {
    let mut r = rng(1);
    for _ in 0..200 {
        let a: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
        let s = r.random_range(0.01..100.0);
        let g1 = compute_gamma(&pair(&a, &b));
        let scaled = |v: &[f64]| v.iter().map(|x| x * s).collect::<Vec<_>>();
        let g2 = compute_gamma(&pair(&scaled(&a), &scaled(&b)));
        assert!((g1 - g2).abs() < 1e-9);
    }
}

#[test]
fn step_moves_alpha_against_the_direction() {
    let mut r = rng(2);
    let alpha = ArchParams::random(2, &mut r);
    let n = alpha.len();
    let p = pair(&vec![1.0; n], &vec![1.0; n]);
    let next = mgda_step(&alpha, &p, 0.1).unwrap();
    for (a, b) in alpha.flat().iter().zip(next.flat()) {
        assert!((a - 0.1 - b).abs() < 1e-15);
    }
    assert!(mgda_step(&alpha, &pair(&[1.0], &[1.0]), 0.1).is_err());
}

#[test]
fn quadratic_pair_converges_to_the_pareto_segment() {
    let (a, b) = ([1.0, 0.0], [0.0, 1.0]);
    let mut x = [3.0, -2.0];
    for _ in 0..2000 {
        let ga: Vec<f64> = x.iter().zip(&a).map(|(xi, ai)| 2.0 * (xi - ai)).collect();
        let gb: Vec<f64> = x.iter().zip(&b).map(|(xi, bi)| 2.0 * (xi - bi)).collect();
        let d = combine(&pair(&ga, &gb)).direction;
        x[0] -= 0.05 * d[0];
        x[1] -= 0.05 * d[1];
    }
    assert!((x[0] + x[1] - 1.0).abs() < 1e-3, "{x:?}");
    assert!(x.iter().all(|v| (-1e-9..=1.0 + 1e-9).contains(v)), "{x:?}");
}

fn random_pair(r: &mut impl Rng, kind: usize) -> GradientPair {
    let n = r.random_range(2..=64);
    let a: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = match kind {
        0 => (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
        1 => {
            let s = r.random_range(-3.0..3.0);
            a.iter().map(|x| s * x).collect()
        }
        2 => a.iter().map(|x| x + r.random_range(-1e-7..1e-7)).collect(),
        _ => a.iter().map(|x| -x).collect(),
    };
    pair(&a, &b)
}

#[test]
fn matches_grid_search_and_certifies_descent() {
    let mut r = rng(3);
    for i in 0..400 {
        let p = random_pair(&mut r, i % 4);
        let g = compute_gamma(&p);
        let (gg, fg) = grid_min(&p);
        assert!((g - gg).abs() <= 1e-3 || objective(&p, g) <= fg + 1e-9, "case {i}: {g} vs {gg}");
        let d = combine(&p).direction;
        let (m1, m2) = descent_margins(&p, &d);
        assert!(m1 >= -1e-9 && m2 >= -1e-9, "case {i}: {m1} {m2}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn gamma_in_unit_interval_and_direction_not_longer(
        a in prop::collection::vec(-10.0f64..10.0, 1..32),
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let b: Vec<f64> = a.iter().map(|_| r.random_range(-10.0..10.0)).collect();
        let p = pair(&a, &b);
        let c = combine(&p);
        prop_assert!((0.0..=1.0).contains(&c.gamma));
        let n = norm_sq(&c.direction);
        prop_assert!(n <= norm_sq(&a).min(norm_sq(&b)) + 1e-9);
        prop_assert!(dot(&c.direction, &a) >= n - 1e-9);
        prop_assert!(dot(&c.direction, &b) >= n - 1e-9);
    }
}
