use std::f64::consts::PI;

use proptest::prelude::*;
use tlab_core::task_gen::{
    dudley_lower_bound, empirical_w1, far_apart_dudley, far_apart_kl, kl_between, kl_divergence, make_task_pair,
};
use tlab_core::theory::{linear_transferability, negative_transfer_region, ridge_transfer_ge, Extended};
use tlab_core::{DMatrix, DVector, FunctionInSpan};

fn points(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = tlab_core::rng::rng_from(seed);
    tlab_core::rng::gaussian_matrix(&mut rng, rows, cols)
}

/// Adaptive Simpson quadrature on `[a, b]`.
fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, tol, 40)
}

fn normal_pdf(z: f64, mean: f64, sd: f64) -> f64 {
    let u = (z - mean) / sd;
    (-0.5 * u * u).exp() / (sd * (2.0 * PI).sqrt())
}

/// `∫∫ p_f(x, y) log(p_f(x, y) / p_g(x, y)) dy dx` for `f(x) = a x`, `g(x) = b x`, `x ~ N(0, 1)`.
fn kl_by_quadrature(a: f64, b: f64, sigma: f64) -> f64 {
    let inner = |x: f64| {
        let integrand = |y: f64| {
            let p = normal_pdf(y, a * x, sigma);
            let log_ratio = ((y - b * x).powi(2) - (y - a * x).powi(2)) / (2.0 * sigma * sigma);
            p * log_ratio
        };
        let half = 12.0 * sigma;
        simpson(&integrand, a * x - half, a * x + half, 1e-12)
    };
    simpson(&|x: f64| normal_pdf(x, 0.0, 1.0) * inner(x), -12.0, 12.0, 1e-11)
}

#[test]
fn one_dimensional_kl_matches_quadrature() {
    for &(a, b, sigma) in &[(1.0, 0.0, 1.0), (0.7, -0.4, 0.5), (2.0, 1.5, 0.3), (-1.0, 1.0, 2.0)] {
        let closed = kl_between(
            &FunctionInSpan::new(DVector::from_element(1, a)),
            &FunctionInSpan::new(DVector::from_element(1, b)),
            sigma,
        );
        let quad = kl_by_quadrature(a, b, sigma);
        assert!((closed - quad).abs() <= 1e-6 * closed, "{closed} vs {quad}");
    }
}

#[test]
fn w1_of_shifted_gaussians_is_the_shift() {
    let m = 600;
    for &shift in &[0.5, 2.0] {
        let a = points(m, 1, 1);
        let b = points(m, 1, 2).add_scalar(shift);
        let w = empirical_w1(&a, &b).unwrap();
        assert!((w - shift).abs() <= 5.0 / (m as f64).sqrt(), "{w} vs {shift}");
    }
}

#[test]
fn sign_scan_agrees_with_negative_region() {
    let mut rng = tlab_core::rng::rng_from(2024);
    use rand::Rng;
    for _ in 0..50 {
        let theta: f64 = rng.random_range(0.0..PI / 2.0);
        let sigma: f64 = rng.random_range(0.0..1.2);
        let region = negative_transfer_region(theta, sigma);
        let mut k = 1;
        while k <= 3000 {
            let gamma = k as f64 * 1e-3;
            k += 1;
            if gamma == 1.0 {
                continue;
            }
            let t = linear_transferability(gamma, theta, sigma).finite().unwrap();
            if t.abs() < 1e-9 {
                continue;
            }
            let inside = region.iter().any(|iv| iv.contains(gamma));
            assert_eq!(t < 0.0, inside, "theta {theta} sigma {sigma} gamma {gamma} T {t} region {region:?}");
        }
    }
}

#[test]
fn singular_only_at_the_pole() {
    assert!(matches!(linear_transferability(1.0, 0.4, 0.2), Extended::Infinite { positive: true }));
    assert!(linear_transferability(1.0 - 1e-9, 0.4, 0.2).finite().is_some());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn task_pairs_are_unit_and_at_angle(d in 2usize..60, theta in 0.0..=PI, seed in any::<u64>()) {
        let p = make_task_pair(d, theta, seed).unwrap();
        prop_assert!((p.beta_src.norm() - 1.0).abs() <= 1e-12);
        prop_assert!((p.beta_tgt.norm() - 1.0).abs() <= 1e-12);
        prop_assert!((p.beta_src.dot(&p.beta_tgt) - theta.cos()).abs() <= 1e-12);
        prop_assert_eq!(p.clone(), make_task_pair(d, theta, seed).unwrap());
    }

    #[test]
    fn kl_is_symmetric_and_monotone(d in 2usize..20, t1 in 0.0..PI, t2 in 0.0..PI, sigma in 0.05..3.0f64, seed in any::<u64>()) {
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        let a = make_task_pair(d, lo, seed).unwrap();
        let b = make_task_pair(d, hi, seed).unwrap();
        let ka = kl_divergence(&a, sigma).unwrap();
        let kb = kl_divergence(&b, sigma).unwrap();
        prop_assert!(ka <= kb + 1e-12);
        prop_assert!((ka - (1.0 - lo.cos()) / (sigma * sigma)).abs() <= 1e-10 * (1.0 + ka));
        let fs = FunctionInSpan::new(a.beta_src.clone());
        let ft = FunctionInSpan::new(a.beta_tgt.clone());
        prop_assert!((kl_between(&fs, &ft, sigma) - kl_between(&ft, &fs, sigma)).abs() <= 1e-12);
        prop_assert_eq!(ka == 0.0, lo == 0.0);
    }

    #[test]
    fn w1_is_a_permutation_invariant_metric(m in 1usize..8, dim in 1usize..4, seeds in any::<(u64, u64, u64)>(), shuffle in any::<u64>()) {
        let a = points(m, dim, seeds.0);
        let b = points(m, dim, seeds.1);
        let c = points(m, dim, seeds.2);
        let ab = empirical_w1(&a, &b).unwrap();
        let bc = empirical_w1(&b, &c).unwrap();
        let ac = empirical_w1(&a, &c).unwrap();
        prop_assert!(ac <= ab + bc + 1e-12);
        prop_assert!((ab - empirical_w1(&b, &a).unwrap()).abs() <= 1e-12);

        let mut order: Vec<usize> = (0..m).collect();
        let mut s = shuffle;
        for i in (1..m).rev() {
            s = tlab_core::rng::mix64(s);
            order.swap(i, (s % (i as u64 + 1)) as usize);
        }
        let permuted = a.select_rows(order.iter());
        prop_assert!((empirical_w1(&permuted, &b).unwrap() - ab).abs() <= 1e-12);
    }

    #[test]
    fn far_apart_constructions_hold(
        coeffs in proptest::collection::vec(-3.0..3.0f64, 1..6),
        delta in 1e-3..50.0f64,
        sigma in 0.05..3.0f64,
    ) {
        let f = FunctionInSpan::new(DVector::from_vec(coeffs.clone()));
        prop_assume!(f.norm_sq() > 1e-6);
        let g = far_apart_dudley(&f, delta, sigma).unwrap();
        prop_assert!(dudley_lower_bound(&f, &g, sigma) >= delta * (1.0 - 1e-12));
        let h = far_apart_kl(&f, delta, sigma).unwrap();
        prop_assert!(kl_between(&f, &h, sigma) >= delta * (1.0 - 1e-12));
        for (i, &c) in coeffs.iter().enumerate() {
            // same feature support as f
            if c == 0.0 {
                prop_assert_eq!(g.coeffs()[i], 0.0);
                prop_assert_eq!(h.coeffs()[i], 0.0);
            }
        }
    }

    #[test]
    fn ridge_error_is_monotone_in_lambda(theta in 0.0..PI / 2.0, l1 in 0.0..20.0f64, gap in 1e-3..5.0f64) {
        let a = ridge_transfer_ge(theta, l1);
        let b = ridge_transfer_ge(theta, l1 + gap);
        prop_assert!(b >= a - 1e-15);
        if theta < PI / 2.0 - 1e-3 {
            prop_assert!(b > a);
        }
    }

    #[test]
    fn transferability_is_continuous_off_the_pole(gamma in 0.01..2.9f64, theta in 0.0..PI / 2.0, sigma in 0.0..1.0f64) {
        prop_assume!((gamma - 1.0).abs() > 0.05);
        let h = 1e-7;
        let t = linear_transferability(gamma, theta, sigma).finite().unwrap();
        let tg = linear_transferability(gamma + h, theta, sigma).finite().unwrap();
        let tt = linear_transferability(gamma, theta + h, sigma).finite().unwrap();
        // finite slopes bound the jump over a step of h
        prop_assert!((tg - t).abs() <= 1e-7 * (1.0 + 1.0 / (gamma - 1.0).powi(2)) * 10.0);
        prop_assert!((tt - t).abs() <= 1e-6);
    }
}
