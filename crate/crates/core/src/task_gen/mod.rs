//! Source/target task pairs, finite datasets, and distribution-level
//! discrepancies between the joint laws `p(x, y)` of two linear tasks.

mod assignment;

pub use assignment::min_cost_assignment;

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use crate::error::{invalid, Result, TlabError};
use crate::rng::{gaussian_matrix, gaussian_vector, rng_from, sphere_vector};

/// Largest sample count accepted by [`empirical_w1`].
pub const MAX_W1_SAMPLES: usize = 2000;

/// Unit-norm source and target coefficient vectors at a fixed angle.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPair {
    pub d: usize,
    pub beta_src: DVector<f64>,
    pub beta_tgt: DVector<f64>,
    pub theta: f64,
}

/// A finite sample `y = Xβ + ε` with `ε ~ N(0, σ²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub sigma: f64,
    pub seed: u64,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }
}

/// A function expanded in an orthonormal basis of some feature subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionInSpan {
    coeffs: DVector<f64>,
    norm_sq: f64,
}

impl FunctionInSpan {
    pub fn new(coeffs: DVector<f64>) -> Self {
        let norm_sq = coeffs.norm_squared();
        Self { coeffs, norm_sq }
    }

    pub fn coeffs(&self) -> &DVector<f64> {
        &self.coeffs
    }

    /// `‖f‖² = Σ coeffsᵢ²` (orthonormal basis).
    pub fn norm_sq(&self) -> f64 {
        self.norm_sq
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(&self.coeffs * factor)
    }
}

/// Draws `β_s` uniformly on the sphere and sets `β_t = cosθ β_s + sinθ ν`
/// with `ν ⟂ β_s` a unit vector drawn from `seed + 1`.
pub fn make_task_pair(d: usize, theta: f64, seed: u64) -> Result<TaskPair> {
    if d < 2 {
        return Err(invalid(format!("task pair needs d >= 2, got {d}")));
    }
    if !(0.0..=PI).contains(&theta) {
        return Err(invalid(format!("theta must lie in [0, pi], got {theta}")));
    }
    let beta_src = sphere_vector(&mut rng_from(seed), d);

    let mut rng = rng_from(seed.wrapping_add(1));
    let nu = loop {
        let mut v = gaussian_vector(&mut rng, d);
        let proj = v.dot(&beta_src);
        v.axpy(-proj, &beta_src, 1.0);
        // second pass keeps orthogonality at the 1e-16 level
        let proj = v.dot(&beta_src);
        v.axpy(-proj, &beta_src, 1.0);
        let norm = v.norm();
        if norm > 1e-8 {
            break v / norm;
        }
    };

    let beta_tgt = if theta == 0.0 {
        beta_src.clone()
    } else {
        let mut b = &beta_src * theta.cos() + &nu * theta.sin();
        b /= b.norm();
        b
    };
    Ok(TaskPair {
        d,
        beta_src,
        beta_tgt,
        theta,
    })
}

/// Samples `n` rows of standard normal inputs and noisy linear labels.
pub fn sample_dataset(beta: &DVector<f64>, n: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(invalid("dataset needs n >= 1"));
    }
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(invalid(format!("noise level must be finite and >= 0, got {sigma}")));
    }
    let mut rng = rng_from(seed);
    let x = gaussian_matrix(&mut rng, n, beta.len());
    let mut y = &x * beta;
    if sigma > 0.0 {
        let noise = gaussian_vector(&mut rng, n);
        y.axpy(sigma, &noise, 1.0);
    }
    Ok(Dataset { x, y, sigma, seed })
}

/// `D_KL(p_s ‖ p_t) = ‖β_s − β_t‖² / (2σ²)` for Gaussian label noise.
pub fn kl_divergence(pair: &TaskPair, sigma: f64) -> Result<f64> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(invalid(format!("KL divergence needs sigma > 0, got {sigma}")));
    }
    Ok((&pair.beta_src - &pair.beta_tgt).norm_squared() / (2.0 * sigma * sigma))
}

/// Joint samples `[x | y]` stacked as rows, for distances on `(x, y)` space.
pub fn joint_samples(beta: &DVector<f64>, m: usize, sigma: f64, seed: u64) -> Result<DMatrix<f64>> {
    let data = sample_dataset(beta, m, sigma, seed)?;
    let d = data.d();
    let mut joint = DMatrix::zeros(m, d + 1);
    joint.columns_mut(0, d).copy_from(&data.x);
    joint.set_column(d, &data.y);
    Ok(joint)
}

/// Exact W1 distance between two uniform empirical measures of equal size,
/// rows as points, Euclidean ground cost.
///
/// With equal uniform weights the transport polytope's vertices are
/// permutation matrices, so the LP optimum is an optimal assignment.
pub fn empirical_w1(samples_a: &DMatrix<f64>, samples_b: &DMatrix<f64>) -> Result<f64> {
    let m = samples_a.nrows();
    if m == 0 || samples_b.nrows() == 0 {
        return Err(invalid("W1 needs non-empty sample sets"));
    }
    if samples_b.nrows() != m {
        return Err(invalid(format!(
            "W1 needs equal cardinality, got {m} and {}",
            samples_b.nrows()
        )));
    }
    if samples_a.ncols() != samples_b.ncols() {
        return Err(TlabError::ShapeMismatch(format!(
            "sample dimension {} vs {}",
            samples_a.ncols(),
            samples_b.ncols()
        )));
    }
    if m > MAX_W1_SAMPLES {
        return Err(invalid(format!("W1 limited to {MAX_W1_SAMPLES} samples, got {m}")));
    }
    let cost: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let a = samples_a.row(i);
            (0..m).map(|j| (a - samples_b.row(j)).norm()).collect()
        })
        .collect();
    let (total, _) = min_cost_assignment(&cost);
    Ok(total / m as f64)
}

/// Dudley-metric "far apart" partner: `g = √(|2δe^{σ²/2} − a| / a) · f`
/// with `a = ‖f‖²`. Panics if the resulting lower bound misses `δ`.
pub fn far_apart_dudley(f: &FunctionInSpan, delta: f64, sigma: f64) -> Result<FunctionInSpan> {
    let a = f.norm_sq();
    if a <= 0.0 {
        return Err(invalid("far-apart construction needs a nonzero f"));
    }
    if delta <= 0.0 || sigma < 0.0 {
        return Err(invalid("far-apart construction needs delta > 0 and sigma >= 0"));
    }
    let target = 2.0 * delta * (sigma * sigma / 2.0).exp();
    let g = f.scaled(((target - a).abs() / a).sqrt());
    let bound = dudley_lower_bound(f, &g, sigma);
    assert!(
        bound >= delta * (1.0 - 1e-12),
        "Dudley lower bound {bound} below requested {delta}"
    );
    Ok(g)
}

/// Lower bound `(e^{−σ²/2} / 2)(‖f‖² + ‖g‖²)` on the Dudley metric between `p_f` and `p_g`.
pub fn dudley_lower_bound(f: &FunctionInSpan, g: &FunctionInSpan, sigma: f64) -> f64 {
    0.5 * (-sigma * sigma / 2.0).exp() * (f.norm_sq() + g.norm_sq())
}

/// `D_KL(p_f ‖ p_g) = ‖f − g‖² / (2σ²)` for functions in a common orthonormal span.
pub fn kl_between(f: &FunctionInSpan, g: &FunctionInSpan, sigma: f64) -> f64 {
    (f.coeffs() - g.coeffs()).norm_squared() / (2.0 * sigma * sigma)
}

/// KL "far apart" partner `g = −αf` with `α = σ√(2δ)/‖f‖`, which gives
/// `D_KL = (1+α)²‖f‖²/(2σ²) ≥ α²‖f‖²/(2σ²) = δ`. Panics if the bound fails.
pub fn far_apart_kl(f: &FunctionInSpan, delta: f64, sigma: f64) -> Result<FunctionInSpan> {
    let norm = f.norm_sq().sqrt();
    if norm <= 0.0 {
        return Err(invalid("far-apart construction needs a nonzero f"));
    }
    if sigma <= 0.0 {
        return Err(invalid("KL construction needs sigma > 0"));
    }
    if delta <= 0.0 {
        return Err(invalid("far-apart construction needs delta > 0"));
    }
    let alpha = (sigma * delta.sqrt() / norm).max(sigma * (2.0 * delta).sqrt() / norm);
    let g = f.scaled(-alpha);
    let kl = kl_between(f, &g, sigma);
    assert!(kl >= delta * (1.0 - 1e-12), "KL {kl} below requested {delta}");
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn task_pair_identity_and_orthogonal_cases() {
        let p = make_task_pair(5, 0.0, 7).unwrap();
        assert_eq!(p.beta_src, p.beta_tgt);
        let p = make_task_pair(5, PI / 2.0, 7).unwrap();
        assert!(p.beta_src.dot(&p.beta_tgt).abs() < 1e-12);
        let p = make_task_pair(500, PI / 3.0, 1).unwrap();
        assert!((p.beta_src.dot(&p.beta_tgt) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn task_pair_rejects_bad_input() {
        assert!(make_task_pair(1, 0.3, 0).is_err());
        assert!(make_task_pair(3, -0.1, 0).is_err());
        assert!(make_task_pair(3, 3.2, 0).is_err());
    }

    #[test]
    fn noiseless_dataset_is_exactly_linear() {
        let beta = DVector::from_fn(4, |i, _| i as f64 - 1.5);
        let data = sample_dataset(&beta, 10, 0.0, 3).unwrap();
        assert_eq!(data.y, &data.x * &beta);
        assert!(sample_dataset(&beta, 0, 0.0, 3).is_err());
        assert!(sample_dataset(&beta, 3, -1.0, 3).is_err());
    }

    #[test]
    fn pure_noise_dataset_has_unit_variance() {
        let beta = DVector::zeros(3);
        let data = sample_dataset(&beta, 4000, 1.0, 9).unwrap();
        let n = data.n() as f64;
        let mean = data.y.sum() / n;
        let var = data.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // sd of the sample variance is about sqrt(2/n)
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n).sqrt());
    }

    #[test]
    fn noisy_label_variance_matches_signal_plus_noise() {
        let pair = make_task_pair(20, 0.0, 4).unwrap();
        let data = sample_dataset(&pair.beta_src, 10_000, 0.2, 5).unwrap();
        let n = data.n() as f64;
        let mean = data.y.sum() / n;
        let var = data.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((1.0..=1.08).contains(&var), "variance {var}");
    }

    #[test]
    fn input_rows_are_standard_normal() {
        let beta = DVector::zeros(10);
        let data = sample_dataset(&beta, 1000, 0.0, 21).unwrap();
        let nd = (data.n() * data.d()) as f64;
        let grand_mean = data.x.sum() / nd;
        assert!(grand_mean.abs() <= 4.0 / nd.sqrt());
        for j in 0..data.d() {
            let col = data.x.column(j);
            let mean = col.sum() / data.n() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / data.n() as f64;
            assert!((0.9..=1.1).contains(&var));
        }
    }

    #[test]
    fn kl_closed_form_values() {
        let p = make_task_pair(6, 0.0, 1).unwrap();
        assert_eq!(kl_divergence(&p, 1.0).unwrap(), 0.0);
        let p = make_task_pair(6, PI / 2.0, 1).unwrap();
        assert_relative_eq!(kl_divergence(&p, 1.0).unwrap(), 1.0, epsilon = 1e-12);
        let p = make_task_pair(6, PI, 1).unwrap();
        assert_relative_eq!(kl_divergence(&p, 0.5).unwrap(), 8.0, epsilon = 1e-12);
        assert!(kl_divergence(&p, 0.0).is_err());
    }

    #[test]
    fn w1_basic_properties() {
        let a = joint_samples(&DVector::from_vec(vec![1.0, 0.0]), 30, 0.1, 1).unwrap();
        assert_eq!(empirical_w1(&a, &a).unwrap(), 0.0);
        let b = joint_samples(&DVector::from_vec(vec![0.0, 1.0]), 30, 0.1, 2).unwrap();
        let w = empirical_w1(&a, &b).unwrap();
        let w_scaled = empirical_w1(&(&a * 3.0), &(&b * 3.0)).unwrap();
        assert_relative_eq!(w_scaled, 3.0 * w, max_relative = 1e-12);
        assert!(empirical_w1(&a, &b.rows(0, 10).into_owned()).is_err());
        assert!(empirical_w1(&a, &DMatrix::zeros(30, 2)).is_err());
        assert!(empirical_w1(&DMatrix::zeros(0, 3), &DMatrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn far_apart_dudley_examples() {
        let f = FunctionInSpan::new(DVector::from_vec(vec![1.0, 0.0]));
        let g = far_apart_dudley(&f, 1.0, 0.0).unwrap();
        assert_relative_eq!(g.coeffs()[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(dudley_lower_bound(&f, &g, 0.0), 1.0, epsilon = 1e-15);

        let g = far_apart_dudley(&f, 10.0, 0.0).unwrap();
        assert_relative_eq!(g.coeffs()[0], 19f64.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(dudley_lower_bound(&f, &g, 0.0), 10.0, epsilon = 1e-12);

        let f = FunctionInSpan::new(DVector::from_vec(vec![0.0, 2.0]));
        let g = far_apart_dudley(&f, 0.1, 0.0).unwrap();
        assert!(dudley_lower_bound(&f, &g, 0.0) >= 0.1);
        assert_eq!(g.coeffs()[0], 0.0);

        assert!(far_apart_dudley(&FunctionInSpan::new(DVector::zeros(2)), 1.0, 0.0).is_err());
    }

    #[test]
    fn far_apart_kl_examples() {
        let f = FunctionInSpan::new(DVector::from_vec(vec![1.0]));
        let g = far_apart_kl(&f, 1.0, 1.0).unwrap();
        let alpha = -g.coeffs()[0];
        assert!(alpha >= 2f64.sqrt() - 1e-15);
        let kl = kl_between(&f, &g, 1.0);
        assert!(kl >= (1.0 + 2f64.sqrt()).powi(2) / 2.0 - 1e-12);

        let g = far_apart_kl(&f, 1e-300, 1.0).unwrap();
        assert!(kl_between(&f, &g, 1.0) > 0.0);

        let f = FunctionInSpan::new(DVector::from_vec(vec![2.0, 0.0]));
        let g = far_apart_kl(&f, 4.0, 0.5).unwrap();
        assert!(kl_between(&f, &g, 0.5) >= 4.0);

        assert!(far_apart_kl(&f, 1.0, 0.0).is_err());
        assert!(far_apart_kl(&FunctionInSpan::new(DVector::zeros(2)), 1.0, 1.0).is_err());
    }

    #[test]
    fn function_norm_cache_matches_coefficients() {
        let f = FunctionInSpan::new(DVector::from_vec(vec![0.3, -1.2, 2.5]));
        assert!((f.norm_sq() - (0.09 + 1.44 + 6.25)).abs() < 1e-12);
    }
}
