//! Two-layer ReLU networks in the mean-field parameterization
//! `f(x) = (1/m) Σᵢ cᵢ σ(wᵢᵀx)` with hidden directions on the unit sphere,
//! trained against ReLU teachers under standard Gaussian inputs.
//!
//! Population quantities are exact. For `x ~ N(0, I)` and any `a, b`,
//! `E[σ(aᵀx)σ(bᵀx)] = ‖a‖‖b‖ k(u)` with `u` the cosine between `a` and `b`
//! and `k` the degree-one arc-cosine kernel. Working with this homogeneous
//! extension keeps the loss differentiable off the sphere, which the
//! gradient checks rely on.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, TlabError};
use crate::linalg::{mean_and_stderr, pinv_solve};
use crate::rng::{gaussian_matrix, gaussian_vector, mix64, rng_from, sphere_vector};
use crate::task_gen::Dataset;

/// Rows of `W` must have unit norm to this tolerance.
pub const SPHERE_TOL: f64 = 1e-10;
/// Output-layer value a fresh student starts from.
pub const OUTPUT_INIT: f64 = 1e-7;
/// Relative eigenvalue cutoff on the student Gram `K`, used both for the
/// projection split and for the linear-transfer refit.
///
/// A pretrained student has clusters of nearly identical neurons, so `K` has
/// a long tail of tiny eigenvalues. Least squares over those directions blows
/// up near `n ≈ m`. `1e-4` on eigenvalues is a `1e-2` cutoff on singular
/// values, the same as the deep linear feature truncation.
pub const DEFAULT_EIG_CUTOFF: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct ReluNet {
    w: DMatrix<f64>,
    c: DVector<f64>,
}

impl ReluNet {
    /// Validates shapes and the unit-norm rows of `w`.
    pub fn new(w: DMatrix<f64>, c: DVector<f64>) -> Result<Self> {
        if w.nrows() == 0 {
            return Err(invalid("a ReLU net needs at least one neuron"));
        }
        if w.nrows() != c.len() {
            return Err(TlabError::ShapeMismatch(format!(
                "{} hidden directions but {} output coefficients",
                w.nrows(),
                c.len()
            )));
        }
        for (i, row) in w.row_iter().enumerate() {
            let dev = (row.norm() - 1.0).abs();
            if !(dev <= SPHERE_TOL) {
                return Err(invalid(format!("row {i} of W is off the unit sphere by {dev:e}")));
            }
        }
        Ok(Self { w, c })
    }

    /// Skips the sphere check. Used for gradient checks off the sphere.
    pub fn new_unchecked(w: DMatrix<f64>, c: DVector<f64>) -> Self {
        assert_eq!(w.nrows(), c.len());
        Self { w, c }
    }

    pub fn width(&self) -> usize {
        self.w.nrows()
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    /// The `1/m` mean-field prefactor.
    pub fn scaling(&self) -> f64 {
        1.0 / self.width() as f64
    }

    /// Same hidden directions, new output coefficients.
    pub fn with_outputs(&self, c: DVector<f64>) -> Result<Self> {
        if c.len() != self.width() {
            return Err(TlabError::ShapeMismatch("output coefficient count".into()));
        }
        Ok(Self { w: self.w.clone(), c })
    }

    /// Hidden activations `σ(XWᵀ)`, one row per input.
    pub fn activations(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        (x * self.w.transpose()).map(|z| z.max(0.0))
    }

    /// `f(x)` for every row of `x`.
    pub fn eval(&self, x: &DMatrix<f64>) -> DVector<f64> {
        self.activations(x) * &self.c * self.scaling()
    }

    /// Largest `|‖wᵢ‖ − 1|` over the rows.
    pub fn sphere_deviation(&self) -> f64 {
        self.w.row_iter().map(|r| (r.norm() - 1.0).abs()).fold(0.0, f64::max)
    }
}

/// Fresh student: directions uniform on the sphere, outputs at [`OUTPUT_INIT`].
pub fn random_student(m: usize, d: usize, seed: u64) -> Result<ReluNet> {
    if m == 0 || d == 0 {
        return Err(invalid("student needs m >= 1 and d >= 1"));
    }
    let mut rng = rng_from(seed);
    let w = sphere_rows(&mut rng, m, d);
    ReluNet::new(w, DVector::from_element(m, OUTPUT_INIT))
}

fn sphere_rows(rng: &mut crate::rng::TlabRng, m: usize, d: usize) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(m, d);
    for i in 0..m {
        w.set_row(i, &sphere_vector(rng, d).transpose());
    }
    w
}

/// Degree-one arc-cosine kernel `(√(1−u²) + u(π − arccos u)) / 2π`.
pub fn arccos_kernel_u(u: f64) -> f64 {
    let u = u.clamp(-1.0, 1.0);
    ((1.0 - u * u).sqrt() + u * (PI - u.acos())) / (2.0 * PI)
}

/// `E[σ(aᵀx)σ(bᵀx)]` for unit vectors `a`, `b`.
pub fn arccos_kernel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    arccos_kernel_u(a.dot(b))
}

/// `k(u)`, `k'(u) = (π − arccos u)/2π` and `k(u) − u k'(u) = √(1−u²)/2π`.
#[inline]
fn kernel_parts(u: f64) -> (f64, f64, f64) {
    let u = u.clamp(-1.0, 1.0);
    let s = (1.0 - u * u).sqrt() / (2.0 * PI);
    let kp = (PI - u.acos()) / (2.0 * PI);
    (s + u * kp, kp, s)
}

/// Row norms and the row-normalized copy of `w`.
fn normalize_rows(w: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let norms = DVector::from_iterator(w.nrows(), w.row_iter().map(|r| r.norm()));
    let mut hat = w.clone();
    for (i, mut row) in hat.row_iter_mut().enumerate() {
        if norms[i] > 0.0 {
            row /= norms[i];
        }
    }
    (norms, hat)
}

/// Kernel values `k(aᵢᵀbⱼ)` for unit rows; `symmetric` when `a` and `b` are the same set.
fn kernel_values(a_hat: &DMatrix<f64>, b_hat: &DMatrix<f64>, symmetric: bool) -> DMatrix<f64> {
    let mut u = a_hat * b_hat.transpose();
    for j in 0..u.ncols() {
        for i in 0..u.nrows() {
            u[(i, j)] = if symmetric && i == j { 0.5 } else { arccos_kernel_u(u[(i, j)]) };
        }
    }
    u
}

/// One pass over the cosines between `a_hat` and `b_hat`.
///
/// Returns the matrix `k'(uᵢⱼ)` together with the contractions
/// `Σⱼ k(uᵢⱼ) eⱼ` and `Σⱼ (k − u k')(uᵢⱼ) eⱼ` against the weights `e` of `b`.
/// The symmetric case fills only one triangle and mirrors it.
fn kernel_contract(
    a_hat: &DMatrix<f64>,
    b_hat: &DMatrix<f64>,
    e: &DVector<f64>,
    symmetric: bool,
) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let mut u = a_hat * b_hat.transpose();
    let (r, c) = u.shape();
    let mut ke = DVector::zeros(r);
    let mut se = DVector::zeros(r);
    for j in 0..c {
        if symmetric {
            ke[j] += 0.5 * e[j];
            u[(j, j)] = 0.5;
            for i in j + 1..r {
                let (k, kp, sv) = kernel_parts(u[(i, j)]);
                ke[i] += k * e[j];
                ke[j] += k * e[i];
                se[i] += sv * e[j];
                se[j] += sv * e[i];
                u[(i, j)] = kp;
                u[(j, i)] = kp;
            }
        } else {
            for i in 0..r {
                let (k, kp, sv) = kernel_parts(u[(i, j)]);
                ke[i] += k * e[j];
                se[i] += sv * e[j];
                u[(i, j)] = kp;
            }
        }
    }
    (u, ke, se)
}

/// Matrix of `k(wᵢᵀvⱼ)` between two sets of unit rows.
pub fn kernel_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (_, a_hat) = normalize_rows(a);
    let (_, b_hat) = normalize_rows(b);
    let symmetric = std::ptr::eq(a, b);
    kernel_values(&a_hat, &b_hat, symmetric)
}

/// Exact `E_x[f_a(x) f_b(x)]` under `x ~ N(0, I_d)`.
pub fn l2_inner_product(net_a: &ReluNet, net_b: &ReluNet) -> Result<f64> {
    if net_a.dim() != net_b.dim() {
        return Err(TlabError::ShapeMismatch("nets live in different input dimensions".into()));
    }
    let (na, a_hat) = normalize_rows(&net_a.w);
    let (nb, b_hat) = normalize_rows(&net_b.w);
    let k = kernel_values(&a_hat, &b_hat, false);
    let ea = net_a.c.component_mul(&na);
    let eb = net_b.c.component_mul(&nb);
    Ok(ea.dot(&(k * eb)) * net_a.scaling() * net_b.scaling())
}

/// `‖f‖²` in `L²(N(0, I))`.
pub fn l2_norm_sq(net: &ReluNet) -> f64 {
    let (n, hat) = normalize_rows(&net.w);
    let k = kernel_values(&hat, &hat, true);
    let e = net.c.component_mul(&n);
    e.dot(&(k * &e)) * net.scaling().powi(2)
}

/// `½ E(f − f*)²`, no label noise.
pub fn population_loss_relu(student: &ReluNet, teacher: &ReluNet) -> Result<f64> {
    Ok(population_loss_and_grad(student, teacher, false)?.0)
}

/// Gradients of [`population_loss_relu`] with respect to `(c, W)`, using the
/// homogeneous extension of the kernel so the result is valid off the sphere.
pub fn population_gradients_relu(student: &ReluNet, teacher: &ReluNet) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (_, grads) = population_loss_and_grad(student, teacher, true)?;
    Ok(grads.expect("gradients requested"))
}

type Grads = Option<(DVector<f64>, DMatrix<f64>)>;

fn population_loss_and_grad(student: &ReluNet, teacher: &ReluNet, want_grad: bool) -> Result<(f64, Grads)> {
    if student.dim() != teacher.dim() {
        return Err(TlabError::ShapeMismatch("student and teacher input dimensions differ".into()));
    }
    let m = student.width() as f64;
    let ms = teacher.width() as f64;
    let (norms, w_hat) = normalize_rows(&student.w);
    let (t_norms, t_hat) = normalize_rows(&teacher.w);
    let e = student.c.component_mul(&norms);
    let et = teacher.c.component_mul(&t_norms);

    let (kp_ss, ke, se) = kernel_contract(&w_hat, &w_hat, &e, true);
    let (kp_st, kte, ste) = kernel_contract(&w_hat, &t_hat, &et, false);
    let teacher_sq = et.dot(&(kernel_values(&t_hat, &t_hat, true) * &et));

    let loss = 0.5 * (e.dot(&ke) / (m * m) - 2.0 * e.dot(&kte) / (m * ms) + teacher_sq / (ms * ms));
    if !want_grad {
        return Ok((loss.max(0.0), None));
    }

    let scale_ss = 1.0 / (m * m);
    let scale_st = 1.0 / (m * ms);
    let grad_c = (&ke * scale_ss - &kte * scale_st).component_mul(&norms);
    let radial = se * scale_ss - ste * scale_st;
    let mut e_w = w_hat.clone();
    for (i, mut row) in e_w.row_iter_mut().enumerate() {
        row *= e[i];
    }
    let mut et_w = t_hat.clone();
    for (j, mut row) in et_w.row_iter_mut().enumerate() {
        row *= et[j];
    }
    let mut grad_w = kp_ss * e_w * scale_ss;
    grad_w.gemm(-scale_st, &kp_st, &et_w, 1.0);
    for (i, mut row) in grad_w.row_iter_mut().enumerate() {
        let r = radial[i];
        row.zip_apply(&w_hat.row(i), |a, b| *a += r * b);
        row *= student.c[i];
    }
    Ok((loss, Some((grad_c, grad_w))))
}

/// `(1/2n) Σ (f(xₐ) − yₐ)²` and its gradients with respect to `(c, W)`.
fn empirical_loss_and_grad(net: &ReluNet, data: &Dataset) -> (f64, DVector<f64>, DMatrix<f64>) {
    let n = data.n() as f64;
    let m = net.width() as f64;
    let z = &data.x * net.w.transpose();
    let h = z.map(|v| v.max(0.0));
    let r = &h * &net.c / m - &data.y;
    let loss = 0.5 * r.norm_squared() / n;
    let grad_c = h.tr_mul(&r) / (n * m);
    let mut gate = z;
    for j in 0..gate.ncols() {
        for a in 0..gate.nrows() {
            // subgradient of the ReLU at exactly zero is taken as zero
            gate[(a, j)] = if gate[(a, j)] > 0.0 { r[a] } else { 0.0 };
        }
    }
    let mut grad_w = gate.tr_mul(&data.x) / (n * m);
    for (i, mut row) in grad_w.row_iter_mut().enumerate() {
        row *= net.c[i];
    }
    (loss, grad_c, grad_w)
}

pub fn empirical_loss_relu(net: &ReluNet, data: &Dataset) -> Result<f64> {
    if net.dim() != data.d() {
        return Err(TlabError::ShapeMismatch("net and data dimensions differ".into()));
    }
    Ok(empirical_loss_and_grad(net, data).0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReluFlowConfig {
    /// The step size is `lr_per_width · m`.
    pub lr_per_width: f64,
    pub max_steps: usize,
    pub loss_tol: f64,
}

impl Default for ReluFlowConfig {
    fn default() -> Self {
        Self {
            lr_per_width: 0.01,
            max_steps: 100_000,
            loss_tol: 1e-6,
        }
    }
}

impl ReluFlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_per_width > 0.0 && self.lr_per_width.is_finite()) {
            return Err(invalid("learning rate must be positive"));
        }
        if self.max_steps == 0 {
            return Err(invalid("max_steps must be >= 1"));
        }
        if !(self.loss_tol >= 0.0) {
            return Err(invalid("loss_tol must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum ReluObjective<'a> {
    Population(&'a ReluNet),
    Empirical(&'a Dataset),
}

#[derive(Debug, Clone)]
pub struct ReluFlowOutcome {
    pub net: ReluNet,
    pub final_loss: f64,
    pub steps: usize,
    pub converged: bool,
    /// `(step, loss)` every 1000 steps plus the endpoints.
    pub loss_trace: Vec<(usize, f64)>,
}

/// Projected gradient descent: a full step on `(c, W)`, then every `wᵢ` is
/// pulled back onto the unit sphere.
pub fn train_relu(student: &ReluNet, objective: ReluObjective<'_>, cfg: &ReluFlowConfig) -> Result<ReluFlowOutcome> {
    cfg.validate()?;
    let d = match objective {
        ReluObjective::Population(t) => t.dim(),
        ReluObjective::Empirical(data) => data.d(),
    };
    if student.dim() != d {
        return Err(TlabError::ShapeMismatch("student and objective dimensions differ".into()));
    }
    let eval = |net: &ReluNet| -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        match objective {
            ReluObjective::Population(t) => {
                let (loss, g) = population_loss_and_grad(net, t, true)?;
                let (gc, gw) = g.expect("gradients requested");
                Ok((loss, gc, gw))
            }
            ReluObjective::Empirical(data) => Ok(empirical_loss_and_grad(net, data)),
        }
    };

    let lr = cfg.lr_per_width * student.width() as f64;
    let mut net = student.clone();
    let (mut loss, mut gc, mut gw) = eval(&net)?;
    let initial = loss;
    let limit = crate::deep_linear::DIVERGENCE_FACTOR * initial.max(f64::MIN_POSITIVE);
    let mut trace = vec![(0usize, loss)];
    let mut steps = 0usize;
    while loss > cfg.loss_tol && steps < cfg.max_steps {
        net.c.axpy(-lr, &gc, 1.0);
        net.w.zip_apply(&gw, |a, b| *a -= lr * b);
        for mut row in net.w.row_iter_mut() {
            let norm = row.norm();
            if norm > 0.0 {
                row /= norm;
            }
        }
        steps += 1;
        (loss, gc, gw) = eval(&net)?;
        if !loss.is_finite() || loss > limit {
            return Err(TlabError::Diverged {
                step: steps,
                loss,
                initial,
                limit,
            });
        }
        if steps % 1000 == 0 {
            trace.push((steps, loss));
        }
    }
    if trace.last().map(|&(s, _)| s) != Some(steps) {
        trace.push((steps, loss));
    }
    Ok(ReluFlowOutcome {
        converged: loss <= cfg.loss_tol,
        net,
        final_loss: loss,
        steps,
        loss_trace: trace,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherPair {
    /// All `m*` neurons, scaling `1/m*`.
    pub target: ReluNet,
    /// Neurons outside the ablated set, scaling `1/((1−μ)m*)`.
    pub source: ReluNet,
    /// Sorted indices of the removed neurons.
    pub ablated_set: Vec<usize>,
    pub mu: f64,
}

/// Target teacher from `seed`, ablation set drawn from a stream derived from it.
pub fn make_teacher_pair(m_star: usize, d: usize, mu: f64, seed: u64) -> Result<TeacherPair> {
    make_teacher_pair_with_ablation(m_star, d, mu, seed, mix64(seed ^ 0xA5A5_A5A5))
}

/// As [`make_teacher_pair`] with an explicit seed for the ablation draw, so
/// the same target can be paired with many ablations.
pub fn make_teacher_pair_with_ablation(
    m_star: usize,
    d: usize,
    mu: f64,
    teacher_seed: u64,
    ablation_seed: u64,
) -> Result<TeacherPair> {
    let target = make_teacher(m_star, d, teacher_seed)?;
    let removed = ablation_count(m_star, mu)?;

    let ablated = sample(&mut rng_from(ablation_seed), m_star, removed).into_vec();
    ablate_teacher(target, ablated)
}

/// Pairs `target` with the source teacher left after removing `ablated`.
///
/// `μ` is `|ablated| / m*`. Nested ablation sets give nested sources, which is
/// how sweeps over `μ` are built.
pub fn ablate_teacher(target: ReluNet, mut ablated: Vec<usize>) -> Result<TeacherPair> {
    let m_star = target.width();
    ablated.sort_unstable();
    ablated.dedup();
    if ablated.iter().any(|&i| i >= m_star) {
        return Err(invalid("ablated index out of range"));
    }
    if ablated.len() >= m_star {
        return Err(invalid("ablation must keep at least one teacher neuron"));
    }
    let keep: Vec<usize> = (0..m_star).filter(|i| ablated.binary_search(i).is_err()).collect();
    let source = ReluNet::new(
        target.w.select_rows(keep.iter()),
        DVector::from_iterator(keep.len(), keep.iter().map(|&i| target.c[i])),
    )?;
    let mu = ablated.len() as f64 / m_star as f64;
    Ok(TeacherPair {
        target,
        source,
        ablated_set: ablated,
        mu,
    })
}

/// Target teacher drawn exactly as in [`make_teacher_pair`].
pub fn make_teacher(m_star: usize, d: usize, seed: u64) -> Result<ReluNet> {
    if m_star == 0 || d == 0 {
        return Err(invalid("teacher needs m* >= 1 and d >= 1"));
    }
    let mut rng = rng_from(seed);
    let w = sphere_rows(&mut rng, m_star, d);
    let c = gaussian_vector(&mut rng, m_star);
    ReluNet::new(w, c)
}

/// A random order of the teacher's neurons; ablating a prefix of it gives
/// nested source teachers as `μ` grows.
pub fn ablation_order(m_star: usize, seed: u64) -> Vec<usize> {
    sample(&mut rng_from(seed), m_star, m_star).into_vec()
}

/// Number of neurons removed at ablation fraction `mu`, if `mu·m*` is integral.
pub fn ablation_count(m_star: usize, mu: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&mu) {
        return Err(invalid(format!("ablation fraction must lie in [0, 1), got {mu}")));
    }
    let removed_f = mu * m_star as f64;
    let removed = removed_f.round() as usize;
    if (removed_f - removed as f64).abs() > 1e-9 {
        return Err(invalid(format!("mu * m* = {removed_f} is not an integer")));
    }
    Ok(removed)
}

/// `n` Gaussian inputs labelled by `teacher` plus `N(0, σ²)` noise.
pub fn sample_teacher_dataset(teacher: &ReluNet, n: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(invalid("dataset needs n >= 1"));
    }
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(invalid("noise level must be finite and >= 0"));
    }
    let mut rng = rng_from(seed);
    let x = gaussian_matrix(&mut rng, n, teacher.dim());
    let mut y = teacher.eval(&x);
    if sigma > 0.0 {
        y.axpy(sigma, &gaussian_vector(&mut rng, n), 1.0);
    }
    Ok(Dataset { x, y, sigma, seed })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelGrams {
    /// `(1/m) k(wᵢᵀwⱼ)`.
    pub k: DMatrix<f64>,
    /// `(1/m*) k(w*ᵢᵀw*ⱼ)`.
    pub k_star: DMatrix<f64>,
    /// `(1/√(m m*)) k(wᵢᵀw*ⱼ)`.
    pub k_tilde: DMatrix<f64>,
}

pub fn gram_matrices(student: &ReluNet, target: &ReluNet) -> Result<KernelGrams> {
    if student.dim() != target.dim() {
        return Err(TlabError::ShapeMismatch("student and teacher input dimensions differ".into()));
    }
    let m = student.width() as f64;
    let ms = target.width() as f64;
    Ok(KernelGrams {
        k: kernel_matrix(&student.w, &student.w) / m,
        k_star: kernel_matrix(&target.w, &target.w) / ms,
        k_tilde: kernel_matrix(&student.w, &target.w) / (m * ms).sqrt(),
    })
}

/// Gram matrix of the hidden features on a set of inputs:
/// `(1/m) Σᵢ σ(wᵢᵀxₐ) σ(wᵢᵀx_b)`.
pub fn feature_gram(net: &ReluNet, x: &DMatrix<f64>) -> DMatrix<f64> {
    let h = net.activations(x);
    &h * h.transpose() * net.scaling()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionNorms {
    /// `‖P∥f*‖²`, the part of the target inside the student's feature span.
    pub par: f64,
    /// `‖P⊥f*‖²`, clamped at zero.
    pub perp: f64,
    /// `‖f*‖²`.
    pub total: f64,
    /// Number of eigenvalues of `K` kept.
    pub rank: usize,
}

impl ProjectionNorms {
    /// `perp / ‖f*‖²`.
    pub fn perp_fraction(&self) -> f64 {
        self.perp / self.total
    }
}

/// Splits `‖f*‖²` into its projection onto the span of the student's hidden
/// features and the remainder. `K⁻¹` keeps eigenvalues above `eig_cutoff·λ_max`.
pub fn projection_norms(student: &ReluNet, target: &ReluNet, eig_cutoff: f64) -> Result<ProjectionNorms> {
    if !(eig_cutoff > 0.0) {
        return Err(invalid("eigenvalue cutoff must be positive"));
    }
    let grams = gram_matrices(student, target)?;
    if grams.k.iter().all(|&v| v == 0.0) {
        return Err(TlabError::Degenerate("student Gram matrix is zero".into()));
    }
    let ms = target.width() as f64;
    let c = &target.c;
    let b = &grams.k_tilde * c;
    let eig = nalgebra::SymmetricEigen::new(grams.k.clone());
    let lmax = eig.eigenvalues.max();
    let mut par = 0.0;
    let mut rank = 0;
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > eig_cutoff * lmax {
            par += eig.eigenvectors.column(k).dot(&b).powi(2) / lam;
            rank += 1;
        }
    }
    par /= ms;
    let total = c.dot(&(&grams.k_star * c)) / ms;
    Ok(ProjectionNorms {
        par,
        perp: (total - par).max(0.0),
        total,
        rank,
    })
}

/// Least-squares fit of `ge ≈ A n^{−ν}` in log-log coordinates. Returns `(A, ν)`.
pub fn power_law_fit(ns: &[f64], ges: &[f64]) -> Result<(f64, f64)> {
    if ns.len() != ges.len() {
        return Err(TlabError::ShapeMismatch("ns and ges differ in length".into()));
    }
    if ns.len() < 3 {
        return Err(invalid("power-law fit needs at least three points"));
    }
    if ns.iter().chain(ges).any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(invalid("power-law fit needs positive finite values"));
    }
    let lx: Vec<f64> = ns.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ges.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(invalid("power-law fit needs at least two distinct n"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok(((my - slope * mx).exp(), -slope))
}

/// Sample size where `A n^{−ν}` falls to `perp`: `n* = (A / perp)^{1/ν}`.
/// Infinite when `perp = 0` (the scratch curve never crosses).
pub fn phase_boundary_predict(perp: f64, a: f64, nu: f64) -> Result<f64> {
    if !(a > 0.0) || !(nu > 0.0) || !(perp >= 0.0) {
        return Err(invalid("phase boundary needs A > 0, nu > 0 and perp >= 0"));
    }
    if perp == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((a / perp).powf(1.0 / nu))
}

/// Linear transfer with ReLU features: keep the student's hidden directions
/// and refit the outputs by minimum-norm least squares on the data, within
/// the eigendirections of `K` kept by [`DEFAULT_EIG_CUTOFF`].
pub fn relu_linear_transfer(pretrained: &ReluNet, data: &Dataset) -> Result<ReluNet> {
    relu_linear_transfer_with_cutoff(pretrained, data, DEFAULT_EIG_CUTOFF)
}

pub fn relu_linear_transfer_with_cutoff(pretrained: &ReluNet, data: &Dataset, eig_cutoff: f64) -> Result<ReluNet> {
    if pretrained.dim() != data.d() {
        return Err(TlabError::ShapeMismatch("net and data dimensions differ".into()));
    }
    if !(0.0..1.0).contains(&eig_cutoff) {
        return Err(invalid(format!("eigenvalue cutoff must lie in [0, 1), got {eig_cutoff}")));
    }
    let design = pretrained.activations(&data.x) * pretrained.scaling();
    if eig_cutoff == 0.0 {
        return pretrained.with_outputs(pinv_solve(&design, &data.y));
    }
    let eig = nalgebra::SymmetricEigen::new(kernel_matrix(&pretrained.w, &pretrained.w));
    let lmax = eig.eigenvalues.max();
    if !(lmax > 0.0) {
        return Err(TlabError::Degenerate("student Gram matrix is zero".into()));
    }
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&k| eig.eigenvalues[k] > eig_cutoff * lmax)
        .collect();
    let basis = eig.eigenvectors.select_columns(keep.iter());
    let coeffs = pinv_solve(&(design * &basis), &data.y);
    pretrained.with_outputs(basis * coeffs)
}

/// Settings for the ReLU transfer experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReluExperiment {
    pub m: usize,
    pub m_star: usize,
    pub d: usize,
    pub sigma: f64,
    pub pretrain: ReluFlowConfig,
    pub scratch: ReluFlowConfig,
    pub teacher_seed: u64,
}

/// Per-seed generalization errors behind a transferability estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReluTransferEstimate {
    /// Mean of `(ge_scratch − ge_transfer) / (‖f*‖² + σ²)`.
    pub t_normalized: f64,
    pub stderr: f64,
    pub scratch_ge: Vec<f64>,
    pub transfer_ge: Vec<f64>,
    pub target_variance: f64,
}

/// `‖f − f*‖²`.
pub fn relu_generalization_error(net: &ReluNet, target: &ReluNet) -> Result<f64> {
    Ok(2.0 * population_loss_relu(net, target)?)
}

/// Scratch student trained on `data` from a fresh initialization.
pub fn relu_scratch(exp: &ReluExperiment, data: &Dataset, init_seed: u64) -> Result<ReluNet> {
    let student = random_student(exp.m, exp.d, init_seed)?;
    Ok(train_relu(&student, ReluObjective::Empirical(data), &exp.scratch)?.net)
}

/// Normalized transferability at ablation `mu` and sample size `n`.
///
/// A student is pretrained on the population source loss; each seed draws a
/// target dataset, trains a scratch student on it and refits the pretrained
/// student's outputs on the same data.
pub fn relu_transferability(exp: &ReluExperiment, mu: f64, n: usize, seeds: &[u64]) -> Result<ReluTransferEstimate> {
    if seeds.len() < 2 {
        return Err(invalid("transferability needs at least two seeds"));
    }
    let pair = make_teacher_pair(exp.m_star, exp.d, mu, exp.teacher_seed)?;
    let student = random_student(exp.m, exp.d, mix64(exp.teacher_seed ^ 0x5EED))?;
    let pretrained = train_relu(&student, ReluObjective::Population(&pair.source), &exp.pretrain)?.net;
    let variance = l2_norm_sq(&pair.target) + exp.sigma * exp.sigma;

    let mut scratch_ge = Vec::with_capacity(seeds.len());
    let mut transfer_ge = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let data = sample_teacher_dataset(&pair.target, n, exp.sigma, seed)?;
        let sc = relu_scratch(exp, &data, mix64(seed))?;
        scratch_ge.push(relu_generalization_error(&sc, &pair.target)?);
        let tr = relu_linear_transfer(&pretrained, &data)?;
        transfer_ge.push(relu_generalization_error(&tr, &pair.target)?);
    }
    let diffs: Vec<f64> = scratch_ge
        .iter()
        .zip(&transfer_ge)
        .map(|(s, t)| (s - t) / variance)
        .collect();
    let (t_normalized, stderr) = mean_and_stderr(&diffs);
    Ok(ReluTransferEstimate {
        t_normalized,
        stderr,
        scratch_ge,
        transfer_ge,
        target_variance: variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random_net(m: usize, d: usize, seed: u64) -> ReluNet {
        let mut rng = rng_from(seed);
        let w = sphere_rows(&mut rng, m, d);
        ReluNet::new(w, gaussian_vector(&mut rng, m)).unwrap()
    }

    /// Monte-Carlo mean and standard error of `g(f_a(x), f_b(x))`.
    fn monte_carlo(a: &ReluNet, b: &ReluNet, samples: usize, seed: u64, g: impl Fn(f64, f64) -> f64) -> (f64, f64) {
        let mut vals = Vec::with_capacity(samples);
        let mut rng = rng_from(seed);
        let chunk = 10_000;
        for _ in 0..samples / chunk {
            let x = gaussian_matrix(&mut rng, chunk, a.dim());
            let (fa, fb) = (a.eval(&x), b.eval(&x));
            vals.extend(fa.iter().zip(fb.iter()).map(|(&p, &q)| g(p, q)));
        }
        mean_and_stderr(&vals)
    }

    #[test]
    fn kernel_reference_values() {
        assert_eq!(arccos_kernel_u(1.0), 0.5);
        assert_relative_eq!(arccos_kernel_u(0.0), 1.0 / (2.0 * PI), epsilon = 1e-15);
        assert!(arccos_kernel_u(-1.0).abs() < 1e-16);
        let e = DVector::from_vec(vec![0.0, 1.0]);
        assert_eq!(arccos_kernel(&e, &e), 0.5);
        // rounding slightly above one is clamped
        assert_eq!(arccos_kernel_u(1.0 + 1e-15), 0.5);
    }

    #[test]
    fn single_neuron_norm() {
        let net = ReluNet::new(DMatrix::from_row_slice(1, 3, &[0.0, 0.0, 1.0]), DVector::from_element(1, 1.0)).unwrap();
        assert_eq!(l2_inner_product(&net, &net).unwrap(), 0.5);
        assert_eq!(l2_norm_sq(&net), 0.5);
    }

    #[test]
    fn inner_products_match_monte_carlo() {
        for seed in 0..3 {
            let a = random_net(6, 4, seed);
            let b = random_net(5, 4, seed + 50);
            let exact = l2_inner_product(&a, &b).unwrap();
            let (mc, se) = monte_carlo(&a, &b, 200_000, seed + 100, |p, q| p * q);
            assert!((exact - mc).abs() <= 3.0 * se, "{exact} vs {mc} ± {se}");
            let loss = population_loss_relu(&a, &b).unwrap();
            let (mc, se) = monte_carlo(&a, &b, 200_000, seed + 200, |p, q| 0.5 * (p - q).powi(2));
            assert!((loss - mc).abs() <= 3.0 * se, "{loss} vs {mc} ± {se}");
        }
    }

    #[test]
    fn loss_trivial_cases() {
        let t = random_net(7, 5, 1);
        assert!(population_loss_relu(&t, &t).unwrap() < 1e-15);
        let zero = t.with_outputs(DVector::zeros(7)).unwrap();
        assert_relative_eq!(population_loss_relu(&zero, &t).unwrap(), 0.5 * l2_norm_sq(&t), max_relative = 1e-12);
        let pair = make_teacher_pair(10, 5, 0.0, 3).unwrap();
        assert_relative_eq!(
            l2_inner_product(&pair.source, &pair.target).unwrap(),
            l2_norm_sq(&pair.target),
            max_relative = 1e-12
        );
    }

    #[test]
    fn population_gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = rng_from(seed + 40);
            // off-sphere rows exercise the homogeneous extension
            let w = gaussian_matrix(&mut rng, 5, 4);
            let student = ReluNet::new_unchecked(w, gaussian_vector(&mut rng, 5));
            let teacher = random_net(3, 4, seed + 60);
            let (gc, gw) = population_gradients_relu(&student, &teacher).unwrap();
            let h = 1e-6;
            let loss = |s: &ReluNet| population_loss_relu(s, &teacher).unwrap();
            let mut num_c = DVector::zeros(5);
            for i in 0..5 {
                let mut up = student.clone();
                up.c[i] += h;
                let mut dn = student.clone();
                dn.c[i] -= h;
                num_c[i] = (loss(&up) - loss(&dn)) / (2.0 * h);
            }
            let mut num_w = DMatrix::zeros(5, 4);
            for i in 0..5 {
                for j in 0..4 {
                    let mut up = student.clone();
                    up.w[(i, j)] += h;
                    let mut dn = student.clone();
                    dn.w[(i, j)] -= h;
                    num_w[(i, j)] = (loss(&up) - loss(&dn)) / (2.0 * h);
                }
            }
            assert!((&gc - num_c).norm() / gc.norm() <= 1e-4);
            assert!((&gw - num_w).norm() / gw.norm() <= 1e-4);
        }
    }

    #[test]
    fn empirical_gradients_match_finite_differences() {
        let teacher = random_net(4, 3, 1);
        let data = sample_teacher_dataset(&teacher, 30, 0.1, 2).unwrap();
        let student = random_net(6, 3, 3);
        let (_, gc, gw) = empirical_loss_and_grad(&student, &data);
        let h = 1e-6;
        let loss = |s: &ReluNet| empirical_loss_relu(s, &data).unwrap();
        for i in 0..6 {
            let mut up = student.clone();
            up.c[i] += h;
            let mut dn = student.clone();
            dn.c[i] -= h;
            assert_relative_eq!((loss(&up) - loss(&dn)) / (2.0 * h), gc[i], max_relative = 1e-4, epsilon = 1e-10);
            for j in 0..3 {
                let mut up = student.clone();
                up.w[(i, j)] += h;
                let mut dn = student.clone();
                dn.w[(i, j)] -= h;
                assert_relative_eq!(
                    (loss(&up) - loss(&dn)) / (2.0 * h),
                    gw[(i, j)],
                    max_relative = 1e-4,
                    epsilon = 1e-10
                );
            }
        }
    }

    #[test]
    fn training_stays_on_the_sphere_and_descends() {
        let pair = make_teacher_pair(10, 8, 0.0, 5).unwrap();
        let student = random_student(40, 8, 6).unwrap();
        let cfg = ReluFlowConfig {
            lr_per_width: 2.0,
            max_steps: 3000,
            loss_tol: 0.0,
        };
        let out = train_relu(&student, ReluObjective::Population(&pair.target), &cfg).unwrap();
        assert!(out.net.sphere_deviation() <= SPHERE_TOL);
        let start = population_loss_relu(&student, &pair.target).unwrap();
        assert!(out.final_loss < 0.05 * start, "{} vs {start}", out.final_loss);

        let data = sample_teacher_dataset(&pair.target, 20, 0.0, 7).unwrap();
        let cfg = ReluFlowConfig {
            lr_per_width: 2.0,
            ..ReluFlowConfig::default()
        };
        let out = train_relu(&student, ReluObjective::Empirical(&data), &cfg).unwrap();
        assert!(out.converged && out.final_loss <= 1e-6);
        assert!(out.net.sphere_deviation() <= SPHERE_TOL);
    }

    #[test]
    fn degenerate_students_are_rejected() {
        assert!(random_student(0, 5, 1).is_err());
        assert!(ReluNet::new(DMatrix::zeros(0, 3), DVector::zeros(0)).is_err());
        assert!(ReluNet::new(DMatrix::from_element(1, 2, 1.0), DVector::zeros(1)).is_err());
        let cfg = ReluFlowConfig {
            lr_per_width: 1e6,
            max_steps: 50,
            loss_tol: 0.0,
        };
        let pair = make_teacher_pair(5, 4, 0.0, 1).unwrap();
        let student = random_net(8, 4, 2);
        let err = train_relu(&student, ReluObjective::Population(&pair.target), &cfg).unwrap_err();
        assert!(matches!(err, TlabError::Diverged { .. }));
    }

    #[test]
    fn teacher_pair_ablation() {
        let p = make_teacher_pair(20, 6, 0.0, 9).unwrap();
        assert_eq!(p.source, p.target);
        assert!(p.ablated_set.is_empty());
        let p = make_teacher_pair(100, 6, 0.5, 9).unwrap();
        assert_eq!(p.source.width(), 50);
        assert_relative_eq!(p.source.scaling(), 1.0 / 50.0);
        for (k, i) in (0..100).filter(|i| !p.ablated_set.contains(i)).enumerate() {
            assert_eq!(p.source.w().row(k), p.target.w().row(i));
            assert_eq!(p.source.c()[k], p.target.c()[i]);
        }
        assert_eq!(p, make_teacher_pair(100, 6, 0.5, 9).unwrap());
        assert!(make_teacher_pair(10, 6, 1.0, 9).is_err());
        assert!(make_teacher_pair(10, 6, 0.25, 9).is_err());
        // the target does not depend on the ablation draw
        let q = make_teacher_pair_with_ablation(100, 6, 0.3, 9, 1234).unwrap();
        assert_eq!(q.target, p.target);
    }

    #[test]
    fn nested_ablations() {
        let target = make_teacher(50, 4, 3).unwrap();
        let order = ablation_order(50, 8);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        let small = ablate_teacher(target.clone(), order[..10].to_vec()).unwrap();
        let large = ablate_teacher(target.clone(), order[..25].to_vec()).unwrap();
        assert_eq!(small.mu, 0.2);
        assert_eq!(large.mu, 0.5);
        assert!(small.ablated_set.iter().all(|i| large.ablated_set.contains(i)));
        assert_eq!(ablation_count(50, 0.8).unwrap(), 40);
        assert!(ablation_count(50, 0.81).is_err());
        assert!(ablate_teacher(target.clone(), vec![50]).is_err());
        assert!(ablate_teacher(target, (0..50).collect()).is_err());
    }

    #[test]
    fn gram_matrix_properties() {
        let t = random_net(12, 5, 1);
        let g = gram_matrices(&t, &t).unwrap();
        assert!((&g.k - &g.k_star).abs().max() <= 1e-12);
        assert!((&g.k - &g.k_tilde).abs().max() <= 1e-12);
        for i in 0..12 {
            assert_eq!(g.k[(i, i)], 1.0 / 24.0);
        }
        for seed in 0..20 {
            let s = random_net(15, 5, seed);
            let g = gram_matrices(&s, &t).unwrap();
            let trace = g.k.trace();
            assert!(crate::linalg::min_eigenvalue(&g.k) >= -1e-10 * trace);
        }
    }

    #[test]
    fn projections_split_the_target_norm() {
        let pair = make_teacher_pair(8, 6, 0.0, 2).unwrap();
        // student containing every teacher neuron plus extra ones
        let extra = random_net(10, 6, 3);
        let mut w = DMatrix::zeros(18, 6);
        w.rows_mut(0, 8).copy_from(pair.target.w());
        w.rows_mut(8, 10).copy_from(extra.w());
        let student = ReluNet::new(w, DVector::zeros(18)).unwrap();
        let p = projection_norms(&student, &pair.target, DEFAULT_EIG_CUTOFF).unwrap();
        assert!(p.perp <= 1e-8, "{p:?}");
        assert_relative_eq!(p.total, l2_norm_sq(&pair.target), max_relative = 1e-12);

        let p = projection_norms(&extra, &pair.target, DEFAULT_EIG_CUTOFF).unwrap();
        assert!(p.perp > 0.0);
        assert!((p.par + p.perp - p.total).abs() <= 1e-8);
        assert!(projection_norms(&extra, &pair.target, 0.0).is_err());
    }

    #[test]
    fn power_law_examples() {
        let ns = [10.0, 30.0, 100.0, 300.0];
        let ges: Vec<f64> = ns.iter().map(|n: &f64| 2.0 * n.powf(-1.2)).collect();
        let (a, nu) = power_law_fit(&ns, &ges).unwrap();
        assert!((a - 2.0).abs() <= 1e-10 && (nu - 1.2).abs() <= 1e-10);
        let scaled: Vec<f64> = ges.iter().map(|g| 7.0 * g).collect();
        let (a7, nu7) = power_law_fit(&ns, &scaled).unwrap();
        assert!((a7 - 7.0 * a).abs() <= 1e-9 && (nu7 - nu).abs() <= 1e-10);
        assert!(power_law_fit(&ns[..2], &ges[..2]).is_err());
        assert!(power_law_fit(&[1.0, 2.0, 3.0], &[1.0, -1.0, 1.0]).is_err());
    }

    #[test]
    fn phase_boundary_examples() {
        assert_relative_eq!(phase_boundary_predict(0.3, 0.3, 1.7).unwrap(), 1.0);
        let n = phase_boundary_predict(0.02, 2.0, 1.0).unwrap();
        assert_relative_eq!(n, 100.0, max_relative = 1e-12);
        assert_relative_eq!(2.0 * n.powf(-1.0), 0.02, max_relative = 1e-12);
        assert!(phase_boundary_predict(0.0, 2.0, 1.0).unwrap().is_infinite());
        assert!(phase_boundary_predict(1e-300, 2.0, 1.0).unwrap() > 1e200);
        assert!(phase_boundary_predict(0.1, -1.0, 1.0).is_err());
    }

    #[test]
    fn transfer_with_complete_features_recovers_target() {
        let pair = make_teacher_pair(6, 5, 0.0, 4).unwrap();
        let student = ReluNet::new(pair.target.w().clone(), DVector::zeros(6)).unwrap();
        let data = sample_teacher_dataset(&pair.target, 40, 0.0, 5).unwrap();
        let fit = relu_linear_transfer(&student, &data).unwrap();
        let ge = relu_generalization_error(&fit, &pair.target).unwrap();
        assert!(ge < 1e-14, "{ge}");
    }
}
