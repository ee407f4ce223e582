//! Depth-`L` linear networks `f(x) = xᵀ W₁ W₂ … W_L`, their initialization,
//! explicit-Euler gradient flow, and the diagnostics the implicit-bias
//! results are stated in terms of: the end-to-end map, the conserved
//! balance matrices `D_l = W_lᵀW_l − W_{l+1}W_{l+1}ᵀ`, and the rank-one
//! collapse of the hidden feature map.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, TlabError};
use crate::linalg::{mean_and_stderr, min_eigenvalue, pinv_solve, sorted_svd};
use crate::rng::{gaussian_matrix, rng_from, sphere_vector};
use crate::task_gen::Dataset;

/// Steps between balance-invariant checkpoints.
pub const CHECKPOINT_EVERY: usize = 1000;
/// Loss growth factor (relative to the initial loss) treated as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// `W̄_l = s_l O_l` with orthogonal `O_l`; the balance condition holds with the requested margin.
    ScaledOrthogonal,
    /// i.i.d. standard normal `W̄_l`; no balance guarantee.
    Gaussian,
}

/// Snapshot taken at initialization. Never modified by training.
#[derive(Debug, Clone, PartialEq)]
pub struct InitRecord {
    pub layers: Vec<DMatrix<f64>>,
    /// `D_l(0)` for `l = 1..L−1`.
    pub balance: Vec<DMatrix<f64>>,
    /// Minimum eigenvalue of each unscaled `D̄_l = D_l(0) / α²`.
    pub min_eigs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearNet {
    layers: Vec<DMatrix<f64>>,
    alpha: f64,
    init_record: InitRecord,
}

impl LinearNet {
    /// Wraps explicit layers; the current layers become the init record.
    pub fn from_layers(layers: Vec<DMatrix<f64>>, alpha: f64) -> Result<Self> {
        if layers.len() < 2 {
            return Err(invalid("a linear net needs at least two layers"));
        }
        let d = layers[0].nrows();
        for (l, w) in layers.iter().enumerate() {
            let expected_cols = if l + 1 == layers.len() { 1 } else { d };
            if w.nrows() != d || w.ncols() != expected_cols {
                return Err(TlabError::ShapeMismatch(format!(
                    "layer {} has shape {}x{}, expected {}x{}",
                    l + 1,
                    w.nrows(),
                    w.ncols(),
                    d,
                    expected_cols
                )));
            }
        }
        let balance = balance_matrices(&layers);
        let min_eigs = balance
            .iter()
            .map(|b| min_eigenvalue(b) / (alpha * alpha).max(f64::MIN_POSITIVE))
            .collect();
        let init_record = InitRecord {
            layers: layers.clone(),
            balance,
            min_eigs,
        };
        Ok(Self {
            layers,
            alpha,
            init_record,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].nrows()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn layers(&self) -> &[DMatrix<f64>] {
        &self.layers
    }

    pub fn init_record(&self) -> &InitRecord {
        &self.init_record
    }

    /// Replaces the last layer, keeping every frozen layer and the init record.
    pub fn with_last_layer(&self, last: DMatrix<f64>) -> Result<Self> {
        let l = self.layers.len() - 1;
        if last.shape() != self.layers[l].shape() {
            return Err(TlabError::ShapeMismatch("last layer shape".into()));
        }
        let mut net = self.clone();
        net.layers[l] = last;
        Ok(net)
    }

    /// Hidden feature map `Φ = W₁ … W_{L−1}`.
    pub fn feature_map(&self) -> DMatrix<f64> {
        let hidden = &self.layers[..self.layers.len() - 1];
        hidden
            .iter()
            .skip(1)
            .fold(hidden[0].clone(), |acc, w| acc * w)
    }
}

fn balance_matrices(layers: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    layers
        .windows(2)
        .map(|pair| pair[0].transpose() * &pair[0] - &pair[1] * pair[1].transpose())
        .collect()
}

fn random_orthogonal(seed_rng: &mut crate::rng::TlabRng, d: usize) -> DMatrix<f64> {
    let g = gaussian_matrix(seed_rng, d, d);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    // sign fix makes the draw Haar-distributed
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Builds `W_l(0) = α W̄_l`.
///
/// In [`InitMode::ScaledOrthogonal`] the scales are `s_L = 1`,
/// `s_l² = 1 + (L − l)·margin`, so `D̄_l ⪰ margin·I` exactly.
pub fn init_balanced(
    depth: usize,
    d: usize,
    alpha: f64,
    margin: f64,
    mode: InitMode,
    seed: u64,
) -> Result<LinearNet> {
    if depth < 2 || d < 2 {
        return Err(invalid(format!("need L >= 2 and d >= 2, got L={depth}, d={d}")));
    }
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(invalid(format!("alpha must be positive, got {alpha}")));
    }
    let mut rng = rng_from(seed);
    let bars: Vec<DMatrix<f64>> = match mode {
        InitMode::Gaussian => (0..depth)
            .map(|l| {
                let cols = if l + 1 == depth { 1 } else { d };
                gaussian_matrix(&mut rng, d, cols)
            })
            .collect(),
        InitMode::ScaledOrthogonal => {
            if margin <= 0.0 || !margin.is_finite() {
                return Err(invalid(format!("margin must be positive, got {margin}")));
            }
            (0..depth)
                .map(|l| {
                    let scale = (1.0 + (depth - 1 - l) as f64 * margin).sqrt();
                    if l + 1 == depth {
                        let u = sphere_vector(&mut rng, d);
                        DMatrix::from_column_slice(d, 1, u.as_slice()) * scale
                    } else {
                        random_orthogonal(&mut rng, d) * scale
                    }
                })
                .collect()
        }
    };
    let layers: Vec<DMatrix<f64>> = bars.iter().map(|w| w * alpha).collect();
    let mut net = LinearNet::from_layers(layers, alpha)?;
    net.init_record.min_eigs = balance_matrices(&bars).iter().map(min_eigenvalue).collect();
    Ok(net)
}

/// `β = W₁ W₂ … W_L` as a length-`d` vector.
pub fn end_to_end_beta(net: &LinearNet) -> DVector<f64> {
    forward(&net.layers).0
}

/// End-to-end vector `β` and the suffix products `s_l = W_{l+1} … W_L`
/// (0-based `l`; `s_{L−1}` is the scalar 1 as a length-1 vector).
fn forward(layers: &[DMatrix<f64>]) -> (DVector<f64>, Vec<DVector<f64>>) {
    let depth = layers.len();
    let mut suffix = vec![DVector::from_element(1, 1.0); depth];
    suffix[depth - 2] = layers[depth - 1].column(0).into_owned();
    for l in (0..depth - 2).rev() {
        suffix[l] = &layers[l + 1] * &suffix[l + 1];
    }
    let beta = &layers[0] * &suffix[0];
    (beta, suffix)
}

/// Given the residual direction `g = ∂loss/∂β`, returns all layer gradients
/// `∇W_l = (W_{l−1}ᵀ…W₁ᵀ g)(W_{l+1}…W_L)ᵀ`.
fn backprop(layers: &[DMatrix<f64>], suffix: &[DVector<f64>], g: &DVector<f64>) -> Vec<DMatrix<f64>> {
    let depth = layers.len();
    let mut grads = Vec::with_capacity(depth);
    let mut left = g.clone();
    for l in 0..depth {
        if l + 1 == depth {
            grads.push(DMatrix::from_column_slice(left.len(), 1, left.as_slice()));
        } else {
            let s = &suffix[l];
            let mut grad = DMatrix::zeros(left.len(), s.len());
            grad.ger(1.0, &left, s, 0.0);
            grads.push(grad);
            left = layers[l].tr_mul(&left);
        }
    }
    grads
}

/// Gradients of `½‖β(net) − β_s‖²` (population risk with identity input covariance).
pub fn population_gradients(net: &LinearNet, beta_src: &DVector<f64>) -> Result<Vec<DMatrix<f64>>> {
    check_dim(net, beta_src.len())?;
    let (beta, suffix) = forward(&net.layers);
    Ok(backprop(&net.layers, &suffix, &(beta - beta_src)))
}

/// Gradients of `(1/2n)‖y − Xβ(net)‖²`.
pub fn empirical_gradients(net: &LinearNet, data: &Dataset) -> Result<Vec<DMatrix<f64>>> {
    check_dim(net, data.d())?;
    let (beta, suffix) = forward(&net.layers);
    let resid = &data.x * beta - &data.y;
    let g = data.x.tr_mul(&resid) / data.n() as f64;
    Ok(backprop(&net.layers, &suffix, &g))
}

fn check_dim(net: &LinearNet, d: usize) -> Result<()> {
    if net.dim() != d {
        return Err(TlabError::ShapeMismatch(format!(
            "net dimension {} vs data dimension {d}",
            net.dim()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub eta: f64,
    pub max_steps: usize,
    pub loss_tol: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            eta: 1e-3,
            max_steps: 100_000,
            loss_tol: 1e-6,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(invalid(format!("eta must be positive, got {}", self.eta)));
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
pub enum Objective<'a> {
    Population(&'a DVector<f64>),
    Empirical(&'a Dataset),
}

impl Objective<'_> {
    /// Loss at `net` and the residual direction `∂loss/∂β`.
    fn loss_and_direction(&self, beta: &DVector<f64>) -> (f64, DVector<f64>) {
        match self {
            Objective::Population(target) => {
                let r = beta - *target;
                (0.5 * r.norm_squared(), r)
            }
            Objective::Empirical(data) => {
                let n = data.n() as f64;
                let resid = &data.x * beta - &data.y;
                let loss = 0.5 * resid.norm_squared() / n;
                (loss, data.x.tr_mul(&resid) / n)
            }
        }
    }

    pub fn loss(&self, net: &LinearNet) -> f64 {
        self.loss_and_direction(&end_to_end_beta(net)).0
    }
}

#[derive(Debug, Clone)]
pub struct FlowOutcome {
    pub net: LinearNet,
    pub final_loss: f64,
    pub steps: usize,
    /// Maximum of [`balance_defect`] over the checkpoints, measured against
    /// the record's `D_l(0)`.
    pub max_balance_drift: f64,
    /// `(step, loss)` at step 0, every [`CHECKPOINT_EVERY`] steps, and at the end.
    pub loss_trace: Vec<(usize, f64)>,
    pub converged: bool,
}

/// Explicit Euler discretization `W ← W − η∇W` of gradient flow.
pub fn run_gradient_flow(net: &LinearNet, objective: Objective<'_>, cfg: &FlowConfig) -> Result<FlowOutcome> {
    cfg.validate()?;
    let d = match objective {
        Objective::Population(b) => b.len(),
        Objective::Empirical(data) => data.d(),
    };
    check_dim(net, d)?;

    let mut net = net.clone();
    let (beta, mut suffix) = forward(&net.layers);
    let (mut loss, mut dir) = objective.loss_and_direction(&beta);
    let initial = loss;
    let limit = DIVERGENCE_FACTOR * initial.max(f64::MIN_POSITIVE);
    let mut trace = vec![(0usize, loss)];
    let mut max_drift = balance_defect(&net);
    let mut steps = 0usize;

    while loss > cfg.loss_tol && steps < cfg.max_steps {
        let grads = backprop(&net.layers, &suffix, &dir);
        for (w, g) in net.layers.iter_mut().zip(&grads) {
            w.zip_apply(g, |a, b| *a -= cfg.eta * b);
        }
        steps += 1;
        let (beta, next_suffix) = forward(&net.layers);
        suffix = next_suffix;
        let (l, g) = objective.loss_and_direction(&beta);
        loss = l;
        dir = g;
        if !loss.is_finite() || loss > limit {
            return Err(TlabError::Diverged {
                step: steps,
                loss,
                initial,
                limit,
            });
        }
        if steps % CHECKPOINT_EVERY == 0 {
            trace.push((steps, loss));
            max_drift = max_drift.max(balance_defect(&net));
        }
    }
    if trace.last().map(|&(s, _)| s) != Some(steps) {
        trace.push((steps, loss));
    }
    max_drift = max_drift.max(balance_defect(&net));
    Ok(FlowOutcome {
        converged: loss <= cfg.loss_tol,
        net,
        final_loss: loss,
        steps,
        max_balance_drift: max_drift,
        loss_trace: trace,
    })
}

/// `max_l ‖(W_lᵀW_l − W_{l+1}W_{l+1}ᵀ) − D_l(0)‖_F`.
pub fn balance_defect(net: &LinearNet) -> f64 {
    balance_matrices(&net.layers)
        .iter()
        .zip(&net.init_record.balance)
        .map(|(now, start)| (now - start).norm())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsificationReport {
    /// `s₁² / ‖Φ‖_F²`.
    pub top_energy_ratio: f64,
    /// `|u₁ᵀβ_s| / ‖β_s‖` for the top left singular vector `u₁` of `Φ`.
    pub alignment: f64,
}

pub fn sparsification_report(net: &LinearNet, beta_src: &DVector<f64>) -> Result<SparsificationReport> {
    check_dim(net, beta_src.len())?;
    let phi = net.feature_map();
    let fro = phi.norm_squared();
    if fro == 0.0 {
        return Err(TlabError::Degenerate("feature map is identically zero".into()));
    }
    let svd = sorted_svd(&phi);
    let s1 = svd.singular_values[0];
    let u1 = svd.u.column(0);
    Ok(SparsificationReport {
        top_energy_ratio: (s1 * s1 / fro).min(1.0),
        alignment: (u1.dot(beta_src).abs() / beta_src.norm()).min(1.0),
    })
}

/// `X⁺ y` via SVD, singular values below `max(n, d)·ε·s₁` treated as zero.
pub fn min_norm_solution(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    if x.nrows() != y.len() {
        return Err(TlabError::ShapeMismatch(format!(
            "X has {} rows, y has {} entries",
            x.nrows(),
            y.len()
        )));
    }
    Ok(pinv_solve(x, y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomProjectionReport {
    pub n: usize,
    pub d: usize,
    pub trials: usize,
    /// Monte-Carlo mean and standard error of `‖P_row(X) β‖²` for unit `β`.
    pub projection_mean: f64,
    pub projection_se: f64,
    /// Monte-Carlo mean and standard error of `tr((X⁺)ᵀX⁺)`.
    pub trace_mean: f64,
    pub trace_se: f64,
}

impl RandomProjectionReport {
    pub fn gamma(&self) -> f64 {
        self.n as f64 / self.d as f64
    }

    /// High-dimensional limit `min(γ, 1)` of the projection energy.
    pub fn projection_limit(&self) -> f64 {
        self.gamma().min(1.0)
    }

    /// High-dimensional limit `γ/(1−γ)` or `1/(γ−1)` of the trace.
    pub fn trace_limit(&self) -> f64 {
        let g = self.gamma();
        if g < 1.0 {
            g / (1.0 - g)
        } else if g > 1.0 {
            1.0 / (g - 1.0)
        } else {
            f64::INFINITY
        }
    }
}

/// Monte-Carlo estimates over `trials` Gaussian `n×d` matrices.
pub fn random_projection_checks(n: usize, d: usize, trials: usize, seed: u64) -> Result<RandomProjectionReport> {
    if n == 0 || d == 0 || trials < 2 {
        return Err(invalid("need n, d >= 1 and at least two trials"));
    }
    let mut proj = Vec::with_capacity(trials);
    let mut trace = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = rng_from(crate::rng::stream_seed(seed, 0, t as u64));
        let x = gaussian_matrix(&mut rng, n, d);
        let beta = sphere_vector(&mut rng, d);
        let svd = sorted_svd(&x);
        let cutoff = crate::linalg::default_cutoff(n, d, svd.singular_values[0]);
        let rank = svd.rank_above(cutoff);
        let v = svd.v_t.rows(0, rank);
        proj.push((v * &beta).norm_squared());
        trace.push(svd.singular_values.iter().take(rank).map(|s| 1.0 / (s * s)).sum());
    }
    let (projection_mean, projection_se) = mean_and_stderr(&proj);
    let (trace_mean, trace_se) = mean_and_stderr(&trace);
    Ok(RandomProjectionReport {
        n,
        d,
        trials,
        projection_mean,
        projection_se,
        trace_mean,
        trace_se,
    })
}
