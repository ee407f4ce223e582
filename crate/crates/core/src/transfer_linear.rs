//! Transfer protocols on top of a deep linear net pretrained on the source
//! task: linear transfer (refit the last layer, optionally with a ridge
//! penalty), fine-tuning of every layer, and the scratch baseline.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::deep_linear::{init_balanced, run_gradient_flow, FlowConfig, FlowOutcome, InitMode, LinearNet, Objective};
use crate::error::{invalid, Result, TlabError};
use crate::linalg::{mean_and_stderr, pinv_solve, sorted_svd};
use crate::rng::stream_seed;
use crate::task_gen::{make_task_pair, sample_dataset, Dataset, TaskPair};

/// Singular values of the frozen feature map below this fraction of the
/// largest one are discarded before the last layer is refit.
///
/// A net pretrained from a small initialization keeps residual directions of
/// size about `α√d`. They are numerically far from zero, so a plain
/// pseudoinverse would use them as extra features and the transfer predictor
/// would drift towards the scratch solution.
pub const FEATURE_REL_CUTOFF: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "lambda")]
pub enum TransferMethod {
    Linear,
    Ridge(f64),
    Finetune,
    Scratch,
}

impl TransferMethod {
    pub fn name(&self) -> &'static str {
        match self {
            TransferMethod::Linear => "linear",
            TransferMethod::Ridge(_) => "ridge",
            TransferMethod::Finetune => "finetune",
            TransferMethod::Scratch => "scratch",
        }
    }

    pub fn lambda(&self) -> f64 {
        match self {
            TransferMethod::Ridge(l) => *l,
            _ => 0.0,
        }
    }
}

impl fmt::Display for TransferMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TransferMethod::Ridge(l) => write!(f, "ridge({l})"),
            other => f.write_str(other.name()),
        }
    }
}

/// A fitted target predictor with its generalization error `‖β̂ − β_t‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferOutcome {
    pub beta_hat: DVector<f64>,
    pub ge: f64,
    pub method: TransferMethod,
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub theta: f64,
    pub sigma: f64,
}

impl TransferOutcome {
    fn new(beta_hat: DVector<f64>, method: TransferMethod, pair: &TaskPair, data: &Dataset) -> Self {
        Self {
            ge: (&beta_hat - &pair.beta_tgt).norm_squared(),
            beta_hat,
            method,
            seed: data.seed,
            n: data.n(),
            d: data.d(),
            theta: pair.theta,
            sigma: data.sigma,
        }
    }
}

fn check_inputs(net: &LinearNet, pair: &TaskPair, data: &Dataset) -> Result<()> {
    if net.dim() != data.d() || pair.d != data.d() {
        return Err(TlabError::ShapeMismatch(format!(
            "net d={}, task d={}, data d={}",
            net.dim(),
            pair.d,
            data.d()
        )));
    }
    Ok(())
}

/// Trains a fresh net on the population source loss `½‖β − β_s‖²`.
pub fn pretrain_source(
    beta_src: &DVector<f64>,
    depth: usize,
    alpha: f64,
    mode: InitMode,
    cfg: &FlowConfig,
    seed: u64,
) -> Result<FlowOutcome> {
    let net = init_balanced(depth, beta_src.len(), alpha, 1.0, mode, seed)?;
    run_gradient_flow(&net, Objective::Population(beta_src), cfg)
}

/// Freezes `W₁ … W_{L−1}` and refits `W_L` on the target data.
///
/// With `Φ` the frozen product, the design is `XΦ`. For `λ = 0` the new last
/// layer is the minimum-norm least-squares solution, for `λ > 0` it is
/// `(ΦᵀXᵀXΦ + nλI)⁻¹ΦᵀXᵀy`. Uses [`FEATURE_REL_CUTOFF`].
pub fn linear_transfer(pretrained: &LinearNet, pair: &TaskPair, data: &Dataset, lambda: f64) -> Result<TransferOutcome> {
    linear_transfer_with_cutoff(pretrained, pair, data, lambda, FEATURE_REL_CUTOFF)
}

pub fn linear_transfer_with_cutoff(
    pretrained: &LinearNet,
    pair: &TaskPair,
    data: &Dataset,
    lambda: f64,
    rel_cutoff: f64,
) -> Result<TransferOutcome> {
    check_inputs(pretrained, pair, data)?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(invalid(format!("ridge parameter must be finite and >= 0, got {lambda}")));
    }
    if !(0.0..1.0).contains(&rel_cutoff) {
        return Err(invalid(format!("feature cutoff must lie in [0, 1), got {rel_cutoff}")));
    }
    let phi = truncated_features(&pretrained.feature_map(), rel_cutoff)?;
    let design = &data.x * &phi;
    let w_last = if lambda == 0.0 {
        pinv_solve(&design, &data.y)
    } else {
        let n = data.n() as f64;
        let mut gram = design.tr_mul(&design);
        for i in 0..gram.nrows() {
            gram[(i, i)] += n * lambda;
        }
        let rhs = design.tr_mul(&data.y);
        gram.cholesky()
            .ok_or_else(|| TlabError::Degenerate("ridge system is not positive definite".into()))?
            .solve(&rhs)
    };
    let beta_hat = &phi * &w_last;
    let method = if lambda == 0.0 {
        TransferMethod::Linear
    } else {
        TransferMethod::Ridge(lambda)
    };
    Ok(TransferOutcome::new(beta_hat, method, pair, data))
}

fn truncated_features(phi: &DMatrix<f64>, rel_cutoff: f64) -> Result<DMatrix<f64>> {
    let svd = sorted_svd(phi);
    let s_max = svd.singular_values[0];
    if s_max == 0.0 {
        return Err(TlabError::Degenerate("pretrained feature map is zero".into()));
    }
    let rank = svd.rank_above(rel_cutoff * s_max).max(1);
    Ok(svd.truncated(rank))
}

/// Closed-form linear-transfer predictor `b·β_s` for perfectly sparsified
/// features, `b = β_sᵀXᵀy / ‖Xβ_s‖²`.
pub fn linear_transfer_closed_form(beta_src: &DVector<f64>, data: &Dataset) -> DVector<f64> {
    let xb = &data.x * beta_src;
    beta_src * (xb.dot(&data.y) / xb.norm_squared())
}

/// Runs empirical gradient flow on every layer, starting from the pretrained weights.
pub fn fine_tune(pretrained: &LinearNet, pair: &TaskPair, data: &Dataset, cfg: &FlowConfig) -> Result<TransferOutcome> {
    check_inputs(pretrained, pair, data)?;
    let out = run_gradient_flow(pretrained, Objective::Empirical(data), cfg)?;
    let beta_hat = crate::deep_linear::end_to_end_beta(&out.net);
    Ok(TransferOutcome::new(beta_hat, TransferMethod::Finetune, pair, data))
}

/// The fine-tuned predictor predicted for `n < d`: `X⁺y + (I − P_row(X))β_s`.
pub fn finetune_closed_form(beta_src: &DVector<f64>, data: &Dataset) -> DVector<f64> {
    let svd = sorted_svd(&data.x);
    let s_max = svd.singular_values[0];
    let rank = svd.rank_above(crate::linalg::default_cutoff(data.n(), data.d(), s_max));
    let beta_sc = svd.pinv_apply(&data.y, rank);
    let proj = svd.row_projector(rank);
    beta_sc + beta_src - proj * beta_src
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScratchMode {
    /// `X⁺y` directly.
    Oracle,
    /// Gradient flow from a fresh small initialization.
    Flow {
        depth: usize,
        alpha: f64,
        init: InitMode,
        seed: u64,
    },
}

pub fn scratch_train(pair: &TaskPair, data: &Dataset, cfg: &FlowConfig, mode: ScratchMode) -> Result<TransferOutcome> {
    if pair.d != data.d() {
        return Err(TlabError::ShapeMismatch(format!("task d={} vs data d={}", pair.d, data.d())));
    }
    let beta_hat = match mode {
        ScratchMode::Oracle => pinv_solve(&data.x, &data.y),
        ScratchMode::Flow {
            depth,
            alpha,
            init,
            seed,
        } => {
            let net = init_balanced(depth, data.d(), alpha, 1.0, init, seed)?;
            let out = run_gradient_flow(&net, Objective::Empirical(data), cfg)?;
            crate::deep_linear::end_to_end_beta(&out.net)
        }
    };
    Ok(TransferOutcome::new(beta_hat, TransferMethod::Scratch, pair, data))
}

/// Everything needed to estimate the transferability of one grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferabilityConfig {
    pub depth: usize,
    pub d: usize,
    pub n: usize,
    pub theta: f64,
    pub sigma: f64,
    pub method: TransferMethod,
    pub alpha: f64,
    pub init_mode: InitMode,
    pub pretrain: FlowConfig,
    pub finetune: FlowConfig,
    pub base_seed: u64,
}

impl TransferabilityConfig {
    /// Defaults for a given grid point: `L = 2`, `α = 1e-5`, gaussian init,
    /// pretraining to a loss of `1e-20`.
    pub fn new(d: usize, n: usize, theta: f64, sigma: f64, method: TransferMethod) -> Self {
        Self {
            depth: 2,
            d,
            n,
            theta,
            sigma,
            method,
            alpha: 1e-5,
            init_mode: InitMode::Gaussian,
            pretrain: pretrain_defaults(),
            finetune: FlowConfig {
                eta: 0.02,
                ..FlowConfig::default()
            },
            base_seed: 0,
        }
    }
}

/// Population pretraining settings used throughout: the source loss is driven
/// to round-off so that `β(net) = β_s` holds to about `1e-10`.
pub fn pretrain_defaults() -> FlowConfig {
    FlowConfig {
        eta: 1e-2,
        max_steps: 200_000,
        loss_tol: 1e-20,
    }
}

/// Paired replicates of scratch versus transfer on identical datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferabilityEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub scratch_ge: Vec<f64>,
    pub transfer_ge: Vec<f64>,
}

/// Seeds used by [`transferability_estimate`] for replicate `r`:
/// task pair, pretraining init, dataset.
pub fn replicate_seeds(base: u64, r: u64) -> (u64, u64, u64) {
    (stream_seed(base, 0, r), stream_seed(base, 1, r), stream_seed(base, 2, r))
}

/// Transfers one pretrained net and the scratch oracle on the same dataset.
pub fn paired_replicate(
    pretrained: &LinearNet,
    pair: &TaskPair,
    data: &Dataset,
    method: TransferMethod,
    finetune: &FlowConfig,
) -> Result<(TransferOutcome, TransferOutcome)> {
    let scratch = scratch_train(pair, data, finetune, ScratchMode::Oracle)?;
    let transfer = match method {
        TransferMethod::Linear => linear_transfer(pretrained, pair, data, 0.0)?,
        TransferMethod::Ridge(l) => linear_transfer(pretrained, pair, data, l)?,
        TransferMethod::Finetune => fine_tune(pretrained, pair, data, finetune)?,
        TransferMethod::Scratch => scratch.clone(),
    };
    Ok((scratch, transfer))
}

/// Mean and standard error of `ge_scratch − ge_transfer` over `n_seeds` paired replicates.
pub fn transferability_estimate(cfg: &TransferabilityConfig, n_seeds: usize) -> Result<TransferabilityEstimate> {
    if n_seeds < 2 {
        return Err(invalid("transferability needs at least two seeds"));
    }
    let mut scratch_ge = Vec::with_capacity(n_seeds);
    let mut transfer_ge = Vec::with_capacity(n_seeds);
    for r in 0..n_seeds as u64 {
        let (pair_seed, init_seed, data_seed) = replicate_seeds(cfg.base_seed, r);
        let pair = make_task_pair(cfg.d, cfg.theta, pair_seed)?;
        let pre = pretrain_source(&pair.beta_src, cfg.depth, cfg.alpha, cfg.init_mode, &cfg.pretrain, init_seed)?;
        let data = sample_dataset(&pair.beta_tgt, cfg.n, cfg.sigma, data_seed)?;
        let (sc, tr) = paired_replicate(&pre.net, &pair, &data, cfg.method, &cfg.finetune)?;
        scratch_ge.push(sc.ge);
        transfer_ge.push(tr.ge);
    }
    let diffs: Vec<f64> = scratch_ge.iter().zip(&transfer_ge).map(|(s, t)| s - t).collect();
    let (mean, stderr) = mean_and_stderr(&diffs);
    Ok(TransferabilityEstimate {
        mean,
        stderr,
        scratch_ge,
        transfer_ge,
    })
}
