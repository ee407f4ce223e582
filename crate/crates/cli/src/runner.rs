//! Grid expansion and execution.
//!
//! Work is split into units that never share state. A unit's random streams
//! come from `stream_seed(base, stream, replicate)`, where `stream` indexes
//! the task coordinates of the unit. Treatment axes (ridge `λ`, ablation `μ`)
//! are not part of the stream, so every treatment of a replicate sees the same
//! task pair and the same dataset and comparisons across them are paired.

use std::collections::{HashMap, HashSet};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tlab_core::linalg::mean_and_stderr;
use tlab_core::relu_mf::{
    ablate_teacher, ablation_count, ablation_order, make_teacher, phase_boundary_predict, power_law_fit,
    projection_norms, random_student, relu_generalization_error, relu_linear_transfer, relu_scratch,
    sample_teacher_dataset, train_relu, ReluExperiment, ReluObjective, DEFAULT_EIG_CUTOFF,
};
use tlab_core::rng::{mix64, stream_seed};
use tlab_core::task_gen::{empirical_w1, joint_samples, kl_divergence, make_task_pair, sample_dataset};
use tlab_core::theory::{
    classify, finetune_ge, finetune_transferability, linear_transfer_ge, linear_transferability, ridge_transfer_ge,
    ridge_transferability, scratch_ge, Extended, Method,
};
use tlab_core::transfer_linear::{
    fine_tune, linear_transfer, pretrain_source, replicate_seeds, scratch_train, ScratchMode,
};
use tlab_core::{ReluNet, TlabError};

use crate::config::{samples_for, ExperimentConfig, Kind, ScratchSolver, TheoryMethod};

/// Column order of `results.csv`.
pub const COLUMNS: [&str; 16] = [
    "method",
    "L",
    "d",
    "n",
    "gamma",
    "theta",
    "sigma",
    "lambda",
    "mu",
    "seed",
    "ge_transfer",
    "ge_scratch",
    "transferability",
    "theory_transfer",
    "theory_scratch",
    "status",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Theory,
    Diverged,
    Error,
}

impl Status {
    pub fn is_good(self) -> bool {
        matches!(self, Status::Ok | Status::Theory)
    }

    fn name(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::Theory => "theory",
            Status::Diverged => "diverged",
            Status::Error => "error",
        }
    }
}

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub method: String,
    #[serde(rename = "L")]
    pub depth: Option<usize>,
    pub d: Option<usize>,
    pub n: Option<usize>,
    pub gamma: Option<f64>,
    pub theta: Option<f64>,
    pub sigma: Option<f64>,
    pub lambda: Option<f64>,
    pub mu: Option<f64>,
    pub seed: Option<u64>,
    pub ge_transfer: f64,
    pub ge_scratch: f64,
    pub transferability: f64,
    pub theory_transfer: f64,
    pub theory_scratch: f64,
    pub status: Status,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Row {
    fn skeleton(method: &str) -> Self {
        Row {
            method: method.to_string(),
            depth: None,
            d: None,
            n: None,
            gamma: None,
            theta: None,
            sigma: None,
            lambda: None,
            mu: None,
            seed: None,
            ge_transfer: f64::NAN,
            ge_scratch: f64::NAN,
            transferability: f64::NAN,
            theory_transfer: f64::NAN,
            theory_scratch: f64::NAN,
            status: Status::Error,
        }
    }

    /// Fields in [`COLUMNS`] order. Floats use the shortest round-trip form.
    pub fn record(&self) -> [String; 16] {
        [
            self.method.clone(),
            opt(self.depth),
            opt(self.d),
            opt(self.n),
            opt(self.gamma),
            opt(self.theta),
            opt(self.sigma),
            opt(self.lambda),
            opt(self.mu),
            opt(self.seed),
            self.ge_transfer.to_string(),
            self.ge_scratch.to_string(),
            self.transferability.to_string(),
            self.theory_transfer.to_string(),
            self.theory_scratch.to_string(),
            self.status.name().to_string(),
        ]
    }

    /// Identity of the row: every coordinate column.
    pub fn key(&self) -> String {
        self.record()[..10].join(",")
    }

    fn fail(&mut self, err: &TlabError) {
        self.status = match err {
            TlabError::Diverged { .. } => Status::Diverged,
            _ => Status::Error,
        };
        self.ge_transfer = f64::NAN;
        self.ge_scratch = f64::NAN;
        self.transferability = f64::NAN;
    }
}

/// Rows of an earlier run that can be reused, keyed by [`Row::key`].
#[derive(Debug, Default)]
pub struct Previous {
    rows: HashMap<String, Row>,
}

impl Previous {
    pub fn new(rows: Vec<Row>) -> Self {
        Self {
            rows: rows
                .into_iter()
                .filter(|r| r.status.is_good())
                .map(|r| (r.key(), r))
                .collect(),
        }
    }

    fn get(&self, skeleton: &Row) -> Option<&Row> {
        self.rows.get(&skeleton.key())
    }
}

/// Per-row bookkeeping that does not go into the CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMeta {
    pub cell: usize,
    /// Wall-clock seconds of the unit that produced the row.
    pub seconds: f64,
    pub reused: bool,
}

/// Distance between source and target joint distributions for one task cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskMetrics {
    pub cell: usize,
    pub gamma: f64,
    pub theta: f64,
    pub sigma: f64,
    pub kl: f64,
    pub w1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationSummary {
    pub mu: f64,
    pub perp: f64,
    pub perp_fraction: f64,
    /// Sample size where the fitted scratch curve meets `perp`.
    pub predicted_boundary: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReluFit {
    pub amplitude: f64,
    pub exponent: f64,
    /// `‖f*‖² + σ²`, the normaliser of the transferability column.
    pub target_variance: f64,
    pub ablations: Vec<AblationSummary>,
}

#[derive(Debug, Default)]
pub struct RunOutput {
    pub rows: Vec<Row>,
    pub meta: Vec<RowMeta>,
    pub metrics: Vec<TaskMetrics>,
    pub relu: Option<ReluFit>,
}

impl RunOutput {
    fn push(&mut self, row: Row, meta: RowMeta) {
        self.rows.push(row);
        self.meta.push(meta);
    }

    /// Sorts by (cell, seed).
    fn finish(mut self) -> Self {
        let mut order: Vec<usize> = (0..self.rows.len()).collect();
        order.sort_by_key(|&i| (self.meta[i].cell, self.rows[i].seed));
        self.rows = order.iter().map(|&i| self.rows[i].clone()).collect();
        self.meta = order.iter().map(|&i| self.meta[i].clone()).collect();
        self
    }
}

/// Runs every cell of `cfg`, reusing good rows from `previous`.
pub fn execute(cfg: &ExperimentConfig, previous: &Previous) -> RunOutput {
    match cfg.kind {
        Kind::TheorySurface => theory_surface(cfg, cfg.method.unwrap_or(TheoryMethod::Linear)),
        Kind::ReluHeatmap => relu_heatmap(cfg, previous),
        _ => linear_kind(cfg, previous),
    }
}

fn ext(v: Extended) -> f64 {
    v.to_f64()
}

/// Closed-form rows over the γ × θ × σ (× λ for ridge) grid.
pub fn theory_surface(cfg: &ExperimentConfig, method: TheoryMethod) -> RunOutput {
    let g = &cfg.grid;
    let lambdas: &[f64] = if method == TheoryMethod::Ridge { &g.lambda } else { &[0.0] };
    let mut out = RunOutput::default();
    let mut cell = 0;
    for &gamma in &g.gamma {
        for &theta in &g.theta {
            for &sigma in &g.sigma {
                for &lambda in lambdas {
                    let mut row = Row::skeleton(method.name());
                    row.gamma = Some(gamma);
                    row.theta = Some(theta);
                    row.sigma = Some(sigma);
                    row.status = Status::Theory;
                    row.theory_scratch = ext(scratch_ge(gamma, sigma));
                    let (transfer, t) = match method {
                        TheoryMethod::Linear => (
                            linear_transfer_ge(theta, sigma, f64::INFINITY),
                            ext(linear_transferability(gamma, theta, sigma)),
                        ),
                        TheoryMethod::Finetune => (
                            ext(finetune_ge(gamma, theta, sigma)),
                            finetune_transferability(gamma, theta),
                        ),
                        TheoryMethod::Ridge => {
                            row.lambda = Some(lambda);
                            (
                                ridge_transfer_ge(theta, lambda),
                                ext(ridge_transferability(gamma, theta, sigma, lambda)),
                            )
                        }
                    };
                    row.theory_transfer = transfer;
                    row.ge_transfer = transfer;
                    row.ge_scratch = row.theory_scratch;
                    row.transferability = t;
                    out.push(
                        row,
                        RowMeta {
                            cell,
                            seconds: 0.0,
                            reused: false,
                        },
                    );
                    cell += 1;
                }
            }
        }
    }
    out.finish()
}

#[derive(Debug, Clone, Copy)]
struct TaskCell {
    index: usize,
    gamma: f64,
    theta: f64,
    sigma: f64,
    n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Treatment {
    Linear,
    Ridge(f64),
    Finetune,
}

impl Treatment {
    fn name(self) -> &'static str {
        match self {
            Treatment::Linear => "linear",
            Treatment::Ridge(_) => "ridge",
            Treatment::Finetune => "finetune",
        }
    }
}

fn task_cells(cfg: &ExperimentConfig) -> Vec<TaskCell> {
    let g = &cfg.grid;
    let mut cells = Vec::new();
    for &gamma in &g.gamma {
        for &theta in &g.theta {
            for &sigma in &g.sigma {
                cells.push(TaskCell {
                    index: cells.len(),
                    gamma,
                    theta,
                    sigma,
                    n: samples_for(gamma, cfg.model.d),
                });
            }
        }
    }
    cells
}

fn treatments(cfg: &ExperimentConfig) -> Vec<Treatment> {
    match cfg.kind {
        Kind::RidgeSweep => cfg.grid.lambda.iter().map(|&l| Treatment::Ridge(l)).collect(),
        Kind::FinetuneSweep => vec![Treatment::Finetune],
        _ => vec![Treatment::Linear],
    }
}

/// Coordinates and closed-form columns of a simulated linear row.
fn linear_row(cfg: &ExperimentConfig, task: &TaskCell, treat: Treatment, rep: u64) -> Row {
    let mut row = Row::skeleton(treat.name());
    row.depth = Some(cfg.model.depth);
    row.d = Some(cfg.model.d);
    row.n = Some(task.n);
    row.gamma = Some(task.gamma);
    row.theta = Some(task.theta);
    row.sigma = Some(task.sigma);
    row.seed = Some(rep);
    row.theory_scratch = ext(scratch_ge(task.gamma, task.sigma));
    row.theory_transfer = match treat {
        Treatment::Linear => linear_transfer_ge(task.theta, task.sigma, task.n as f64),
        Treatment::Ridge(l) => {
            row.lambda = Some(l);
            ridge_transfer_ge(task.theta, l)
        }
        Treatment::Finetune => ext(finetune_ge(task.gamma, task.theta, task.sigma)),
    };
    row
}

/// Seeds of one linear replicate: task pair, pretraining init, dataset, scratch init.
pub fn linear_unit_seeds(base: u64, stream: usize, rep: u64) -> (u64, u64, u64, u64) {
    let root = stream_seed(base, stream as u64, rep);
    let (pair, init, data) = replicate_seeds(root, 0);
    (pair, init, data, stream_seed(root, 3, 0))
}

fn run_linear_unit(cfg: &ExperimentConfig, task: &TaskCell, treats: &[Treatment], rep: u64, rows: &mut [Row]) {
    let (pair_seed, init_seed, data_seed, scratch_seed) = linear_unit_seeds(cfg.seeds.base, task.index, rep);
    let result = (|| -> Result<(), TlabError> {
        let pair = make_task_pair(cfg.model.d, task.theta, pair_seed)?;
        let data = sample_dataset(&pair.beta_tgt, task.n, task.sigma, data_seed)?;
        let mode = match cfg.scratch {
            ScratchSolver::Oracle => ScratchMode::Oracle,
            ScratchSolver::Flow => ScratchMode::Flow {
                depth: cfg.model.depth,
                alpha: cfg.model.alpha,
                init: cfg.model.init_mode,
                seed: scratch_seed,
            },
        };
        let scratch = scratch_train(&pair, &data, &cfg.train.flow(), mode)?;
        let pre = pretrain_source(
            &pair.beta_src,
            cfg.model.depth,
            cfg.model.alpha,
            cfg.model.init_mode,
            &cfg.pretrain.flow(),
            init_seed,
        )?;
        for (row, &treat) in rows.iter_mut().zip(treats) {
            let outcome = match treat {
                Treatment::Linear => linear_transfer(&pre.net, &pair, &data, 0.0),
                Treatment::Ridge(l) => linear_transfer(&pre.net, &pair, &data, l),
                Treatment::Finetune => fine_tune(&pre.net, &pair, &data, &cfg.train.flow()),
            };
            match outcome {
                Ok(o) => {
                    row.ge_transfer = o.ge;
                    row.ge_scratch = scratch.ge;
                    row.transferability = scratch.ge - o.ge;
                    row.status = Status::Ok;
                }
                Err(e) => row.fail(&e),
            }
        }
        Ok(())
    })();
    if let Err(e) = result {
        rows.iter_mut().for_each(|r| r.fail(&e));
    }
}

fn linear_kind(cfg: &ExperimentConfig, previous: &Previous) -> RunOutput {
    let tasks = task_cells(cfg);
    let treats = treatments(cfg);
    let units: Vec<(TaskCell, u64)> = tasks
        .iter()
        .flat_map(|t| (0..cfg.seeds.count as u64).map(move |r| (*t, r)))
        .collect();

    let results: Vec<(Vec<Row>, f64, bool)> = units
        .par_iter()
        .map(|(task, rep)| {
            let mut rows: Vec<Row> = treats.iter().map(|&t| linear_row(cfg, task, t, *rep)).collect();
            let reused: Option<Vec<Row>> = rows.iter().map(|r| previous.get(r).cloned()).collect();
            if let Some(old) = reused {
                return (old, 0.0, true);
            }
            let start = Instant::now();
            run_linear_unit(cfg, task, &treats, *rep, &mut rows);
            (rows, start.elapsed().as_secs_f64(), false)
        })
        .collect();

    let mut out = RunOutput::default();
    for ((task, _), (rows, seconds, reused)) in units.iter().zip(results) {
        for (t, row) in rows.into_iter().enumerate() {
            let cell = task.index * treats.len() + t;
            out.push(row, RowMeta { cell, seconds, reused });
        }
    }
    if cfg.kind == Kind::MetricsScatter {
        out.metrics = task_metrics(cfg, &tasks);
    }
    out.finish()
}

/// KL and empirical W1 between the source and target joint laws of each task cell,
/// using the task pair of replicate 0.
fn task_metrics(cfg: &ExperimentConfig, tasks: &[TaskCell]) -> Vec<TaskMetrics> {
    tasks
        .par_iter()
        .map(|task| {
            let (pair_seed, ..) = linear_unit_seeds(cfg.seeds.base, task.index, 0);
            let root = stream_seed(cfg.seeds.base, task.index as u64, u64::MAX);
            let computed = (|| -> Result<(f64, f64), TlabError> {
                let pair = make_task_pair(cfg.model.d, task.theta, pair_seed)?;
                let kl = kl_divergence(&pair, task.sigma)?;
                let a = joint_samples(&pair.beta_src, cfg.w1_samples, task.sigma, mix64(root))?;
                let b = joint_samples(&pair.beta_tgt, cfg.w1_samples, task.sigma, mix64(root ^ 1))?;
                Ok((kl, empirical_w1(&a, &b)?))
            })();
            let (kl, w1) = computed.unwrap_or((f64::NAN, f64::NAN));
            TaskMetrics {
                cell: task.index,
                gamma: task.gamma,
                theta: task.theta,
                sigma: task.sigma,
                kl,
                w1,
            }
        })
        .collect()
}

/// Teacher, pretraining and dataset seeds of a ReLU run.
pub fn relu_seeds(base: u64) -> (u64, u64, u64) {
    let teacher = stream_seed(base, u64::MAX, 0);
    (teacher, mix64(teacher ^ 0xA5A5_A5A5), mix64(teacher ^ 0x5EED))
}

/// Seed of the dataset for sample-size column `n_index`, replicate `rep`.
pub fn relu_data_seed(base: u64, n_index: usize, rep: u64) -> u64 {
    stream_seed(base, n_index as u64, rep)
}

pub fn relu_experiment(cfg: &ExperimentConfig) -> ReluExperiment {
    ReluExperiment {
        m: cfg.model.m,
        m_star: cfg.model.m_star,
        d: cfg.model.d,
        sigma: cfg.grid.sigma[0],
        pretrain: cfg.pretrain.relu(),
        scratch: cfg.train.relu(),
        teacher_seed: relu_seeds(cfg.seeds.base).0,
    }
}

/// Pretrains a student on the source teacher left after nested ablation at `mu`.
pub fn relu_pretrain(exp: &ReluExperiment, target: &ReluNet, order: &[usize], mu: f64, student_seed: u64) -> Result<ReluNet, TlabError> {
    let removed = ablation_count(exp.m_star, mu)?;
    let pair = ablate_teacher(target.clone(), order[..removed].to_vec())?;
    let student = random_student(exp.m, exp.d, student_seed)?;
    Ok(train_relu(&student, ReluObjective::Population(&pair.source), &exp.pretrain)?.net)
}

fn relu_heatmap(cfg: &ExperimentConfig, previous: &Previous) -> RunOutput {
    let exp = relu_experiment(cfg);
    let (teacher_seed, order_seed, student_seed) = relu_seeds(cfg.seeds.base);
    let mus = &cfg.grid.mu;
    let ns = &cfg.grid.n;
    let reps = cfg.seeds.count as u64;
    let mut out = RunOutput::default();

    let target = match make_teacher(exp.m_star, exp.d, teacher_seed) {
        Ok(t) => t,
        Err(_) => return out,
    };
    let order = ablation_order(exp.m_star, order_seed);
    let variance = tlab_core::relu_mf::l2_norm_sq(&target) + exp.sigma * exp.sigma;

    let skeleton = |mu: f64, n: usize, rep: u64| {
        let mut row = Row::skeleton("relu");
        row.depth = Some(2);
        row.d = Some(exp.d);
        row.n = Some(n);
        row.sigma = Some(exp.sigma);
        row.mu = Some(mu);
        row.seed = Some(rep);
        row
    };
    let mut missing: HashSet<(usize, usize, u64)> = HashSet::new();
    for (i, &mu) in mus.iter().enumerate() {
        for (j, &n) in ns.iter().enumerate() {
            for rep in 0..reps {
                if previous.get(&skeleton(mu, n, rep)).is_none() {
                    missing.insert((i, j, rep));
                }
            }
        }
    }

    let need_mu: Vec<usize> = (0..mus.len())
        .filter(|i| missing.iter().any(|(a, _, _)| a == i))
        .collect();
    let pretrained: HashMap<usize, (Result<ReluNet, TlabError>, f64)> = need_mu
        .par_iter()
        .map(|&i| {
            let start = Instant::now();
            let net = relu_pretrain(&exp, &target, &order, mus[i], student_seed);
            (i, (net, start.elapsed().as_secs_f64()))
        })
        .collect();

    let mut need_scratch: Vec<(usize, u64)> = missing.iter().map(|&(_, j, r)| (j, r)).collect();
    need_scratch.sort_unstable();
    need_scratch.dedup();
    type ScratchRun = (Result<(tlab_core::Dataset, f64), TlabError>, f64);
    let scratch: HashMap<(usize, u64), ScratchRun> = need_scratch
        .par_iter()
        .map(|&(j, rep)| {
            let start = Instant::now();
            let seed = relu_data_seed(cfg.seeds.base, j, rep);
            let run = sample_teacher_dataset(&target, ns[j], exp.sigma, seed).and_then(|data| {
                let net = relu_scratch(&exp, &data, mix64(seed))?;
                Ok((data, relu_generalization_error(&net, &target)?))
            });
            ((j, rep), (run, start.elapsed().as_secs_f64()))
        })
        .collect();

    let mut todo: Vec<(usize, usize, u64)> = missing.into_iter().collect();
    todo.sort_unstable();
    let fresh: Vec<(Row, RowMeta)> = todo
        .par_iter()
        .map(|&(i, j, rep)| {
            let mut row = skeleton(mus[i], ns[j], rep);
            let (pre, pre_secs) = &pretrained[&i];
            let (sc, sc_secs) = &scratch[&(j, rep)];
            let start = Instant::now();
            let result = match (pre, sc) {
                (Ok(net), Ok((data, ge_scratch))) => relu_linear_transfer(net, data)
                    .and_then(|tr| relu_generalization_error(&tr, &target))
                    .map(|ge| (ge, *ge_scratch)),
                (Err(e), _) | (_, Err(e)) => Err(e.clone()),
            };
            match result {
                Ok((ge_transfer, ge_scratch)) => {
                    row.ge_transfer = ge_transfer;
                    row.ge_scratch = ge_scratch;
                    row.transferability = (ge_scratch - ge_transfer) / variance;
                    row.status = Status::Ok;
                }
                Err(e) => row.fail(&e),
            }
            let seconds = start.elapsed().as_secs_f64() + sc_secs + pre_secs / (ns.len() as f64 * reps as f64);
            let meta = RowMeta {
                cell: i * ns.len() + j,
                seconds,
                reused: false,
            };
            (row, meta)
        })
        .collect();

    for (i, &mu) in mus.iter().enumerate() {
        for (j, &n) in ns.iter().enumerate() {
            for rep in 0..reps {
                if let Some(old) = previous.get(&skeleton(mu, n, rep)) {
                    let meta = RowMeta {
                        cell: i * ns.len() + j,
                        seconds: 0.0,
                        reused: true,
                    };
                    out.push(old.clone(), meta);
                }
            }
        }
    }
    for (row, meta) in fresh {
        out.push(row, meta);
    }

    // scratch curve and the projection split of each pretrained student
    let mut mean_scratch = Vec::new();
    for &n in ns {
        let ges: Vec<f64> = out
            .rows
            .iter()
            .filter(|r| r.n == Some(n) && r.status.is_good())
            .map(|r| r.ge_scratch)
            .collect();
        if !ges.is_empty() {
            mean_scratch.push((n as f64, ges.iter().sum::<f64>() / ges.len() as f64));
        }
    }
    let (xs, ys): (Vec<f64>, Vec<f64>) = mean_scratch.into_iter().unzip();
    let (amplitude, exponent) = power_law_fit(&xs, &ys).unwrap_or((f64::NAN, f64::NAN));

    let perps: Vec<(f64, f64)> = mus
        .par_iter()
        .enumerate()
        .map(|(i, &mu)| {
            let net = match pretrained.get(&i) {
                Some((Ok(net), _)) => Ok(net.clone()),
                Some((Err(e), _)) => Err(e.clone()),
                None => relu_pretrain(&exp, &target, &order, mu, student_seed),
            };
            net.and_then(|net| projection_norms(&net, &target, DEFAULT_EIG_CUTOFF))
                .map(|p| (p.perp, p.perp_fraction()))
                .unwrap_or((f64::NAN, f64::NAN))
        })
        .collect();

    for (row, meta) in out.rows.iter_mut().zip(&out.meta) {
        let i = meta.cell / ns.len();
        row.theory_transfer = perps[i].0;
        row.theory_scratch = amplitude * (row.n.unwrap_or(0) as f64).powf(-exponent);
    }
    let ablations = mus
        .iter()
        .zip(&perps)
        .map(|(&mu, &(perp, frac))| AblationSummary {
            mu,
            perp,
            perp_fraction: frac,
            predicted_boundary: phase_boundary_predict(perp, amplitude, exponent).unwrap_or(f64::NAN),
        })
        .collect();
    out.relu = Some(ReluFit {
        amplitude,
        exponent,
        target_variance: variance,
        ablations,
    });
    out.finish()
}

/// Mean, standard error and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub stderr: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self {
                mean: f64::NAN,
                stderr: f64::NAN,
                std: f64::NAN,
            };
        }
        let (mean, stderr) = mean_and_stderr(xs);
        Self {
            mean,
            stderr,
            std: stderr * (xs.len() as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub index: usize,
    pub method: String,
    pub d: Option<usize>,
    pub n: Option<usize>,
    pub gamma: Option<f64>,
    pub theta: Option<f64>,
    pub sigma: Option<f64>,
    pub lambda: Option<f64>,
    pub mu: Option<f64>,
    pub replicates: usize,
    pub failed: usize,
    pub status: &'static str,
    pub ge_transfer: Stat,
    pub ge_scratch: Stat,
    pub transferability: Stat,
    pub theory_transfer: f64,
    pub theory_scratch: f64,
    /// Limit transferability from the closed forms; `null` where it diverges.
    pub theory_transferability: Option<f64>,
    pub region: Option<String>,
}

pub fn summarize_cells(out: &RunOutput) -> Vec<CellSummary> {
    let mut cells: Vec<CellSummary> = Vec::new();
    let mut i = 0;
    while i < out.rows.len() {
        let cell = out.meta[i].cell;
        let mut j = i;
        while j < out.rows.len() && out.meta[j].cell == cell {
            j += 1;
        }
        let rows = &out.rows[i..j];
        let good: Vec<&Row> = rows.iter().filter(|r| r.status.is_good()).collect();
        let pick = |f: fn(&Row) -> f64| Stat::of(&good.iter().map(|r| f(r)).collect::<Vec<_>>());
        let first = &rows[0];
        let (theory_t, region) = limit_transferability(first);
        cells.push(CellSummary {
            index: cell,
            method: first.method.clone(),
            d: first.d,
            n: first.n,
            gamma: first.gamma,
            theta: first.theta,
            sigma: first.sigma,
            lambda: first.lambda,
            mu: first.mu,
            replicates: rows.len(),
            failed: rows.len() - good.len(),
            status: if good.len() == rows.len() { "ok" } else { "failed" },
            ge_transfer: pick(|r| r.ge_transfer),
            ge_scratch: pick(|r| r.ge_scratch),
            transferability: pick(|r| r.transferability),
            theory_transfer: first.theory_transfer,
            theory_scratch: first.theory_scratch,
            theory_transferability: theory_t.filter(|t| t.is_finite()),
            region,
        });
        i = j;
    }
    cells
}

fn limit_transferability(row: &Row) -> (Option<f64>, Option<String>) {
    let (Some(gamma), Some(theta), Some(sigma)) = (row.gamma, row.theta, row.sigma) else {
        return (None, None);
    };
    match row.method.as_str() {
        "linear" => (
            Some(ext(linear_transferability(gamma, theta, sigma))),
            Some(classify(gamma, theta, sigma, Method::Linear).label.to_string()),
        ),
        "finetune" => (
            Some(finetune_transferability(gamma, theta)),
            Some(classify(gamma, theta, sigma, Method::Finetune).label.to_string()),
        ),
        "ridge" => {
            let t = ridge_transferability(gamma, theta, sigma, row.lambda.unwrap_or(0.0));
            let label = match t {
                Extended::Infinite { .. } => "singular",
                Extended::Finite(v) if v > 0.0 => "positive",
                Extended::Finite(v) if v < 0.0 => "negative",
                Extended::Finite(_) => "zero",
            };
            (Some(ext(t)), Some(label.to_string()))
        }
        _ => (None, None),
    }
}
