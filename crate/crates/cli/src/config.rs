//! Experiment configuration files.
//!
//! A config is a TOML document with a handful of top-level keys and the
//! tables `[model]`, `[train]`, `[pretrain]`, `[grid]` and `[seeds]`:
//!
//! ```toml
//! name = "fig1"
//! kind = "linear_sweep"
//!
//! [model]
//! L = 2
//! d = 200
//!
//! [grid]
//! gamma = [0.25, 0.5, 2.0]
//! theta = [0.0, 0.5236]
//! sigma = [0.2]
//!
//! [seeds]
//! count = 20
//! base = 7
//! ```
//!
//! Parsing keeps byte spans for every grid axis so that semantic errors point
//! at the offending line, not just the file.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tlab_core::deep_linear::FlowConfig;
use tlab_core::relu_mf::{ablation_count, ReluFlowConfig};
use tlab_core::transfer_linear::pretrain_defaults;
use tlab_core::InitMode;
use toml::Spanned;

use crate::error::{io_err, CliError, CliResult};

/// Simulated γ values closer than this to 1 are rejected.
pub const GAMMA_POLE_BAND: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    TheorySurface,
    LinearSweep,
    RidgeSweep,
    FinetuneSweep,
    ReluHeatmap,
    MetricsScatter,
}

impl Kind {
    pub fn is_simulation(self) -> bool {
        self != Kind::TheorySurface
    }

    pub fn is_relu(self) -> bool {
        self == Kind::ReluHeatmap
    }

    fn required_axes(self) -> &'static [&'static str] {
        match self {
            Kind::TheorySurface | Kind::LinearSweep | Kind::FinetuneSweep | Kind::MetricsScatter => {
                &["gamma", "theta", "sigma"]
            }
            Kind::RidgeSweep => &["gamma", "theta", "sigma", "lambda"],
            Kind::ReluHeatmap => &["mu", "n"],
        }
    }

    fn allowed_axes(self) -> &'static [&'static str] {
        match self {
            Kind::TheorySurface => &["gamma", "theta", "sigma", "lambda"],
            Kind::LinearSweep | Kind::FinetuneSweep | Kind::MetricsScatter => &["gamma", "theta", "sigma"],
            Kind::RidgeSweep => &["gamma", "theta", "sigma", "lambda"],
            Kind::ReluHeatmap => &["mu", "n", "sigma"],
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::TheorySurface => "theory_surface",
            Kind::LinearSweep => "linear_sweep",
            Kind::RidgeSweep => "ridge_sweep",
            Kind::FinetuneSweep => "finetune_sweep",
            Kind::ReluHeatmap => "relu_heatmap",
            Kind::MetricsScatter => "metrics_scatter",
        })
    }
}

/// Closed form evaluated by `theory_surface` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TheoryMethod {
    Linear,
    Finetune,
    Ridge,
}

impl TheoryMethod {
    pub fn name(self) -> &'static str {
        match self {
            TheoryMethod::Linear => "linear",
            TheoryMethod::Finetune => "finetune",
            TheoryMethod::Ridge => "ridge",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScratchSolver {
    /// Minimum-norm least squares.
    #[default]
    Oracle,
    /// Gradient flow on a fresh deep linear net.
    Flow,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig {
    #[serde(rename = "L")]
    pub depth: usize,
    pub d: usize,
    pub alpha: f64,
    pub init_mode: InitMode,
    pub m: usize,
    pub m_star: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Step size. For ReLU runs this is the rate per unit of width.
    pub eta: f64,
    pub max_steps: usize,
    pub loss_tol: f64,
}

impl TrainConfig {
    pub fn flow(&self) -> FlowConfig {
        FlowConfig {
            eta: self.eta,
            max_steps: self.max_steps,
            loss_tol: self.loss_tol,
        }
    }

    pub fn relu(&self) -> ReluFlowConfig {
        ReluFlowConfig {
            lr_per_width: self.eta,
            max_steps: self.max_steps,
            loss_tol: self.loss_tol,
        }
    }

    fn from_flow(f: FlowConfig) -> Self {
        Self {
            eta: f.eta,
            max_steps: f.max_steps,
            loss_tol: f.loss_tol,
        }
    }

    fn from_relu(f: ReluFlowConfig) -> Self {
        Self {
            eta: f.lr_per_width,
            max_steps: f.max_steps,
            loss_tol: f.loss_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grid {
    pub gamma: Vec<f64>,
    pub theta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub n: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub count: usize,
    #[serde(default)]
    pub base: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { count: 20, base: 0 }
    }
}

/// A validated experiment description.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub kind: Kind,
    pub method: Option<TheoryMethod>,
    pub scratch: ScratchSolver,
    pub output_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: TrainConfig,
    pub grid: Grid,
    pub seeds: Seeds,
    /// Joint samples per distribution for the Wasserstein estimate.
    pub w1_samples: usize,
    pub full: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    name: String,
    kind: Kind,
    method: Option<Spanned<TheoryMethod>>,
    #[serde(default)]
    scratch: ScratchSolver,
    output_dir: Option<PathBuf>,
    #[serde(default)]
    model: RawModel,
    train: Option<TrainConfig>,
    pretrain: Option<TrainConfig>,
    grid: Spanned<RawGrid>,
    #[serde(default)]
    seeds: Option<Spanned<Seeds>>,
    w1_samples: Option<Spanned<usize>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    #[serde(rename = "L")]
    depth: Option<Spanned<usize>>,
    d: Option<Spanned<usize>>,
    alpha: Option<Spanned<f64>>,
    init_mode: Option<InitMode>,
    m: Option<Spanned<usize>>,
    m_star: Option<Spanned<usize>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    gamma: Option<Spanned<Vec<f64>>>,
    theta: Option<Spanned<Vec<f64>>>,
    sigma: Option<Spanned<Vec<f64>>>,
    lambda: Option<Spanned<Vec<f64>>>,
    mu: Option<Spanned<Vec<f64>>>,
    n: Option<Spanned<Vec<usize>>>,
}

impl RawGrid {
    fn span_of(&self, axis: &str) -> Option<(Range<usize>, bool)> {
        fn info<T>(s: &Option<Spanned<Vec<T>>>) -> Option<(Range<usize>, bool)> {
            s.as_ref().map(|v| (v.span(), v.get_ref().is_empty()))
        }
        match axis {
            "gamma" => info(&self.gamma),
            "theta" => info(&self.theta),
            "sigma" => info(&self.sigma),
            "lambda" => info(&self.lambda),
            "mu" => info(&self.mu),
            "n" => info(&self.n),
            _ => None,
        }
    }
}

/// Maps byte offsets to 1-based line and column numbers.
struct Locator<'a> {
    path: &'a Path,
    source: &'a str,
}

impl Locator<'_> {
    fn position(&self, offset: usize) -> (usize, usize) {
        let offset = offset.min(self.source.len());
        let before = &self.source[..offset];
        let line = before.matches('\n').count() + 1;
        let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
        (line, column)
    }

    fn error(&self, span: Option<Range<usize>>, message: impl Into<String>) -> CliError {
        let (line, column) = span.map_or((1, 1), |s| self.position(s.start));
        CliError::Config {
            path: self.path.to_path_buf(),
            line,
            column,
            message: message.into(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path, full: bool) -> CliResult<Self> {
        let source = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&source, path, full)
    }

    /// Parses and validates `source`; `path` is used only in messages.
    pub fn parse(source: &str, path: &Path, full: bool) -> CliResult<Self> {
        let loc = Locator { path, source };
        let raw: RawConfig = toml::from_str(source).map_err(|e| loc.error(e.span(), e.message().to_string()))?;
        validate(raw, &loc, full)
    }

    /// FNV-1a over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("out").join(&self.name))
    }
}

fn validate(raw: RawConfig, loc: &Locator<'_>, full: bool) -> CliResult<ExperimentConfig> {
    let kind = raw.kind;
    if raw.name.trim().is_empty() {
        return Err(loc.error(None, "name must not be empty"));
    }

    let grid_span = raw.grid.span();
    let grid = raw.grid.into_inner();
    for axis in ["gamma", "theta", "sigma", "lambda", "mu", "n"] {
        match grid.span_of(axis) {
            Some((span, true)) => return Err(loc.error(Some(span), format!("grid axis `{axis}` is empty"))),
            Some((span, false)) if !kind.allowed_axes().contains(&axis) => {
                return Err(loc.error(Some(span), format!("grid axis `{axis}` is not used by kind `{kind}`")));
            }
            None if kind.required_axes().contains(&axis) => {
                return Err(loc.error(
                    Some(grid_span.clone()),
                    format!("kind `{kind}` needs grid axis `{axis}`"),
                ));
            }
            _ => {}
        }
    }

    let method = match (kind, raw.method) {
        (Kind::TheorySurface, Some(m)) => Some(m.into_inner()),
        (Kind::TheorySurface, None) => return Err(loc.error(None, "kind `theory_surface` needs `method`")),
        (_, Some(m)) => return Err(loc.error(Some(m.span()), "`method` is only used by theory_surface")),
        (_, None) => None,
    };

    let seeds = match raw.seeds {
        Some(s) => {
            if s.get_ref().count == 0 {
                return Err(loc.error(Some(s.span()), "seeds.count must be >= 1"));
            }
            s.into_inner()
        }
        None => Seeds::default(),
    };

    let model = build_model(raw.model, kind, loc, full)?;

    let (train_default, pretrain_default) = if kind.is_relu() {
        let relu = TrainConfig::from_relu(ReluFlowConfig::default());
        (relu, relu)
    } else {
        let finetune = FlowConfig {
            eta: 0.02,
            ..FlowConfig::default()
        };
        (TrainConfig::from_flow(finetune), TrainConfig::from_flow(pretrain_defaults()))
    };
    let train = raw.train.unwrap_or(train_default);
    let pretrain = raw.pretrain.unwrap_or(pretrain_default);
    for (table, t) in [("train", &train), ("pretrain", &pretrain)] {
        let check = if kind.is_relu() { t.relu().validate() } else { t.flow().validate() };
        check.map_err(|e| loc.error(None, format!("[{table}]: {e}")))?;
    }

    let span = |axis: &str| grid.span_of(axis).map(|(s, _)| s);
    let gamma = grid.gamma.as_ref().map(|v| v.get_ref().clone()).unwrap_or_default();
    for &g in &gamma {
        if !(g > 0.0 && g.is_finite()) {
            return Err(loc.error(span("gamma"), format!("gamma must be positive, got {g}")));
        }
        if kind.is_simulation() && (g - 1.0).abs() < GAMMA_POLE_BAND {
            return Err(loc.error(
                span("gamma"),
                format!("gamma = {g} lies within {GAMMA_POLE_BAND} of the interpolation threshold"),
            ));
        }
        if kind.is_simulation() {
            let n = samples_for(g, model.d);
            if n < 3 {
                return Err(loc.error(span("gamma"), format!("gamma = {g} gives n = {n} < 3 at d = {}", model.d)));
            }
        }
    }
    let theta = grid.theta.as_ref().map(|v| v.get_ref().clone()).unwrap_or_default();
    if let Some(&t) = theta.iter().find(|t| !(0.0..=PI + 1e-12).contains(*t)) {
        return Err(loc.error(span("theta"), format!("theta must lie in [0, pi], got {t}")));
    }
    let sigma = grid
        .sigma
        .as_ref()
        .map(|v| v.get_ref().clone())
        .unwrap_or_else(|| vec![0.0]);
    if let Some(&s) = sigma.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
        return Err(loc.error(span("sigma"), format!("sigma must be >= 0, got {s}")));
    }
    if kind.is_relu() && sigma.len() != 1 {
        return Err(loc.error(span("sigma"), "relu_heatmap takes a single sigma"));
    }
    let lambda = grid
        .lambda
        .as_ref()
        .map(|v| v.get_ref().clone())
        .unwrap_or_else(|| vec![0.0]);
    if let Some(&l) = lambda.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(loc.error(span("lambda"), format!("lambda must be >= 0, got {l}")));
    }
    let mu = grid.mu.as_ref().map(|v| v.get_ref().clone()).unwrap_or_default();
    for &m in &mu {
        ablation_count(model.m_star, m).map_err(|e| loc.error(span("mu"), e.to_string()))?;
    }
    let n = grid.n.as_ref().map(|v| v.get_ref().clone()).unwrap_or_default();
    if n.contains(&0) {
        return Err(loc.error(span("n"), "sample sizes must be >= 1"));
    }

    let w1_samples = match raw.w1_samples {
        Some(w) if *w.get_ref() < 2 || *w.get_ref() > tlab_core::task_gen::MAX_W1_SAMPLES => {
            return Err(loc.error(
                Some(w.span()),
                format!("w1_samples must lie in [2, {}]", tlab_core::task_gen::MAX_W1_SAMPLES),
            ));
        }
        Some(w) => w.into_inner(),
        None => 500,
    };

    Ok(ExperimentConfig {
        name: raw.name,
        kind,
        method,
        scratch: raw.scratch,
        output_dir: raw.output_dir,
        model,
        train,
        pretrain,
        grid: Grid {
            gamma,
            theta,
            sigma,
            lambda,
            mu,
            n,
        },
        seeds,
        w1_samples,
        full,
    })
}

fn build_model(raw: RawModel, kind: Kind, loc: &Locator<'_>, full: bool) -> CliResult<ModelConfig> {
    let positive = |v: &Option<Spanned<usize>>, name: &str, default: usize, min: usize| -> CliResult<usize> {
        match v {
            Some(s) if *s.get_ref() < min => Err(loc.error(Some(s.span()), format!("{name} must be >= {min}"))),
            Some(s) => Ok(*s.get_ref()),
            None => Ok(default),
        }
    };
    let d_default = if kind.is_relu() { 50 } else { 200 };
    let mut d = positive(&raw.d, "d", d_default, if kind.is_relu() { 1 } else { 2 })?;
    let depth = positive(&raw.depth, "L", 2, 2)?;
    let mut m = positive(&raw.m, "m", 400, 1)?;
    let mut m_star = positive(&raw.m_star, "m_star", 50, 1)?;
    if full {
        if kind.is_relu() {
            (m, m_star, d) = (1000, 100, 100);
        } else {
            d = 500;
        }
    }
    let alpha = match raw.alpha {
        Some(a) if !(*a.get_ref() > 0.0 && a.get_ref().is_finite()) => {
            return Err(loc.error(Some(a.span()), "alpha must be positive"));
        }
        Some(a) => a.into_inner(),
        None => 1e-5,
    };
    Ok(ModelConfig {
        depth,
        d,
        alpha,
        init_mode: raw.init_mode.unwrap_or(InitMode::Gaussian),
        m,
        m_star,
    })
}

/// Target sample count for ratio `gamma` at dimension `d`.
pub fn samples_for(gamma: f64, d: usize) -> usize {
    (gamma * d as f64).round() as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(src: &str) -> CliResult<ExperimentConfig> {
        ExperimentConfig::parse(src, Path::new("test.toml"), false)
    }

    const BASE: &str = r#"
name = "t"
kind = "ridge_sweep"

[grid]
gamma = [0.5]
theta = [0.0, 1.0]
sigma = [0.2]
lambda = [0.0, 1.0]
"#;

    #[test]
    fn defaults_fill_in() {
        let c = parse(BASE).unwrap();
        assert_eq!(c.model.d, 200);
        assert_eq!(c.model.depth, 2);
        assert_eq!(c.seeds, Seeds::default());
        assert_eq!(c.grid.lambda, vec![0.0, 1.0]);
        assert_eq!(c.output_dir(), PathBuf::from("out/t"));
        assert_eq!(c.pretrain.loss_tol, 1e-20);
    }

    #[test]
    fn full_scale_restores_large_dimensions() {
        let c = ExperimentConfig::parse(BASE, Path::new("x"), true).unwrap();
        assert_eq!(c.model.d, 500);
        assert_ne!(c.hash(), parse(BASE).unwrap().hash());
        assert_eq!(parse(BASE).unwrap().hash(), parse(BASE).unwrap().hash());
    }

    fn config_error(src: &str) -> (usize, String) {
        match parse(src) {
            Err(CliError::Config { line, message, .. }) => (line, message),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_axis_points_at_its_line() {
        let (line, msg) = config_error(&BASE.replace("theta = [0.0, 1.0]", "theta = []"));
        assert_eq!(line, 7);
        assert!(msg.contains("theta"), "{msg}");
    }

    #[test]
    fn rejects_gamma_at_the_pole() {
        let (line, msg) = config_error(&BASE.replace("gamma = [0.5]", "gamma = [0.5, 1.01]"));
        assert_eq!(line, 6);
        assert!(msg.contains("interpolation threshold"), "{msg}");
        // theory surfaces may sample right up to it
        let theory = BASE
            .replace("ridge_sweep", "theory_surface")
            .replace("name = \"t\"", "name = \"t\"\nmethod = \"ridge\"")
            .replace("gamma = [0.5]", "gamma = [0.5, 1.01]");
        assert!(parse(&theory).is_ok());
    }

    #[test]
    fn syntax_and_unknown_keys_are_located() {
        let (line, _) = config_error(&BASE.replace("sigma = [0.2]", "sigma = [0.2"));
        assert!(line >= 8);
        let (line, msg) = config_error(&BASE.replace("lambda = [0.0, 1.0]", "lambda = [0.0]\nfoo = 1"));
        assert_eq!(line, 10);
        assert!(msg.contains("foo"), "{msg}");
    }

    #[test]
    fn kind_axis_mismatches() {
        let (_, msg) = config_error(&BASE.replace("lambda = [0.0, 1.0]", ""));
        assert!(msg.contains("lambda"), "{msg}");
        let relu = "name = \"r\"\nkind = \"relu_heatmap\"\n[grid]\nmu = [0.2, 0.3]\nn = [10]\n";
        assert!(parse(relu).is_ok());
        let (line, msg) = config_error(&relu.replace("0.3]", "0.33]"));
        assert_eq!(line, 4);
        assert!(msg.contains("not an integer"), "{msg}");
        let (line, _) = config_error(&format!("{relu}theta = [1.0]\n"));
        assert_eq!(line, 6);
    }

    #[test]
    fn bundled_configs_parse() {
        let bundled = [
            include_str!("../configs/fig1.toml"),
            include_str!("../configs/fig1_theory.toml"),
            include_str!("../configs/fig2.toml"),
            include_str!("../configs/fig3.toml"),
            include_str!("../configs/fig4.toml"),
            include_str!("../configs/fig5.toml"),
            include_str!("../configs/noiseless.toml"),
        ];
        for src in bundled {
            let c = parse(src).unwrap();
            let full = ExperimentConfig::parse(src, Path::new("x"), true).unwrap();
            if c.kind.is_relu() {
                assert_eq!((full.model.m, full.model.m_star, full.model.d), (1000, 100, 100));
            } else if c.kind.is_simulation() {
                assert_eq!((c.model.d, full.model.d), (200, 500));
            }
        }
    }
}
