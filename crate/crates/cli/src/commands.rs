//! The `tlab` subcommands.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{ExperimentConfig, Grid, Kind, ModelConfig, ScratchSolver, Seeds, TheoryMethod, TrainConfig};
use crate::error::{io_err, CliError, CliResult};
use crate::output::{self, read_results, read_summary_header, write_run, METRICS, RESULTS, SUMMARY};
use crate::plot::{render, Panel};
use crate::runner::{execute, theory_surface, Previous, RunOutput};

pub const THREADS_VAR: &str = "TLAB_THREADS";

/// Worker count from `TLAB_THREADS`; `None` leaves the choice to rayon.
pub fn threads_from_env() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("{THREADS_VAR} must be a positive integer, got {v:?}"))),
        },
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::Usage(format!("{THREADS_VAR}: {e}"))),
    }
}

/// Runs `f` inside a dedicated pool of `threads` workers.
pub fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Panels written after a run of the given kind.
pub fn default_panels(cfg: &ExperimentConfig) -> Vec<Panel> {
    let surface_ok = cfg.grid.gamma.len() > 1 && cfg.grid.theta.len() > 1;
    let mut panels = Vec::new();
    match cfg.kind {
        Kind::TheorySurface if cfg.method == Some(TheoryMethod::Ridge) => panels.push(Panel::Ridge),
        Kind::TheorySurface | Kind::LinearSweep | Kind::FinetuneSweep => {
            if surface_ok {
                panels.push(Panel::Surface);
            }
            panels.push(Panel::Slices);
        }
        Kind::RidgeSweep => panels.push(Panel::Ridge),
        Kind::ReluHeatmap => panels.push(Panel::Heatmap),
        Kind::MetricsScatter => panels.extend([Panel::ScatterKl, Panel::ScatterW1, Panel::Slices]),
    }
    panels
}

#[derive(Debug)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub rows: usize,
    pub reused: usize,
    pub failed_cells: usize,
    pub seconds: f64,
}

pub fn run(config: &Path, out: Option<PathBuf>, resume: bool, full: bool, threads: Option<usize>) -> CliResult<RunReport> {
    let cfg = ExperimentConfig::load(config, full)?;
    let dir = out.unwrap_or_else(|| cfg.output_dir());

    let previous = if resume && dir.join(SUMMARY).exists() && dir.join(RESULTS).exists() {
        let header = read_summary_header(&dir.join(SUMMARY))?;
        if header.config_hash != cfg.hash() {
            return Err(CliError::Usage(format!(
                "{}: existing results come from a different configuration; rerun without --resume",
                dir.display()
            )));
        }
        Previous::new(read_results(&dir.join(RESULTS))?)
    } else {
        Previous::default()
    };

    let start = Instant::now();
    let result = with_pool(threads, || execute(&cfg, &previous))?;
    let seconds = start.elapsed().as_secs_f64();
    write_run(&dir, &cfg, &result, seconds)?;
    write_panels(&dir, &cfg, &result)?;

    let failed_cells = output::summary(&cfg, &result).failed_cells.len();
    Ok(RunReport {
        out_dir: dir,
        rows: result.rows.len(),
        reused: result.meta.iter().filter(|m| m.reused).count(),
        failed_cells,
        seconds,
    })
}

fn write_panels(dir: &Path, cfg: &ExperimentConfig, result: &RunOutput) -> CliResult<()> {
    let metrics: Vec<output::MetricsRow> = if result.metrics.is_empty() {
        Vec::new()
    } else {
        let path = dir.join(METRICS);
        output::read_metrics(&path)?
    };
    for panel in default_panels(cfg) {
        let m = panel.needs_metrics().then_some(metrics.as_slice());
        match render(panel, &result.rows, m) {
            Ok(svg) => {
                let path = dir.join(format!("{}.svg", panel.name()));
                fs::write(&path, svg).map_err(io_err(path))?;
            }
            Err(e) => eprintln!("warning: panel {} skipped: {e}", panel.name()),
        }
    }
    Ok(())
}

/// Parses `A:B:STEP` into `A, A+STEP, …` up to and including `B`.
pub fn parse_range(spec: &str) -> CliResult<Vec<f64>> {
    let bad = || CliError::Usage(format!("range {spec:?} must look like A:B:STEP"));
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<CliResult<_>>()?;
    let [a, b, step] = parts[..] else {
        return Err(bad());
    };
    if parts.iter().any(|v| !v.is_finite()) || step <= 0.0 || b < a {
        return Err(CliError::Usage(format!("range {spec:?} needs A <= B and STEP > 0")));
    }
    let count = ((b - a) / step + 1e-9).floor() as usize;
    Ok((0..=count).map(|k| a + k as f64 * step).collect())
}

pub struct TheoryArgs {
    pub method: TheoryMethod,
    pub gamma: String,
    pub theta: String,
    pub sigma: f64,
    pub lambda: Option<f64>,
    pub out: PathBuf,
}

/// Closed-form table in the `results.csv` layout.
pub fn theory(args: &TheoryArgs) -> CliResult<usize> {
    let gamma = parse_range(&args.gamma)?;
    let theta = parse_range(&args.theta)?;
    if gamma.iter().any(|g| *g <= 0.0) {
        return Err(CliError::Usage("gamma values must be positive".into()));
    }
    if !(args.sigma >= 0.0 && args.sigma.is_finite()) {
        return Err(CliError::Usage("sigma must be >= 0".into()));
    }
    let lambda = match (args.method, args.lambda) {
        (TheoryMethod::Ridge, None) => return Err(CliError::Usage("--method ridge needs --lambda".into())),
        (TheoryMethod::Ridge, Some(l)) if !(l >= 0.0 && l.is_finite()) => {
            return Err(CliError::Usage("lambda must be >= 0".into()));
        }
        (TheoryMethod::Ridge, Some(l)) => vec![l],
        (_, Some(_)) => return Err(CliError::Usage("--lambda only applies to --method ridge".into())),
        (_, None) => vec![0.0],
    };
    let cfg = ExperimentConfig {
        name: "theory".into(),
        kind: Kind::TheorySurface,
        method: Some(args.method),
        scratch: ScratchSolver::Oracle,
        output_dir: None,
        model: ModelConfig {
            depth: 2,
            d: 0,
            alpha: 0.0,
            init_mode: tlab_core::InitMode::Gaussian,
            m: 0,
            m_star: 0,
        },
        train: TrainConfig {
            eta: 0.0,
            max_steps: 0,
            loss_tol: 0.0,
        },
        pretrain: TrainConfig {
            eta: 0.0,
            max_steps: 0,
            loss_tol: 0.0,
        },
        grid: Grid {
            gamma,
            theta,
            sigma: vec![args.sigma],
            lambda,
            mu: Vec::new(),
            n: Vec::new(),
        },
        seeds: Seeds { count: 1, base: 0 },
        w1_samples: 0,
        full: false,
    };
    let out = theory_surface(&cfg, args.method);
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(&args.out, output::results_csv(&out.rows)?).map_err(io_err(&args.out))?;
    Ok(out.rows.len())
}

pub fn plot(results: &Path, panel: Panel, out: &Path) -> CliResult<()> {
    let rows = read_results(results)?;
    let metrics = if panel.needs_metrics() {
        let path = results.with_file_name(METRICS);
        Some(output::read_metrics(&path)?)
    } else {
        None
    };
    let svg = render(panel, &rows, metrics.as_deref())?;
    fs::write(out, svg).map_err(io_err(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_include_the_end_point() {
        assert_eq!(parse_range("0:1:0.25").unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(parse_range("0.1:0.3:0.1").unwrap().len(), 3);
        assert_eq!(parse_range("2:2:1").unwrap(), vec![2.0]);
        for bad in ["1:0:0.1", "0:1:0", "0:1", "a:1:0.1", "0:1:-1"] {
            assert!(parse_range(bad).is_err(), "{bad}");
        }
    }
}
