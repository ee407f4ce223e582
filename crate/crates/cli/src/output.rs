//! Files written by a run: `results.csv`, `summary.json`, `timing.json`
//! and, for scatter runs, `metrics.csv`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{io_err, CliResult};
use crate::runner::{summarize_cells, CellSummary, ReluFit, Row, RunOutput, TaskMetrics, COLUMNS};

pub const RESULTS: &str = "results.csv";
pub const SUMMARY: &str = "summary.json";
pub const TIMING: &str = "timing.json";
pub const METRICS: &str = "metrics.csv";

fn writer() -> csv::WriterBuilder {
    let mut b = csv::WriterBuilder::new();
    b.terminator(csv::Terminator::Any(b'\n'));
    b
}

/// The exact bytes of `results.csv`.
pub fn results_csv(rows: &[Row]) -> CliResult<Vec<u8>> {
    let mut w = writer().from_writer(Vec::new());
    w.write_record(COLUMNS)?;
    for row in rows {
        w.write_record(row.record())?;
    }
    w.flush().map_err(io_err("results.csv"))?;
    Ok(w.into_inner().expect("in-memory writer"))
}

pub fn read_results(path: &Path) -> CliResult<Vec<Row>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().ne(COLUMNS) {
        return Err(crate::error::CliError::Usage(format!(
            "{}: unexpected header {:?}",
            path.display(),
            headers
        )));
    }
    Ok(r.deserialize().collect::<Result<Vec<Row>, _>>()?)
}

#[derive(Debug, Serialize)]
pub struct Summary<'a> {
    pub name: &'a str,
    pub kind: String,
    pub config_hash: String,
    pub seeds: usize,
    pub base_seed: u64,
    pub cells: Vec<CellSummary>,
    pub failed_cells: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relu: Option<&'a ReluFit>,
}

/// The parts of `summary.json` needed to resume.
#[derive(Debug, Deserialize)]
pub struct SummaryHeader {
    pub config_hash: String,
}

pub fn summary<'a>(cfg: &'a ExperimentConfig, out: &'a RunOutput) -> Summary<'a> {
    let cells = summarize_cells(out);
    let failed_cells = cells.iter().filter(|c| c.status != "ok").map(|c| c.index).collect();
    Summary {
        name: &cfg.name,
        kind: cfg.kind.to_string(),
        config_hash: cfg.hash(),
        seeds: cfg.seeds.count,
        base_seed: cfg.seeds.base,
        cells,
        failed_cells,
        relu: out.relu.as_ref(),
    }
}

pub fn read_summary_header(path: &Path) -> CliResult<SummaryHeader> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Serialize)]
struct Timing {
    config_hash: String,
    total_seconds: f64,
    rows: Vec<TimingRow>,
}

#[derive(Debug, Serialize)]
struct TimingRow {
    cell: usize,
    seed: Option<u64>,
    wallclock: f64,
    reused: bool,
}

pub fn metrics_csv(metrics: &[TaskMetrics]) -> CliResult<Vec<u8>> {
    let mut w = writer().from_writer(Vec::new());
    w.write_record(["cell", "gamma", "theta", "sigma", "kl", "w1"])?;
    for m in metrics {
        w.write_record([
            m.cell.to_string(),
            m.gamma.to_string(),
            m.theta.to_string(),
            m.sigma.to_string(),
            m.kl.to_string(),
            m.w1.to_string(),
        ])?;
    }
    w.flush().map_err(io_err("metrics.csv"))?;
    Ok(w.into_inner().expect("in-memory writer"))
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct MetricsRow {
    pub cell: usize,
    pub gamma: f64,
    pub theta: f64,
    pub sigma: f64,
    pub kl: f64,
    pub w1: f64,
}

pub fn read_metrics(path: &Path) -> CliResult<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<MetricsRow>, _>>()?)
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

/// Writes every run artifact into `dir`.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput, total_seconds: f64) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write(&dir.join(RESULTS), &results_csv(&out.rows)?)?;
    let mut json = serde_json::to_vec_pretty(&summary(cfg, out))?;
    json.push(b'\n');
    write(&dir.join(SUMMARY), &json)?;
    let timing = Timing {
        config_hash: cfg.hash(),
        total_seconds,
        rows: out
            .rows
            .iter()
            .zip(&out.meta)
            .map(|(r, m)| TimingRow {
                cell: m.cell,
                seed: r.seed,
                wallclock: m.seconds,
                reused: m.reused,
            })
            .collect(),
    };
    write(&dir.join(TIMING), &serde_json::to_vec_pretty(&timing)?)?;
    if !out.metrics.is_empty() {
        write(&dir.join(METRICS), &metrics_csv(&out.metrics)?)?;
    }
    Ok(())
}
