//! Results tables and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sidetune::harness::{ExperimentResult, StrategyRun};
use sidetune::nets::write_checkpoint;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const RESULTS_HEADER: [&str; 8] = [
    "run_id",
    "strategy",
    "task_trained",
    "task_evaled",
    "metric_kind",
    "value",
    "seed",
    "step_budget",
];

/// Rigidity rows use this metric kind: `ln(actual loss / trained-first loss)`.
pub const RIGIDITY_KIND: &str = "rigidity_ln";

/// One row of a results or rigidity table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub strategy: String,
    pub task_trained: usize,
    pub task_evaled: usize,
    pub metric_kind: String,
    pub value: f64,
    pub seed: u64,
    pub step_budget: usize,
}

pub fn run_id(name: &str, seed: u64) -> String {
    format!("{name}-s{seed}")
}

/// Grid rows: error rate and loss for classification, loss for regression.
pub fn grid_rows(run: &StrategyRun, seed: u64) -> Vec<ResultRow> {
    let id = run_id(&run.name, seed);
    let mut rows = Vec::new();
    for (i, row) in run.run.grid.rows().iter().enumerate() {
        for (j, m) in row.iter().enumerate() {
            let mut push = |kind: &str, value: f64| {
                rows.push(ResultRow {
                    run_id: id.clone(),
                    strategy: run.name.clone(),
                    task_trained: i,
                    task_evaled: j,
                    metric_kind: kind.to_string(),
                    value,
                    seed,
                    step_budget: run.budget.steps,
                })
            };
            if let Some(e) = m.error_rate {
                push("error_rate", e);
            }
            push("loss", m.loss);
        }
    }
    rows
}

/// Rigidity of task `i`, reported on the diagonal cell `(i, i)`.
pub fn rigidity_rows(run: &StrategyRun, seed: u64) -> Vec<ResultRow> {
    let id = run_id(&run.name, seed);
    run.rigidity
        .iter()
        .flatten()
        .enumerate()
        .map(|(i, &value)| ResultRow {
            run_id: id.clone(),
            strategy: run.name.clone(),
            task_trained: i,
            task_evaled: i,
            metric_kind: RIGIDITY_KIND.to_string(),
            value,
            seed,
            step_budget: run.budget.steps,
        })
        .collect()
}

pub fn csv_bytes(rows: &[ResultRow]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(RESULTS_HEADER).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| CliError::Data(e.to_string()))
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Data(e.to_string())
}

/// Parses a results table. Errors name the offending line.
pub fn read_rows(text: &str) -> CliResult<Vec<ResultRow>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| line_err(1, e))?.clone();
    if header.iter().ne(RESULTS_HEADER) {
        return Err(CliError::Data(format!(
            "line 1: expected header {}, found {}",
            RESULTS_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            line_err(line, e)
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let row: ResultRow = rec.deserialize(Some(&header)).map_err(|e| line_err(line, e))?;
        if row.value.is_nan() {
            return Err(CliError::Data(format!("line {line}: value is not a number")));
        }
        rows.push(row);
    }
    Ok(rows)
}

fn line_err(line: u64, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("line {line}: {e}"))
}

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyManifest {
    pub name: String,
    pub kind: String,
    pub run_id: String,
    pub step_budget: usize,
    pub total_params: usize,
    pub trainable_params: usize,
    pub tasks_completed: usize,
    pub final_alphas: Option<Vec<(usize, f64)>>,
    pub partial: bool,
    pub error: Option<String>,
    pub checkpoint: String,
}

/// Everything needed to reproduce a run; `config` re-runs it as is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub num_tasks: usize,
    pub base_params: usize,
    pub partial: bool,
    pub strategies: Vec<StrategyManifest>,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
    /// How `rigidity.csv` values are defined, when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rigidity_definition: Option<String>,
    pub wall_seconds: f64,
}

pub const RIGIDITY_DEFINITION: &str =
    "rigidity_ln = ln(val loss after training the task in sequence / val loss when trained first with the same seed)";

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Writes `results.csv`, optional `rigidity.csv`, one checkpoint per strategy
/// and finally `manifest.json`, all under `out`.
pub fn write_run(
    out: &Path,
    config: &ExperimentConfig,
    result: &ExperimentResult,
    wall_seconds: f64,
) -> CliResult<RunManifest> {
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| CliError::io(&ckpt_dir, e))?;
    let mut outputs = vec!["results.csv".to_string()];
    let rows: Vec<ResultRow> = result.runs.iter().flat_map(|r| grid_rows(r, result.seed)).collect();
    write_atomic(&out.join("results.csv"), &csv_bytes(&rows)?)?;
    if config.rigidity {
        let rows: Vec<ResultRow> = result.runs.iter().flat_map(|r| rigidity_rows(r, result.seed)).collect();
        write_atomic(&out.join("rigidity.csv"), &csv_bytes(&rows)?)?;
        outputs.push("rigidity.csv".into());
    }
    let mut strategies = Vec::new();
    for r in &result.runs {
        let rel: PathBuf = ["checkpoints", &format!("{}.ckpt", run_id(&r.name, result.seed))]
            .iter()
            .collect();
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &r.checkpoint)?;
        write_atomic(&out.join(&rel), &bytes)?;
        let rel = rel.to_string_lossy().replace('\\', "/");
        outputs.push(rel.clone());
        strategies.push(StrategyManifest {
            name: r.name.clone(),
            kind: r.kind.label().to_string(),
            run_id: run_id(&r.name, result.seed),
            step_budget: r.budget.steps,
            total_params: r.run.total_params,
            trainable_params: r.run.trainable_params,
            tasks_completed: r.run.grid.len(),
            final_alphas: r.run.final_alphas.clone(),
            partial: r.is_partial(),
            error: r.failure.as_ref().map(ToString::to_string),
            checkpoint: rel,
        });
    }
    outputs.push("manifest.json".into());
    let rigidity_definition = config.rigidity.then(|| RIGIDITY_DEFINITION.to_string());
    let mut config = config.clone();
    config.seed = Some(result.seed);
    config.out = Some(absolute(out));
    let manifest = RunManifest {
        code_version: CODE_VERSION.to_string(),
        seed: result.seed,
        config,
        num_tasks: result.num_tasks,
        base_params: result.base_params,
        partial: result.is_partial(),
        strategies,
        outputs,
        rigidity_definition,
        wall_seconds,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Data(e.to_string()))?;
    write_atomic(&out.join("manifest.json"), &json)?;
    Ok(manifest)
}

pub fn absolute(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir()
            .map(|d| d.join(p))
            .unwrap_or_else(|_| p.to_path_buf())
    }
}
