//! Subcommand implementations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sidetune::gradsuite::run_suite;
use sidetune::harness::{build_sequence, compute_avg_rank, run_experiment, ExperimentResult};
use sidetune::rng::derive_seed;
use sidetune::tasks::{write_idx, IdxArray};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::output::{self, write_atomic, ResultRow, RunManifest};
use crate::plot;

fn resolve_seed(flag: Option<u64>, cfg: &ExperimentConfig) -> u64 {
    flag.or(cfg.seed).unwrap_or(0)
}

fn resolve_out(flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn make_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// First failure among the strategies, if any.
fn first_failure(result: &ExperimentResult) -> Option<CliError> {
    result.runs.iter().find_map(|r| {
        r.failure
            .as_ref()
            .map(|e| prefix(CliError::from(e), &format!("strategy {:?} stopped early", r.name)))
    })
}

fn prefix(e: CliError, context: &str) -> CliError {
    match e {
        CliError::Config(m) => CliError::Config(format!("{context}: {m}")),
        CliError::Data(m) => CliError::Data(format!("{context}: {m}")),
        CliError::Numeric(m) => CliError::Numeric(format!("{context}: {m}")),
        other => other,
    }
}

/// Runs every strategy for one seed and writes the artifacts. A run that
/// stopped early still leaves its completed rows, flagged in the manifest.
pub fn cmd_run(
    config: &Path,
    seed: Option<u64>,
    out: Option<&Path>,
    jobs: usize,
    log: &mut dyn Write,
) -> CliResult<RunManifest> {
    let cfg = ExperimentConfig::load(config)?;
    let seed = resolve_seed(seed, &cfg);
    let out = resolve_out(out, &cfg);
    make_dir(&out)?;
    let start = Instant::now();
    let result = run_experiment(&cfg.spec(), seed, jobs)?;
    let manifest = output::write_run(&out, &cfg, &result, start.elapsed().as_secs_f64())?;
    for s in &manifest.strategies {
        let status = if s.partial { "partial" } else { "ok" };
        let _ = writeln!(
            log,
            "{}: {} tasks, {} trainable params, {status}",
            s.run_id, s.tasks_completed, s.trainable_params
        );
    }
    let _ = writeln!(log, "wrote {}", out.display());
    match first_failure(&result) {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CompareRow {
    pub method: String,
    pub kind: String,
    pub avg_rank: f64,
    pub mean_forgetting: f64,
    /// Blank unless rigidity controls were requested.
    pub mean_rigidity_ln: Option<f64>,
    pub trainable_params: usize,
    pub total_params: usize,
    pub tasks: usize,
    pub seeds: usize,
    pub step_budget: usize,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Runs the experiment for `seeds` consecutive seeds and ranks the
/// strategies on the final-row metric, averaged over tasks and seeds.
pub fn cmd_compare(
    config: &Path,
    seed: Option<u64>,
    seeds: usize,
    out: Option<&Path>,
    jobs: usize,
    log: &mut dyn Write,
) -> CliResult<Vec<CompareRow>> {
    let cfg = ExperimentConfig::load(config)?;
    let spec = cfg.spec();
    let budget = *spec.uniform_budget()?;
    if seeds == 0 {
        return Err(CliError::Config("--seeds must be at least 1".into()));
    }
    let first = resolve_seed(seed, &cfg);
    let out = resolve_out(out, &cfg);
    make_dir(&out)?;
    let k = spec.strategies.len();
    let (mut ranks, mut forgetting, mut rigidity) = (vec![Vec::new(); k], vec![Vec::new(); k], vec![Vec::new(); k]);
    let (mut rows, mut rig_rows): (Vec<ResultRow>, Vec<ResultRow>) = (Vec::new(), Vec::new());
    let mut params = vec![(0, 0); k];
    let mut tasks = 0;
    for s in 0..seeds as u64 {
        let seed = first + s;
        let result = run_experiment(&spec, seed, jobs)?;
        if let Some(e) = first_failure(&result) {
            return Err(prefix(e, &format!("seed {seed}")));
        }
        tasks = result.num_tasks;
        let scores: Vec<Vec<f64>> = result.runs.iter().map(|r| r.run.grid.final_row()).collect();
        for (i, (r, rank)) in result.runs.iter().zip(compute_avg_rank(&scores)?).enumerate() {
            ranks[i].push(rank);
            forgetting[i].extend(r.forgetting.iter().copied());
            if let Some(rg) = &r.rigidity {
                rigidity[i].extend(rg.iter().copied());
            }
            params[i] = (r.run.trainable_params, r.run.total_params);
            rows.extend(output::grid_rows(r, seed));
            rig_rows.extend(output::rigidity_rows(r, seed));
        }
    }
    let table: Vec<CompareRow> = spec
        .strategies
        .iter()
        .enumerate()
        .map(|(i, ns)| CompareRow {
            method: ns.name.clone(),
            kind: ns.strategy.kind().label().to_string(),
            avg_rank: mean(&ranks[i]),
            mean_forgetting: mean(&forgetting[i]),
            mean_rigidity_ln: cfg.rigidity.then(|| mean(&rigidity[i])),
            trainable_params: params[i].0,
            total_params: params[i].1,
            tasks,
            seeds,
            step_budget: budget.steps,
        })
        .collect();
    write_atomic(&out.join("results.csv"), &output::csv_bytes(&rows)?)?;
    if cfg.rigidity {
        write_atomic(&out.join("rigidity.csv"), &output::csv_bytes(&rig_rows)?)?;
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &table {
        w.serialize(r).map_err(|e| CliError::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
    write_atomic(&out.join("compare.csv"), &bytes)?;
    let _ = writeln!(
        log,
        "{:<20} {:>8} {:>12} {:>12} {:>10}",
        "method", "avg_rank", "forgetting", "rigidity_ln", "trainable"
    );
    for r in &table {
        let rig = r.mean_rigidity_ln.map_or("-".to_string(), |v| format!("{v:.4}"));
        let _ = writeln!(
            log,
            "{:<20} {:>8.3} {:>12.4} {:>12} {:>10}",
            r.method, r.avg_rank, r.mean_forgetting, rig, r.trainable_params
        );
    }
    Ok(table)
}

/// Renders `curves.svg`, `forgetting.svg` and `rigidity.svg` from one or
/// more results tables.
pub fn cmd_plot(inputs: &[PathBuf], out: &Path, log: &mut dyn Write) -> CliResult<()> {
    let mut rows = Vec::new();
    for path in inputs {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        rows.extend(output::read_rows(&text).map_err(|e| match e {
            CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
            other => other,
        })?);
    }
    make_dir(out)?;
    for (name, svg) in [
        ("curves.svg", plot::curves_svg(&rows)),
        ("forgetting.svg", plot::forgetting_svg(&rows)),
        ("rigidity.svg", plot::rigidity_svg(&rows)),
    ] {
        write_atomic(&out.join(name), svg.as_bytes())?;
        let _ = writeln!(log, "wrote {}", out.join(name).display());
    }
    Ok(())
}

/// Exports the configured sequence as IDX files, one input and one label
/// file per task and split.
pub fn cmd_gen_data(
    config: &Path,
    seed: Option<u64>,
    out: Option<&Path>,
    log: &mut dyn Write,
) -> CliResult<Vec<PathBuf>> {
    let cfg = ExperimentConfig::load(config)?;
    let seed = resolve_seed(seed, &cfg);
    let out = resolve_out(out, &cfg);
    make_dir(&out)?;
    let seq = build_sequence(&cfg.sequence, derive_seed(seed, 0, "data"))?;
    let mut written = Vec::new();
    for task in &seq.tasks {
        for (split, data) in [("train", &task.train), ("val", &task.val)] {
            let (inputs, labels) = IdxArray::from_dataset(data)?;
            for (what, arr) in [("inputs", inputs), ("labels", labels)] {
                let path = out.join(format!("task{}-{split}-{what}.idx", task.task_id));
                write_atomic(&path, &write_idx(&arr))?;
                written.push(path);
            }
        }
    }
    let _ = writeln!(
        log,
        "wrote {} files for {} tasks to {}",
        written.len(),
        seq.len(),
        out.display()
    );
    Ok(written)
}

/// Runs the gradient-check suite; any case over tolerance is a numeric
/// failure.
pub fn cmd_grad_check(seed: u64, seeds: usize, out: Option<&Path>, log: &mut dyn Write) -> CliResult<()> {
    if seeds == 0 {
        return Err(CliError::Config("--seeds must be at least 1".into()));
    }
    let cases = run_suite(seed..seed + seeds as u64)?;
    let mut worst: Vec<(&str, f64, f64, bool)> = Vec::new();
    for c in &cases {
        match worst.iter_mut().find(|w| w.0 == c.name) {
            Some(w) => {
                w.1 = w.1.max(c.report.max_rel_error);
                w.3 &= c.report.pass;
            }
            None => worst.push((c.name, c.report.max_rel_error, c.tol, c.report.pass)),
        }
    }
    for (name, err, tol, pass) in &worst {
        let status = if *pass { "PASS" } else { "FAIL" };
        let _ = writeln!(
            log,
            "{status} {name:<18} max rel error {err:.3e} (tol {tol:.0e}, {seeds} seeds)"
        );
    }
    if let Some(dir) = out {
        make_dir(dir)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["case", "seed", "max_rel_error", "tol", "pass"])
            .map_err(|e| CliError::Data(e.to_string()))?;
        for c in &cases {
            w.write_record([
                c.name.to_string(),
                c.seed.to_string(),
                c.report.max_rel_error.to_string(),
                c.tol.to_string(),
                c.report.pass.to_string(),
            ])
            .map_err(|e| CliError::Data(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Data(e.to_string()))?;
        write_atomic(&dir.join("gradcheck.csv"), &bytes)?;
    }
    let failed: Vec<&str> = worst.iter().filter(|w| !w.3).map(|w| w.0).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}
