//! Sequence runs, evaluation grids and the derived metrics: forgetting,
//! rigidity and average rank.

mod experiment;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::strategies::{count_params, Metric, Strategy, TrainBudget, TrainLog};
use crate::tasks::{SequenceSpec, Split};

pub use experiment::{
    ablation_run, build_sequence, compare_merges, pretrain_base, run_experiment, run_jobs, AblationReport, BaseConfig,
    ExperimentResult, ExperimentSpec, NamedStrategy, PretrainConfig, SequenceConfig, StrategyRun,
};

/// `E[i][j]`: metric on task `j` after training through task `i`, for
/// `j ≤ i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    cells: Vec<Vec<Metric>>,
}

impl EvalGrid {
    pub fn new() -> Self {
        EvalGrid { cells: Vec::new() }
    }

    /// Appends row `i = len()`, which must hold exactly `i + 1` entries.
    pub fn push_row(&mut self, row: Vec<Metric>) -> Result<()> {
        if row.len() != self.cells.len() + 1 {
            return Err(Error::contract(format!(
                "row {} must have {} entries, got {}",
                self.cells.len(),
                self.cells.len() + 1,
                row.len()
            )));
        }
        self.cells.push(row);
        Ok(())
    }

    /// Number of trained tasks.
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&Metric> {
        self.cells.get(i).and_then(|r| r.get(j))
    }

    pub fn rows(&self) -> &[Vec<Metric>] {
        &self.cells
    }

    /// Primary metric of the final row.
    pub fn final_row(&self) -> Vec<f64> {
        self.cells
            .last()
            .map_or_else(Vec::new, |r| r.iter().map(Metric::primary).collect())
    }

    /// Loss on each task right after training it.
    pub fn diagonal_loss(&self) -> Vec<f64> {
        self.cells.iter().enumerate().map(|(i, r)| r[i].loss).collect()
    }
}

impl Default for EvalGrid {
    fn default() -> Self {
        Self::new()
    }
}

/// Output of training a strategy through a sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRun {
    pub grid: EvalGrid,
    pub logs: Vec<TrainLog>,
    /// Base checksum before training and after each task.
    pub base_checksums: Vec<u64>,
    pub total_params: usize,
    pub trainable_params: usize,
    pub final_alphas: Option<Vec<(usize, f64)>>,
    pub step_budget: usize,
}

/// Trains on each task in order and evaluates every task seen so far on its
/// validation split.
pub fn run_sequence(strategy: &mut dyn Strategy, seq: &SequenceSpec, budget: &TrainBudget) -> Result<SequenceRun> {
    match run_sequence_partial(strategy, seq, budget) {
        (run, None) => Ok(run),
        (_, Some(e)) => Err(e),
    }
}

/// As [`run_sequence`], but keeps everything completed before the first
/// error and returns the error alongside.
pub fn run_sequence_partial(
    strategy: &mut dyn Strategy,
    seq: &SequenceSpec,
    budget: &TrainBudget,
) -> (SequenceRun, Option<Error>) {
    let mut run = SequenceRun {
        grid: EvalGrid::new(),
        logs: Vec::new(),
        base_checksums: vec![strategy.base_checksum()],
        total_params: 0,
        trainable_params: 0,
        final_alphas: None,
        step_budget: budget.steps,
    };
    let mut failure = None;
    for (i, task) in seq.tasks.iter().enumerate() {
        let mut step = || -> Result<()> {
            run.logs.push(strategy.train_task(task, budget)?);
            run.base_checksums.push(strategy.base_checksum());
            let row = seq.tasks[..=i]
                .iter()
                .map(|t| strategy.evaluate(t, Split::Val, false))
                .collect::<Result<Vec<_>>>()?;
            run.grid.push_row(row)
        };
        if let Err(e) = step() {
            failure = Some(e);
            break;
        }
    }
    run.total_params = count_params(strategy, false, true);
    run.trainable_params = count_params(strategy, true, true);
    run.final_alphas = strategy.final_alphas().ok();
    (run, failure)
}

/// `forgetting_j = E[m][j] − E[j][j]` on the primary metric.
pub fn compute_forgetting(grid: &EvalGrid) -> Vec<f64> {
    let m = grid.len();
    if m == 0 {
        return Vec::new();
    }
    (0..m)
        .map(|j| grid.cells[m - 1][j].primary() - grid.cells[j][j].primary())
        .collect()
}

/// `ln(actual / first)` for one task.
pub fn rigidity(actual: f64, first: f64) -> Result<f64> {
    if !(actual > 0.0 && first > 0.0) || !actual.is_finite() || !first.is_finite() {
        return Err(Error::contract(format!(
            "rigidity needs positive finite losses, got {actual} and {first}"
        )));
    }
    Ok((actual / first).ln())
}

/// Rigidity of every task: the sequence's loss right after training task `i`
/// against a control that trained only task `i`. Budgets must match.
pub fn compute_rigidity(
    actual: &[f64],
    actual_budget: usize,
    control: &[f64],
    control_budget: usize,
) -> Result<Vec<f64>> {
    if actual_budget != control_budget {
        return Err(Error::Config(format!(
            "rigidity controls used {control_budget} steps but the sequence used {actual_budget}"
        )));
    }
    if actual.len() != control.len() {
        return Err(Error::contract(format!(
            "{} sequence losses but {} controls",
            actual.len(),
            control.len()
        )));
    }
    actual.iter().zip(control).map(|(&a, &c)| rigidity(a, c)).collect()
}

/// Single-task control losses: a fresh strategy from `make` trained on task
/// `i` alone, evaluated on its validation split.
pub fn rigidity_controls(
    make: &dyn Fn() -> Result<Box<dyn Strategy>>,
    seq: &SequenceSpec,
    budget: &TrainBudget,
) -> Result<Vec<f64>> {
    seq.tasks
        .iter()
        .map(|task| {
            let mut s = make()?;
            s.train_task(task, budget)?;
            Ok(s.evaluate(task, Split::Val, false)?.loss)
        })
        .collect()
}

/// Fractional ranks of `scores` (lower is better): 1 is best and tied
/// entries share the mean of the ranks they span.
pub fn fractional_ranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Average rank per method over tasks. `scores[method][task]`, lower is
/// better. The mean of the returned values is `(methods + 1) / 2`.
pub fn compute_avg_rank(scores: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = scores.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let tasks = scores[0].len();
    if tasks == 0 || scores.iter().any(|s| s.len() != tasks) {
        return Err(Error::contract(
            "every method needs a score on the same non-empty task list",
        ));
    }
    let mut sums = vec![0.0; n];
    for t in 0..tasks {
        let col: Vec<f64> = scores.iter().map(|s| s[t]).collect();
        for (sum, r) in sums.iter_mut().zip(fractional_ranks(&col)) {
            *sum += r;
        }
    }
    Ok(sums.into_iter().map(|s| s / tasks as f64).collect())
}

/// Median of a non-empty sample.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
