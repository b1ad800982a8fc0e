//! Declarative experiments: data sequence, base network, strategies and
//! budget, run for one seed.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    compute_avg_rank, compute_forgetting, compute_rigidity, rigidity_controls, run_sequence_partial, SequenceRun,
};
use crate::error::{Error, Result};
use crate::merge::{AlphaParam, MergeKind};
use crate::nets::{build_network, Checkpoint, InitScheme, Network, NetworkSpec, ParamStore};
use crate::rng::{derive_seed, Rng};
use crate::strategies::train::{fit, Heads, TaskModel};
use crate::strategies::{
    build_strategy, strategy_checkpoint, Common, LossNorm, StrategyConfig, StrategyKind, TrainBudget,
};
use crate::tape::{Tape, Var};
use crate::tasks::{
    gaussian_mixture, gen_permuted_tasks, gen_rotated_regression, gen_split_class_tasks, load_cifar_bin, load_idx,
    CifarVariant, Dataset, GaussianMixtureConfig, RotatedRegressionConfig, SequenceSpec, SourceData, Targets, TaskKind,
    TaskSpec,
};

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum SequenceConfig {
    Permuted {
        num_tasks: usize,
        #[serde(default)]
        source: GaussianMixtureConfig,
    },
    SplitClass {
        classes_per_task: usize,
        #[serde(default)]
        source: GaussianMixtureConfig,
    },
    RotatedRegression {
        #[serde(flatten)]
        config: RotatedRegressionConfig,
    },
    /// IDX files (as written by `gen-data`), turned into a permuted
    /// sequence.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        val_images: PathBuf,
        val_labels: PathBuf,
        #[serde(default = "one")]
        num_tasks: usize,
    },
    /// CIFAR binary batches split into disjoint class groups.
    Cifar {
        train: PathBuf,
        test: PathBuf,
        #[serde(default = "default_cifar")]
        variant: CifarVariant,
        classes_per_task: usize,
    },
}

fn default_cifar() -> CifarVariant {
    CifarVariant::Cifar10
}

impl SequenceConfig {
    /// Rewrites relative paths against `dir`.
    pub fn resolve_paths(&mut self, dir: &std::path::Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        match self {
            SequenceConfig::Idx {
                train_images,
                train_labels,
                val_images,
                val_labels,
                ..
            } => {
                for p in [train_images, train_labels, val_images, val_labels] {
                    fix(p);
                }
            }
            SequenceConfig::Cifar { train, test, .. } => {
                fix(train);
                fix(test);
            }
            _ => {}
        }
    }
}

fn file_source(mut train: Dataset, mut val: Dataset) -> Result<SourceData> {
    Dataset::normalize_pair(&mut train, &mut val)?;
    let kind = match (train.targets(), val.targets()) {
        (Targets::Classes(a), Targets::Classes(b)) => TaskKind::Classification {
            num_classes: a.iter().chain(b).max().map_or(1, |&m| m + 1),
        },
        (Targets::Values(t), Targets::Values(_)) => TaskKind::Regression {
            out_dim: t.shape()[1..].iter().product(),
        },
        _ => return Err(Error::Task("train and val targets differ in kind".into())),
    };
    Ok(SourceData { train, val, kind })
}

/// Generates or loads the task sequence.
pub fn build_sequence(cfg: &SequenceConfig, seed: u64) -> Result<SequenceSpec> {
    match cfg {
        SequenceConfig::Permuted { num_tasks, source } => {
            gen_permuted_tasks(&gaussian_mixture(source, seed)?, *num_tasks, seed)
        }
        SequenceConfig::SplitClass {
            classes_per_task,
            source,
        } => gen_split_class_tasks(&gaussian_mixture(source, seed)?, *classes_per_task, seed),
        SequenceConfig::RotatedRegression { config } => Ok(gen_rotated_regression(config, seed)?.0),
        SequenceConfig::Idx {
            train_images,
            train_labels,
            val_images,
            val_labels,
            num_tasks,
        } => {
            let source = file_source(load_idx(train_images, train_labels)?, load_idx(val_images, val_labels)?)?;
            let mut seq = gen_permuted_tasks(&source, *num_tasks, seed)?;
            seq.family = crate::tasks::SequenceFamily::FileBacked;
            Ok(seq)
        }
        SequenceConfig::Cifar {
            train,
            test,
            variant,
            classes_per_task,
        } => {
            let source = file_source(load_cifar_bin(train, *variant)?, load_cifar_bin(test, *variant)?)?;
            let mut seq = gen_split_class_tasks(&source, *classes_per_task, seed)?;
            seq.family = crate::tasks::SequenceFamily::FileBacked;
            Ok(seq)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    /// Index of the sequence task the base is pretrained on.
    #[serde(default)]
    pub task: usize,
    pub budget: TrainBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseConfig {
    pub arch: NetworkSpec,
    /// Without pretraining the base keeps its random initialisation.
    #[serde(default)]
    pub pretrain: Option<PretrainConfig>,
}

struct PretrainModel<'a> {
    base: &'a mut Network,
    head: &'a mut Network,
}

impl TaskModel for PretrainModel<'_> {
    fn forward(&self, tape: &mut Tape, x: Var, _step: usize) -> Result<Var> {
        let h = self.base.forward(tape, x)?;
        self.head.forward(tape, h)
    }

    fn trainable(&mut self) -> Vec<&mut ParamStore> {
        vec![self.base.params_mut(), self.head.params_mut()]
    }
}

/// Builds the base from `seed` and, if a task is given, trains it with a
/// temporary readout that is then discarded.
pub fn pretrain_base(
    arch: &NetworkSpec,
    task: Option<(&TaskSpec, &TrainBudget)>,
    seed: u64,
    loss: LossNorm,
) -> Result<Network> {
    let mut base = build_network(arch, "base", &mut Rng::stream(seed, 0, "base"))?;
    if let Some((task, budget)) = task {
        let width = crate::strategies::train::feature_width(&base)?;
        let mut head = Heads::build(derive_seed(seed, 0, "pretrain"), task, width)?;
        let mut rng = Rng::stream(seed, task.task_id, "pretrain-batches");
        fit(
            &mut PretrainModel {
                base: &mut base,
                head: &mut head,
            },
            task,
            budget,
            loss,
            &mut rng,
            None,
        )?;
    }
    Ok(base)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedStrategy {
    pub name: String,
    pub strategy: StrategyConfig,
    /// Overrides the experiment budget for this strategy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<TrainBudget>,
    /// Replicate index; distinct values give the strategy independent
    /// random streams while the data and base stay shared.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicate: Option<u64>,
}

impl NamedStrategy {
    pub fn new(name: impl Into<String>, strategy: StrategyConfig) -> Self {
        NamedStrategy {
            name: name.into(),
            strategy,
            budget: None,
            replicate: None,
        }
    }

    fn common(&self, seed: u64, loss: LossNorm) -> Common {
        let seed = match self.replicate {
            Some(r) => derive_seed(seed, r as usize, "replicate"),
            None => seed,
        };
        Common { seed, loss }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub sequence: SequenceConfig,
    pub base: BaseConfig,
    pub strategies: Vec<NamedStrategy>,
    pub budget: TrainBudget,
    #[serde(default)]
    pub loss: LossNorm,
    /// Also run single-task controls and report rigidity.
    #[serde(default)]
    pub rigidity: bool,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::Config("no strategies configured".into()));
        }
        let mut names: Vec<&str> = self.strategies.iter().map(|s| s.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("strategy names must be unique".into()));
        }
        if let Some(bad) = names
            .iter()
            .find(|n| n.is_empty() || n.contains(|c: char| c == ',' || c.is_whitespace()))
        {
            return Err(Error::Config(format!("invalid strategy name {bad:?}")));
        }
        self.budget.validate()?;
        for s in &self.strategies {
            if let Some(b) = &s.budget {
                b.validate()?;
            }
        }
        if let Some(p) = &self.base.pretrain {
            p.budget.validate()?;
        }
        self.base.arch.shapes()?;
        Ok(())
    }

    pub fn budget_for<'a>(&'a self, s: &'a NamedStrategy) -> &'a TrainBudget {
        s.budget.as_ref().unwrap_or(&self.budget)
    }

    /// The budget shared by every strategy; comparisons require one.
    pub fn uniform_budget(&self) -> Result<&TrainBudget> {
        let first = self.strategies.first().map_or(&self.budget, |s| self.budget_for(s));
        if let Some(s) = self.strategies.iter().find(|s| self.budget_for(s) != first) {
            return Err(Error::Config(format!(
                "strategy {:?} has a different budget; comparisons need one shared budget",
                s.name
            )));
        }
        Ok(first)
    }
}

/// One strategy's run. `failure` holds the error that stopped it early; the
/// grid then covers only the tasks completed before it.
#[derive(Debug)]
pub struct StrategyRun {
    pub name: String,
    pub kind: StrategyKind,
    pub run: SequenceRun,
    pub forgetting: Vec<f64>,
    pub rigidity: Option<Vec<f64>>,
    pub budget: TrainBudget,
    /// Parameters at the end of the run.
    pub checkpoint: Checkpoint,
    pub failure: Option<Error>,
}

impl StrategyRun {
    pub fn is_partial(&self) -> bool {
        self.failure.is_some()
    }
}

#[derive(Debug)]
pub struct ExperimentResult {
    pub seed: u64,
    pub num_tasks: usize,
    pub base_params: usize,
    pub runs: Vec<StrategyRun>,
}

impl ExperimentResult {
    pub fn is_partial(&self) -> bool {
        self.runs.iter().any(StrategyRun::is_partial)
    }
}

/// Maps `f` over `items` on up to `jobs` threads. Results keep input order,
/// so the output does not depend on scheduling.
pub fn run_jobs<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(_) => items.iter().map(f).collect(),
    }
}

/// Runs every configured strategy on the sequence for one seed.
pub fn run_experiment(spec: &ExperimentSpec, seed: u64, jobs: usize) -> Result<ExperimentResult> {
    spec.validate()?;
    let seq = build_sequence(&spec.sequence, derive_seed(seed, 0, "data"))?;
    let pre = match &spec.base.pretrain {
        Some(p) => {
            let task = seq
                .tasks
                .get(p.task)
                .ok_or_else(|| Error::Config(format!("pretrain task {} is outside the sequence", p.task)))?;
            Some((task, &p.budget))
        }
        None => None,
    };
    let base = pretrain_base(&spec.base.arch, pre, seed, spec.loss)?;
    for s in &spec.strategies {
        build_strategy(&s.strategy, &base, s.common(seed, spec.loss))?;
    }
    let runs = run_jobs(&spec.strategies, jobs, |ns| {
        let common = ns.common(seed, spec.loss);
        let budget = spec.budget_for(ns);
        let mut strategy = build_strategy(&ns.strategy, &base, common).expect("validated above");
        let (run, mut failure) = run_sequence_partial(strategy.as_mut(), &seq, budget);
        let forgetting = compute_forgetting(&run.grid);
        let checkpoint = strategy_checkpoint(strategy.as_ref());
        let mut rigidity = None;
        if spec.rigidity && failure.is_none() {
            let make = || build_strategy(&ns.strategy, &base, common);
            match rigidity_controls(&make, &seq, budget)
                .and_then(|c| compute_rigidity(&run.grid.diagonal_loss(), budget.steps, &c, budget.steps))
            {
                Ok(r) => rigidity = Some(r),
                Err(e) => failure = Some(e),
            }
        }
        StrategyRun {
            name: ns.name.clone(),
            kind: ns.strategy.kind(),
            run,
            forgetting,
            rigidity,
            budget: *budget,
            checkpoint,
            failure,
        }
    });
    Ok(ExperimentResult {
        seed,
        num_tasks: seq.len(),
        base_params: base.params().count(false),
        runs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub methods: Vec<String>,
    /// Final-row primary metric per method and task.
    pub scores: Vec<Vec<f64>>,
    pub avg_ranks: Vec<f64>,
}

/// Base only (frozen features), side only (scratch with the side
/// architecture) and side-tuning, on the same sequence.
pub fn ablation_run(
    base: &Network,
    side: &NetworkSpec,
    init: Option<InitScheme>,
    seq: &SequenceSpec,
    budget: &TrainBudget,
    common: Common,
) -> Result<AblationReport> {
    let configs = [
        ("base_only", StrategyConfig::Features),
        (
            "side_only",
            StrategyConfig::Scratch {
                arch: Some(side.clone()),
            },
        ),
        (
            "sidetune",
            StrategyConfig::Sidetune {
                side: Some(side.clone()),
                init,
                merge: MergeKind::AlphaBlend,
                alpha: AlphaParam::Learnable,
            },
        ),
    ];
    let mut scores = Vec::new();
    for (_, cfg) in &configs {
        let mut s = build_strategy(cfg, base, common)?;
        scores.push(super::run_sequence(s.as_mut(), seq, budget)?.grid.final_row());
    }
    Ok(AblationReport {
        methods: configs.iter().map(|(n, _)| n.to_string()).collect(),
        avg_ranks: compute_avg_rank(&scores)?,
        scores,
    })
}

/// Side-tuning with each merge operator on the same sequence; returns the
/// runs and the average rank of each operator.
pub fn compare_merges(
    base: &Network,
    kinds: &[MergeKind],
    seq: &SequenceSpec,
    budget: &TrainBudget,
    common: Common,
) -> Result<(Vec<SequenceRun>, Vec<f64>)> {
    let mut runs = Vec::new();
    for &kind in kinds {
        let mut s = build_strategy(&StrategyConfig::sidetune(kind, AlphaParam::Learnable), base, common)?;
        runs.push(super::run_sequence(s.as_mut(), seq, budget)?);
    }
    let scores: Vec<Vec<f64>> = runs.iter().map(|r| r.grid.final_row()).collect();
    let ranks = compute_avg_rank(&scores)?;
    Ok((runs, ranks))
}
