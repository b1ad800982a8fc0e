//! Continual-learning strategies sharing one interface.
//!
//! Every strategy owns its networks and trains on one task at a time. Random
//! streams are keyed by `(seed, task_id, label)`, so a task's initial state and
//! minibatch order never depend on which tasks came before it.

mod boost;
mod columns;
mod ewc;
mod pnn;
mod psp;
mod shared;
mod sidetune;
pub(crate) mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge::{AlphaParam, MergeKind};
use crate::nets::{Checkpoint, InitScheme, Network, NetworkSpec, ParamStore};
use crate::optim::OptimizerKind;
use crate::tasks::{Split, TaskSpec};

pub use boost::{deep_vs_stack, BoostConfig, BoostMemberLog, BoostStack, DeepVsStack};
pub use columns::Columns;
pub use ewc::{ewc_penalty_value, EwcState, EWC_LAMBDA_GRID};
pub use pnn::{PnnColumn, PnnLite};
pub use psp::{psp_apply_key, PspKeys};
pub use shared::SharedBody;
pub use sidetune::SideTune;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Sidetune,
    Finetune,
    Features,
    Scratch,
    Ewc,
    Psp,
    PnnLite,
    Independent,
}

impl StrategyKind {
    pub fn label(self) -> &'static str {
        match self {
            StrategyKind::Sidetune => "sidetune",
            StrategyKind::Finetune => "finetune",
            StrategyKind::Features => "features",
            StrategyKind::Scratch => "scratch",
            StrategyKind::Ewc => "ewc",
            StrategyKind::Psp => "psp",
            StrategyKind::PnnLite => "pnn_lite",
            StrategyKind::Independent => "independent",
        }
    }

    /// Kinds that only ever add parameters and leave earlier ones untouched.
    pub fn is_additive(self) -> bool {
        matches!(
            self,
            StrategyKind::Sidetune
                | StrategyKind::Features
                | StrategyKind::Scratch
                | StrategyKind::PnnLite
                | StrategyKind::Independent
        )
    }
}

/// Regression loss norm; classification always uses softmax cross-entropy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    #[default]
    Mse,
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainBudget {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

impl TrainBudget {
    pub fn new(steps: usize, batch_size: usize, lr: f64) -> Self {
        TrainBudget {
            steps,
            batch_size,
            lr,
            optimizer: OptimizerKind::Adam,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub task_id: usize,
    /// Minibatch objective (including any penalty) at each step.
    pub losses: Vec<f64>,
    /// Task loss over the whole training split before the first step.
    pub initial_loss: f64,
    /// Task loss over the whole training split after the last step.
    pub final_loss: f64,
    pub final_alpha: Option<f64>,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub loss: f64,
    /// Misclassification rate; `None` for regression.
    pub error_rate: Option<f64>,
}

impl Metric {
    /// The headline number: error rate for classification, loss otherwise.
    pub fn primary(&self) -> f64 {
        self.error_rate.unwrap_or(self.loss)
    }
}

/// Which part of a strategy a parameter store belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Base,
    Side,
    Readout,
    Merge,
    Lateral,
}

pub trait Strategy: Send {
    fn kind(&self) -> StrategyKind;

    fn train_task(&mut self, task: &TaskSpec, budget: &TrainBudget) -> Result<TrainLog>;

    /// Evaluates on `task`. An untrained task is a contract error unless
    /// `zero_shot`, in which case the task's untrained initial state is used.
    fn evaluate(&self, task: &TaskSpec, split: Split, zero_shot: bool) -> Result<Metric>;

    /// Every parameter store with its role.
    fn groups(&self) -> Vec<(ParamGroup, &ParamStore)>;

    fn groups_mut(&mut self) -> Vec<(ParamGroup, &mut ParamStore)>;

    /// Checksum of the shared base network as it stands now.
    fn base_checksum(&self) -> u64;

    fn trained_tasks(&self) -> Vec<usize>;

    /// Final α per trained task, for strategies whose merge has one.
    fn final_alphas(&self) -> Result<Vec<(usize, f64)>> {
        Err(Error::contract(format!(
            "{} has no alpha-blend merge",
            self.kind().label()
        )))
    }
}

/// Counts parameters across a strategy's stores. `trainable_only` drops frozen
/// entries; readout heads are included only when asked for.
pub fn count_params(strategy: &dyn Strategy, trainable_only: bool, include_readouts: bool) -> usize {
    strategy
        .groups()
        .into_iter()
        .filter(|(g, _)| include_readouts || *g != ParamGroup::Readout)
        .map(|(_, s)| s.count(trainable_only))
        .sum()
}

/// Final α of task `task_id`, or a contract error for merges without α.
pub fn report_alpha(strategy: &dyn Strategy, task_id: usize) -> Result<f64> {
    strategy
        .final_alphas()?
        .into_iter()
        .find(|(t, _)| *t == task_id)
        .map(|(_, a)| a)
        .ok_or_else(|| Error::contract(format!("task {task_id} has not been trained")))
}

/// Snapshot of every parameter in the checkpoint format.
pub fn strategy_checkpoint(strategy: &dyn Strategy) -> Checkpoint {
    let entries = strategy
        .groups()
        .into_iter()
        .flat_map(|(_, s)| s.iter().map(|(n, p)| (n.clone(), p.value.clone())))
        .collect();
    Checkpoint {
        strategy: Some((strategy.kind().label().to_string(), strategy.trained_tasks().len())),
        entries,
    }
}

/// Loads parameter values from a checkpoint into a strategy with the same
/// structure. Every stored tensor must be present with a matching shape.
pub fn restore_checkpoint(strategy: &mut dyn Strategy, ckpt: &Checkpoint) -> Result<()> {
    let label = strategy.kind().label();
    if let Some((kind, _)) = &ckpt.strategy {
        if kind != label {
            return Err(Error::Format {
                offset: 0,
                detail: format!("checkpoint is for {kind}, not {label}"),
            });
        }
    }
    let mut groups = strategy.groups_mut();
    let mut seen = 0;
    for (name, value) in &ckpt.entries {
        let p = groups
            .iter_mut()
            .find_map(|(_, s)| s.get_mut(name))
            .ok_or_else(|| Error::Key(name.clone()))?;
        if p.value.shape() != value.shape() {
            return Err(Error::dim(
                "restore",
                format!("{name}: {:?} vs {:?}", p.value.shape(), value.shape()),
            ));
        }
        p.value = value.clone();
        seen += 1;
    }
    let total: usize = groups.iter().map(|(_, s)| s.len()).sum();
    if seen != total {
        return Err(Error::contract(format!(
            "checkpoint covers {seen} of {total} parameters"
        )));
    }
    Ok(())
}

/// Settings shared by all strategies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Common {
    pub seed: u64,
    #[serde(default)]
    pub loss: LossNorm,
}

impl Common {
    pub fn new(seed: u64) -> Self {
        Common {
            seed,
            loss: LossNorm::Mse,
        }
    }
}

fn default_ewc_lambda() -> f64 {
    EWC_LAMBDA_GRID[0]
}

fn default_gamma() -> f64 {
    1.0
}

fn default_fisher_samples() -> usize {
    512
}

/// Declarative strategy choice, as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StrategyConfig {
    Sidetune {
        /// Side architecture; defaults to the base architecture.
        #[serde(default)]
        side: Option<NetworkSpec>,
        /// Defaults to copying the base when the architectures match and
        /// distillation otherwise.
        #[serde(default)]
        init: Option<InitScheme>,
        #[serde(default = "default_merge")]
        merge: MergeKind,
        #[serde(default)]
        alpha: AlphaParam,
    },
    Finetune,
    Features,
    Scratch {
        /// Defaults to the base architecture.
        #[serde(default)]
        arch: Option<NetworkSpec>,
    },
    Ewc {
        #[serde(default = "default_ewc_lambda")]
        lambda: f64,
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default = "default_fisher_samples")]
        fisher_samples: usize,
    },
    Psp,
    PnnLite {
        #[serde(default)]
        side: Option<NetworkSpec>,
        #[serde(default)]
        init: Option<InitScheme>,
        #[serde(default = "default_merge")]
        merge: MergeKind,
        #[serde(default)]
        alpha: AlphaParam,
    },
    Independent,
}

fn default_merge() -> MergeKind {
    MergeKind::AlphaBlend
}

impl StrategyConfig {
    pub fn kind(&self) -> StrategyKind {
        match self {
            StrategyConfig::Sidetune { .. } => StrategyKind::Sidetune,
            StrategyConfig::Finetune => StrategyKind::Finetune,
            StrategyConfig::Features => StrategyKind::Features,
            StrategyConfig::Scratch { .. } => StrategyKind::Scratch,
            StrategyConfig::Ewc { .. } => StrategyKind::Ewc,
            StrategyConfig::Psp => StrategyKind::Psp,
            StrategyConfig::PnnLite { .. } => StrategyKind::PnnLite,
            StrategyConfig::Independent => StrategyKind::Independent,
        }
    }

    pub fn sidetune(merge: MergeKind, alpha: AlphaParam) -> Self {
        StrategyConfig::Sidetune {
            side: None,
            init: None,
            merge,
            alpha,
        }
    }
}

/// Builds a strategy around a (pretrained) base network.
pub fn build_strategy(cfg: &StrategyConfig, base: &Network, common: Common) -> Result<Box<dyn Strategy>> {
    Ok(match cfg {
        StrategyConfig::Sidetune {
            side,
            init,
            merge,
            alpha,
        } => Box::new(SideTune::new(base, side.clone(), init.clone(), *merge, *alpha, common)?),
        StrategyConfig::Finetune => Box::new(SharedBody::finetune(base, common)?),
        StrategyConfig::Features => Box::new(SharedBody::features(base, common)?),
        StrategyConfig::Scratch { arch } => Box::new(Columns::scratch(
            arch.clone().unwrap_or_else(|| base.spec().clone()),
            common,
        )?),
        StrategyConfig::Ewc {
            lambda,
            gamma,
            fisher_samples,
        } => Box::new(SharedBody::ewc(base, *lambda, *gamma, *fisher_samples, common)?),
        StrategyConfig::Psp => Box::new(SharedBody::psp(base, common)?),
        StrategyConfig::PnnLite {
            side,
            init,
            merge,
            alpha,
        } => Box::new(PnnLite::new(base, side.clone(), init.clone(), *merge, *alpha, common)?),
        StrategyConfig::Independent => Box::new(Columns::independent(base, common)?),
    })
}

/// Init scheme used when a config leaves it open: copy the base if the side
/// has the same architecture, otherwise distill it.
pub(crate) fn resolve_init(init: Option<InitScheme>, base: &Network, side: &NetworkSpec) -> InitScheme {
    init.unwrap_or_else(|| {
        let b = base.spec();
        if b.layers == side.layers && b.input_shape == side.input_shape {
            InitScheme::CopyBase
        } else {
            InitScheme::Distill(Default::default())
        }
    })
}
