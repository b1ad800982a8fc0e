//! Task sequences: datasets, synthetic generators and file loaders.

mod cifar;
mod idx;
mod synthetic;

pub use cifar::{load_cifar_bin, CifarVariant};
pub use idx::{load_idx, read_idx, write_idx, write_idx_file, IdxArray, IdxData};
pub use synthetic::{
    gaussian_mixture, gen_permuted_tasks, gen_rotated_regression, gen_split_class_tasks, inverse_permutation,
    permute_features, GaussianMixtureConfig, RotatedRegressionConfig, RotatedTeacher, SourceData,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    Classification { num_classes: usize },
    Regression { out_dim: usize },
}

impl TaskKind {
    pub fn out_dim(&self) -> usize {
        match *self {
            TaskKind::Classification { num_classes } => num_classes,
            TaskKind::Regression { out_dim } => out_dim,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, TaskKind::Classification { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Tensor),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(t) => t.shape()[0],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gather(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(t) => Targets::Values(t.gather_rows(idx)),
        }
    }
}

/// Per-feature statistics of a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    targets: Targets,
    norm: Option<NormStats>,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Targets) -> Result<Self> {
        let n = inputs.shape()[0];
        if inputs.shape().len() < 2 {
            return Err(Error::Task(format!("inputs {:?} lack an example axis", inputs.shape())));
        }
        if targets.len() != n {
            return Err(Error::Task(format!("{n} inputs but {} targets", targets.len())));
        }
        Ok(Dataset {
            inputs,
            targets,
            norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn norm(&self) -> Option<&NormStats> {
        self.norm.as_ref()
    }

    /// Per-example input shape.
    pub fn input_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor, Targets) {
        (self.inputs.gather_rows(idx), self.targets.gather(idx))
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.gather_rows(idx),
            targets: self.targets.gather(idx),
            norm: self.norm.clone(),
        }
    }

    pub(crate) fn map_inputs(&self, f: impl Fn(&Tensor) -> Tensor) -> Dataset {
        Dataset {
            inputs: f(&self.inputs),
            targets: self.targets.clone(),
            norm: self.norm.clone(),
        }
    }

    pub(crate) fn with_targets(&self, targets: Targets) -> Dataset {
        Dataset {
            inputs: self.inputs.clone(),
            targets,
            norm: self.norm.clone(),
        }
    }

    fn apply_norm(&mut self, stats: &NormStats) {
        let d = stats.mean.len();
        for row in self.inputs.data_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&stats.mean).zip(&stats.std) {
                *v = (*v - m) / s;
            }
        }
        self.norm = Some(stats.clone());
    }

    /// Standardises every input feature with statistics of `train`, applied to
    /// both splits. Features with zero spread keep unit scale.
    pub fn normalize_pair(train: &mut Dataset, val: &mut Dataset) -> Result<NormStats> {
        if train.norm.is_some() || val.norm.is_some() {
            return Err(Error::contract("dataset is already normalized"));
        }
        if train.input_shape() != val.input_shape() {
            return Err(Error::Task("train/val input shapes differ".into()));
        }
        let n = train.len();
        let d: usize = train.input_shape().iter().product();
        let mut mean = vec![0.0; d];
        for row in train.inputs.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for row in train.inputs.data().chunks(d) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var
            .iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        let stats = NormStats { mean, std };
        train.apply_norm(&stats);
        val.apply_norm(&stats);
        Ok(stats)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    /// Stable identity; random streams for the task are keyed on it.
    pub task_id: usize,
    pub kind: TaskKind,
    pub train: Dataset,
    pub val: Dataset,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(task_id: usize, kind: TaskKind, train: Dataset, val: Dataset, seed: u64) -> Result<Self> {
        if train.input_shape() != val.input_shape() {
            return Err(Error::Task("train and val input shapes differ".into()));
        }
        let check = |d: &Dataset| -> Result<()> {
            match (&kind, d.targets()) {
                (TaskKind::Classification { num_classes }, Targets::Classes(c)) => {
                    if let Some(bad) = c.iter().find(|&&y| y >= *num_classes) {
                        return Err(Error::Task(format!(
                            "label {bad} out of range for {num_classes} classes"
                        )));
                    }
                    Ok(())
                }
                (TaskKind::Regression { out_dim }, Targets::Values(t)) if t.shape()[1..] == [*out_dim] => Ok(()),
                _ => Err(Error::Task("targets do not match the task kind".into())),
            }
        };
        check(&train)?;
        check(&val)?;
        Ok(TaskSpec {
            task_id,
            kind,
            train,
            val,
            seed,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        self.train.input_shape()
    }

    pub fn split(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceFamily {
    Permuted,
    SplitClass,
    RotatedRegression,
    FileBacked,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSpec {
    pub family: SequenceFamily,
    pub tasks: Vec<TaskSpec>,
    pub seed: u64,
}

impl SequenceSpec {
    pub fn new(family: SequenceFamily, tasks: Vec<TaskSpec>, seed: u64) -> Result<Self> {
        let first = tasks
            .first()
            .ok_or_else(|| Error::Config("a sequence needs at least one task".into()))?;
        if tasks.iter().any(|t| t.input_shape() != first.input_shape()) {
            return Err(Error::Task("tasks in a sequence must share the input shape".into()));
        }
        Ok(SequenceSpec { family, tasks, seed })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Single-task sequence holding task `i`, as used for trained-first controls.
    pub fn only(&self, i: usize) -> SequenceSpec {
        SequenceSpec {
            family: self.family,
            tasks: vec![self.tasks[i].clone()],
            seed: self.seed,
        }
    }

    pub fn prefix(&self, m: usize) -> SequenceSpec {
        SequenceSpec {
            family: self.family,
            tasks: self.tasks[..m].to_vec(),
            seed: self.seed,
        }
    }
}
