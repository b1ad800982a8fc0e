//! Shared minibatch training and evaluation loops.

use std::collections::BTreeMap;

use super::{LossNorm, Metric, TrainBudget, TrainLog};
use crate::error::{Error, Result};
use crate::nets::{build_network, LayerSpec, Network, NetworkRole, NetworkSpec, ParamStore};
use crate::optim::OptimizerState;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tasks::{Dataset, Targets, TaskKind, TaskSpec};

const EVAL_CHUNK: usize = 512;

/// The per-task model being optimised: a forward pass, an optional
/// regulariser, and the stores the optimizer may update.
pub(crate) trait TaskModel {
    fn forward(&self, tape: &mut Tape, x: Var, step: usize) -> Result<Var>;

    fn penalty(&self, _tape: &mut Tape) -> Result<Option<Var>> {
        Ok(None)
    }

    fn trainable(&mut self) -> Vec<&mut ParamStore>;
}

pub(crate) fn task_loss(tape: &mut Tape, out: Var, targets: &Targets, kind: TaskKind, norm: LossNorm) -> Result<Var> {
    match (kind, targets) {
        (TaskKind::Classification { .. }, Targets::Classes(y)) => tape.softmax_cross_entropy(out, y),
        (TaskKind::Regression { .. }, Targets::Values(y)) => {
            let t = tape.constant(y.clone())?;
            match norm {
                LossNorm::Mse => tape.mse_loss(out, t),
                LossNorm::L1 => tape.l1_loss(out, t),
            }
        }
        _ => Err(Error::Task("targets do not match the task kind".into())),
    }
}

/// Loss (and error rate for classification) of `forward` over a whole split.
pub(crate) fn evaluate_with(
    data: &Dataset,
    kind: TaskKind,
    norm: LossNorm,
    forward: impl Fn(&mut Tape, Var) -> Result<Var>,
) -> Result<Metric> {
    let n = data.len();
    let mut loss_sum = 0.0;
    let mut wrong = 0usize;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch(chunk);
        let mut tape = Tape::new();
        let xv = tape.constant(x)?;
        let out = forward(&mut tape, xv)?;
        let l = task_loss(&mut tape, out, &y, kind, norm)?;
        loss_sum += tape.value(l).item() * chunk.len() as f64;
        if let Targets::Classes(labels) = &y {
            let logits = tape.value(out);
            let c = logits.shape()[1];
            for (row, &label) in logits.data().chunks(c).zip(labels) {
                let mut best = 0;
                for j in 1..c {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                if best != label {
                    wrong += 1;
                }
            }
        }
    }
    Ok(Metric {
        loss: loss_sum / n as f64,
        error_rate: kind.is_classification().then(|| wrong as f64 / n as f64),
    })
}

/// Minibatch training with a fresh optimizer. Batches walk a new random
/// permutation of the training split each epoch.
///
/// With `keep_best_every = Some(e)` the full training loss is measured at
/// step 0, every `e` steps and at the end, and the trainable parameters are
/// restored to the best of those checkpoints.
pub(crate) fn fit(
    model: &mut dyn TaskModel,
    task: &TaskSpec,
    budget: &TrainBudget,
    norm: LossNorm,
    rng: &mut Rng,
    keep_best_every: Option<usize>,
) -> Result<TrainLog> {
    budget.validate()?;
    let data = &task.train;
    let n = data.len();
    let batch = budget.batch_size.min(n);
    let full_loss = |model: &dyn TaskModel, step: usize| -> Result<f64> {
        Ok(evaluate_with(data, task.kind, norm, |tape, x| model.forward(tape, x, step))?.loss)
    };
    let initial_loss = full_loss(model, 0)?;
    let snapshot =
        |model: &mut dyn TaskModel| -> Vec<ParamStore> { model.trainable().into_iter().map(|s| s.clone()).collect() };
    let mut best = match keep_best_every {
        Some(0) => return Err(Error::Config("checkpoint interval must be positive".into())),
        Some(_) => Some((initial_loss, snapshot(model))),
        None => None,
    };
    let mut opt = OptimizerState::new(budget.optimizer, budget.lr);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(budget.steps);
    for step in 0..budget.steps {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if cursor == order.len() {
                order = rng.permutation(n);
                cursor = 0;
            }
            let take = (batch - idx.len()).min(order.len() - cursor);
            idx.extend_from_slice(&order[cursor..cursor + take]);
            cursor += take;
        }
        let (x, y) = data.batch(&idx);
        let mut tape = Tape::new();
        let xv = tape.constant(x)?;
        let out = model.forward(&mut tape, xv, step)?;
        let mut loss = task_loss(&mut tape, out, &y, task.kind, norm)?;
        if let Some(p) = model.penalty(&mut tape)? {
            loss = tape.add(loss, p)?;
        }
        losses.push(tape.value(loss).item());
        let grads = tape.backward(loss)?;
        opt.step(&mut model.trainable(), &grads)?;
        if let (Some(every), Some((best_loss, best_params))) = (keep_best_every, best.as_mut()) {
            let done = step + 1;
            if done % every == 0 || done == budget.steps {
                let l = full_loss(model, done)?;
                if l < *best_loss {
                    *best_loss = l;
                    *best_params = snapshot(model);
                }
            }
        }
    }
    let final_loss = match best {
        Some((l, params)) => {
            for (store, saved) in model.trainable().into_iter().zip(params) {
                *store = saved;
            }
            l
        }
        None => full_loss(model, budget.steps)?,
    };
    Ok(TrainLog {
        task_id: task.task_id,
        losses,
        initial_loss,
        final_loss,
        final_alpha: None,
        steps: budget.steps,
    })
}

/// Width of the flat feature vector a network emits.
pub(crate) fn feature_width(net: &Network) -> Result<usize> {
    match net.output_shape().as_slice() {
        [w] => Ok(*w),
        other => Err(Error::Spec(format!(
            "representation must be a flat feature vector, got per-example shape {other:?}"
        ))),
    }
}

/// Task-specific readouts `D_t`, each a linear map from the representation.
#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct Heads {
    pub by_task: BTreeMap<usize, Network>,
}

impl Heads {
    pub fn build(seed: u64, task: &TaskSpec, width: usize) -> Result<Network> {
        let spec = NetworkSpec::new(
            vec![width],
            vec![LayerSpec::linear(width, task.kind.out_dim())],
            NetworkRole::Readout,
        );
        build_network(
            &spec,
            &format!("head.{}", task.task_id),
            &mut Rng::stream(seed, task.task_id, "head"),
        )
    }

    pub fn get(&self, task_id: usize) -> Option<&Network> {
        self.by_task.get(&task_id)
    }

    pub fn stores(&self) -> Vec<&ParamStore> {
        self.by_task.values().map(Network::params).collect()
    }

    pub fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        self.by_task.values_mut().map(Network::params_mut).collect()
    }
}

pub(crate) fn check_input(net: &Network, task: &TaskSpec) -> Result<()> {
    if task.input_shape() != net.spec().input_shape.as_slice() {
        return Err(Error::Task(format!(
            "task {} inputs {:?} do not match network input {:?}",
            task.task_id,
            task.input_shape(),
            net.spec().input_shape
        )));
    }
    Ok(())
}
