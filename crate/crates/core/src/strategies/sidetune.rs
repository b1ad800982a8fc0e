//! Side-tuning: a frozen base, a per-task side network, a merge operator and a
//! per-task readout.

use std::collections::BTreeMap;

use super::train::{check_input, evaluate_with, feature_width, fit, Heads, TaskModel};
use super::{resolve_init, Common, Metric, ParamGroup, Strategy, StrategyKind, TrainBudget, TrainLog};
use crate::error::{Error, Result};
use crate::merge::{AlphaParam, MergeKind, MergeOperator};
use crate::nets::{build_network, init_side, InitScheme, Network, NetworkSpec, ParamStore, Parameters};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tasks::{Split, TaskSpec};

/// Builds and initialises the side network for `task`. Xavier uses the draw
/// from the task's side stream directly, so a Xavier side matches a scratch
/// column built from the same stream.
pub(crate) fn build_side(
    spec: &NetworkSpec,
    base: &Network,
    init: &InitScheme,
    prefix: &str,
    task: &TaskSpec,
    seed: u64,
) -> Result<Network> {
    let mut rng = Rng::stream(seed, task.task_id, "side");
    let side = build_network(spec, prefix, &mut rng)?;
    match init {
        InitScheme::Xavier => Ok(side),
        other => init_side(side, base, other, Some(task.train.inputs()), &mut rng),
    }
}

#[derive(Debug, Clone, PartialEq)]
struct SideTask {
    side: Network,
    merge: MergeOperator,
    head: Network,
}

struct SideModel<'a> {
    base: &'a Network,
    task: &'a mut SideTask,
}

fn side_forward(base: &Network, t: &SideTask, tape: &mut Tape, x: Var, step: usize) -> Result<Var> {
    let b = base.forward(tape, x)?;
    let s = t.side.forward(tape, x)?;
    let r = t.merge.forward(tape, b, s, step)?;
    t.head.forward(tape, r)
}

impl TaskModel for SideModel<'_> {
    fn forward(&self, tape: &mut Tape, x: Var, step: usize) -> Result<Var> {
        side_forward(self.base, self.task, tape, x, step)
    }

    fn trainable(&mut self) -> Vec<&mut ParamStore> {
        let t = &mut *self.task;
        let mut v = vec![t.side.params_mut(), t.head.params_mut()];
        v.extend(t.merge.stores_mut());
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SideTune {
    base: Network,
    side_spec: NetworkSpec,
    init: InitScheme,
    merge: MergeKind,
    alpha: AlphaParam,
    common: Common,
    width: usize,
    tasks: BTreeMap<usize, SideTask>,
}

impl SideTune {
    pub fn new(
        base: &Network,
        side: Option<NetworkSpec>,
        init: Option<InitScheme>,
        merge: MergeKind,
        alpha: AlphaParam,
        common: Common,
    ) -> Result<Self> {
        let mut base = base.clone();
        base.freeze();
        let side_spec = side.unwrap_or_else(|| base.spec().clone());
        if side_spec.output_shape()? != base.output_shape() || side_spec.input_shape != base.spec().input_shape {
            return Err(Error::Spec(format!(
                "side maps {:?}→{:?} but base maps {:?}→{:?}",
                side_spec.input_shape,
                side_spec.output_shape()?,
                base.spec().input_shape,
                base.output_shape()
            )));
        }
        let width = feature_width(&base)?;
        let init = resolve_init(init, &base, &side_spec);
        Ok(SideTune {
            base,
            side_spec,
            init,
            merge,
            alpha,
            common,
            width,
            tasks: BTreeMap::new(),
        })
    }

    pub fn base(&self) -> &Network {
        &self.base
    }

    pub fn side(&self, task_id: usize) -> Option<&Network> {
        self.tasks.get(&task_id).map(|t| &t.side)
    }

    pub fn merge(&self, task_id: usize) -> Option<&MergeOperator> {
        self.tasks.get(&task_id).map(|t| &t.merge)
    }

    pub fn head(&self, task_id: usize) -> Option<&Network> {
        self.tasks.get(&task_id).map(|t| &t.head)
    }

    fn fresh(&self, task: &TaskSpec) -> Result<SideTask> {
        check_input(&self.base, task)?;
        let id = task.task_id;
        let side = build_side(
            &self.side_spec,
            &self.base,
            &self.init,
            &format!("side.{id}"),
            task,
            self.common.seed,
        )?;
        let merge = MergeOperator::new(
            self.merge,
            self.alpha,
            Some(self.width),
            &format!("merge.{id}"),
            &mut Rng::stream(self.common.seed, id, "merge"),
        )?;
        let head = Heads::build(self.common.seed, task, self.width)?;
        Ok(SideTask { side, merge, head })
    }
}

impl Strategy for SideTune {
    fn kind(&self) -> StrategyKind {
        StrategyKind::Sidetune
    }

    fn train_task(&mut self, task: &TaskSpec, budget: &TrainBudget) -> Result<TrainLog> {
        let mut state = self.fresh(task)?;
        let mut rng = Rng::stream(self.common.seed, task.task_id, "batches");
        let mut log = fit(
            &mut SideModel {
                base: &self.base,
                task: &mut state,
            },
            task,
            budget,
            self.common.loss,
            &mut rng,
            None,
        )?;
        state.merge.record_steps(budget.steps);
        log.final_alpha = state.merge.final_alpha();
        self.tasks.insert(task.task_id, state);
        Ok(log)
    }

    fn evaluate(&self, task: &TaskSpec, split: Split, zero_shot: bool) -> Result<Metric> {
        let fresh;
        let state = match self.tasks.get(&task.task_id) {
            Some(s) => s,
            None if zero_shot => {
                fresh = self.fresh(task)?;
                &fresh
            }
            None => return Err(Error::contract(format!("task {} has not been trained", task.task_id))),
        };
        let step = state.merge.steps_trained();
        evaluate_with(task.split(split), task.kind, self.common.loss, |tape, x| {
            side_forward(&self.base, state, tape, x, step)
        })
    }

    fn groups(&self) -> Vec<(ParamGroup, &ParamStore)> {
        let mut v = vec![(ParamGroup::Base, self.base.params())];
        for t in self.tasks.values() {
            v.push((ParamGroup::Side, t.side.params()));
            v.extend(t.merge.stores().into_iter().map(|s| (ParamGroup::Merge, s)));
            v.push((ParamGroup::Readout, t.head.params()));
        }
        v
    }

    fn groups_mut(&mut self) -> Vec<(ParamGroup, &mut ParamStore)> {
        let mut v = vec![(ParamGroup::Base, self.base.params_mut())];
        for t in self.tasks.values_mut() {
            v.push((ParamGroup::Side, t.side.params_mut()));
            v.extend(t.merge.stores_mut().into_iter().map(|s| (ParamGroup::Merge, s)));
            v.push((ParamGroup::Readout, t.head.params_mut()));
        }
        v
    }

    fn base_checksum(&self) -> u64 {
        self.base.checksum()
    }

    fn trained_tasks(&self) -> Vec<usize> {
        self.tasks.keys().copied().collect()
    }

    fn final_alphas(&self) -> Result<Vec<(usize, f64)>> {
        if self.merge != MergeKind::AlphaBlend {
            return Err(Error::contract(format!("{} merge has no alpha", self.merge.label())));
        }
        Ok(self
            .tasks
            .iter()
            .map(|(&t, s)| (t, s.merge.final_alpha().expect("alpha-blend merge")))
            .collect())
    }
}
