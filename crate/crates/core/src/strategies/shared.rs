//! Strategies that route every task through one shared body: feature
//! extraction, fine-tuning, EWC and PSP.

use std::collections::BTreeMap;

use super::ewc::{empirical_fisher, EwcState};
use super::psp::PspKeys;
use super::train::{check_input, evaluate_with, feature_width, fit, Heads, TaskModel};
use super::{Common, Metric, ParamGroup, Strategy, StrategyKind, TrainBudget, TrainLog};
use crate::error::{Error, Result};
use crate::nets::{Network, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tasks::{Split, TaskSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct SharedBody {
    kind: StrategyKind,
    body: Network,
    heads: Heads,
    ewc: Option<EwcState>,
    keys: BTreeMap<usize, PspKeys>,
    common: Common,
    width: usize,
}

fn body_forward(body: &Network, key: Option<&PspKeys>, tape: &mut Tape, x: Var) -> Result<Var> {
    match key {
        Some(k) => k.forward(body, tape, x),
        None => body.forward(tape, x),
    }
}

struct BodyModel<'a> {
    body: &'a mut Network,
    head: &'a mut Network,
    key: Option<&'a PspKeys>,
    ewc: Option<&'a EwcState>,
}

impl TaskModel for BodyModel<'_> {
    fn forward(&self, tape: &mut Tape, x: Var, _step: usize) -> Result<Var> {
        let h = body_forward(self.body, self.key, tape, x)?;
        self.head.forward(tape, h)
    }

    fn penalty(&self, tape: &mut Tape) -> Result<Option<Var>> {
        match self.ewc {
            Some(e) => e.penalty(tape, self.body.params()),
            None => Ok(None),
        }
    }

    fn trainable(&mut self) -> Vec<&mut ParamStore> {
        vec![self.body.params_mut(), self.head.params_mut()]
    }
}

impl SharedBody {
    fn new(kind: StrategyKind, base: &Network, ewc: Option<EwcState>, common: Common) -> Result<Self> {
        let mut body = base.clone();
        if kind == StrategyKind::Features {
            body.freeze();
        } else {
            body.unfreeze();
        }
        let width = feature_width(&body)?;
        Ok(SharedBody {
            kind,
            body,
            heads: Heads::default(),
            ewc,
            keys: BTreeMap::new(),
            common,
            width,
        })
    }

    /// Frozen base, per-task readouts only.
    pub fn features(base: &Network, common: Common) -> Result<Self> {
        Self::new(StrategyKind::Features, base, None, common)
    }

    /// Base and readouts all trained on each task in turn.
    pub fn finetune(base: &Network, common: Common) -> Result<Self> {
        Self::new(StrategyKind::Finetune, base, None, common)
    }

    pub fn ewc(base: &Network, lambda: f64, gamma: f64, fisher_samples: usize, common: Common) -> Result<Self> {
        Self::new(
            StrategyKind::Ewc,
            base,
            Some(EwcState::new(lambda, gamma, fisher_samples)?),
            common,
        )
    }

    pub fn psp(base: &Network, common: Common) -> Result<Self> {
        Self::new(StrategyKind::Psp, base, None, common)
    }

    pub fn body(&self) -> &Network {
        &self.body
    }

    pub fn head(&self, task_id: usize) -> Option<&Network> {
        self.heads.get(task_id)
    }

    pub fn ewc_state(&self) -> Option<&EwcState> {
        self.ewc.as_ref()
    }

    fn key_for(&self, task_id: usize) -> Option<PspKeys> {
        (self.kind == StrategyKind::Psp).then(|| {
            self.keys
                .get(&task_id)
                .cloned()
                .unwrap_or_else(|| PspKeys::random(&self.body, &mut Rng::stream(self.common.seed, task_id, "psp-key")))
        })
    }

    /// Folds a Fisher estimate on `task` into the EWC state, anchored at the
    /// current body. Runs automatically after each EWC task.
    pub fn consolidate(&mut self, task: &TaskSpec) -> Result<()> {
        if self.ewc.is_none() {
            return Err(Error::contract("consolidation applies to ewc only"));
        }
        let head = self
            .heads
            .get(task.task_id)
            .ok_or_else(|| Error::contract(format!("ewc consolidation before training task {}", task.task_id)))?;
        let ewc = self.ewc.as_ref().expect("checked above");
        let fisher = empirical_fisher(
            self.body.params(),
            &task.train,
            task.kind,
            self.common.loss,
            ewc.fisher_samples(),
            &mut Rng::stream(self.common.seed, task.task_id, "fisher"),
            |tape, x| {
                let h = self.body.forward(tape, x)?;
                head.forward(tape, h)
            },
        )?;
        self.ewc
            .as_mut()
            .expect("checked above")
            .consolidate(self.body.params(), fisher)
    }
}

impl Strategy for SharedBody {
    fn kind(&self) -> StrategyKind {
        self.kind
    }

    fn train_task(&mut self, task: &TaskSpec, budget: &TrainBudget) -> Result<TrainLog> {
        check_input(&self.body, task)?;
        let mut head = Heads::build(self.common.seed, task, self.width)?;
        let key = self.key_for(task.task_id);
        let mut rng = Rng::stream(self.common.seed, task.task_id, "batches");
        let log = fit(
            &mut BodyModel {
                body: &mut self.body,
                head: &mut head,
                key: key.as_ref(),
                ewc: self.ewc.as_ref(),
            },
            task,
            budget,
            self.common.loss,
            &mut rng,
            None,
        )?;
        self.heads.by_task.insert(task.task_id, head);
        if let Some(k) = key {
            self.keys.insert(task.task_id, k);
        }
        if self.ewc.is_some() {
            self.consolidate(task)?;
        }
        Ok(log)
    }

    fn evaluate(&self, task: &TaskSpec, split: Split, zero_shot: bool) -> Result<Metric> {
        let fresh;
        let head = match self.heads.get(task.task_id) {
            Some(h) => h,
            None if zero_shot => {
                check_input(&self.body, task)?;
                fresh = Heads::build(self.common.seed, task, self.width)?;
                &fresh
            }
            None => return Err(Error::contract(format!("task {} has not been trained", task.task_id))),
        };
        let key = self.key_for(task.task_id);
        evaluate_with(task.split(split), task.kind, self.common.loss, |tape, x| {
            let h = body_forward(&self.body, key.as_ref(), tape, x)?;
            head.forward(tape, h)
        })
    }

    fn groups(&self) -> Vec<(ParamGroup, &ParamStore)> {
        let mut v = vec![(ParamGroup::Base, self.body.params())];
        v.extend(self.heads.stores().into_iter().map(|s| (ParamGroup::Readout, s)));
        v
    }

    fn groups_mut(&mut self) -> Vec<(ParamGroup, &mut ParamStore)> {
        let mut v = vec![(ParamGroup::Base, self.body.params_mut())];
        v.extend(self.heads.stores_mut().into_iter().map(|s| (ParamGroup::Readout, s)));
        v
    }

    fn base_checksum(&self) -> u64 {
        self.body.checksum()
    }

    fn trained_tasks(&self) -> Vec<usize> {
        self.heads.by_task.keys().copied().collect()
    }
}
