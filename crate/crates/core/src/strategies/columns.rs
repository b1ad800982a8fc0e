//! One separate network per task: trained from scratch, or from a copy of
//! the base.

use std::collections::BTreeMap;

use super::train::{check_input, evaluate_with, feature_width, fit, Heads, TaskModel};
use super::{Common, Metric, ParamGroup, Strategy, StrategyKind, TrainBudget, TrainLog};
use crate::error::{Error, Result};
use crate::nets::{build_network, Network, NetworkSpec, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tasks::{Split, TaskSpec};

#[derive(Debug, Clone, PartialEq)]
enum Source {
    Scratch(NetworkSpec),
    Base(Network),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Columns {
    kind: StrategyKind,
    source: Source,
    columns: BTreeMap<usize, (Network, Network)>,
    common: Common,
    width: usize,
}

struct ColumnModel<'a> {
    net: &'a mut Network,
    head: &'a mut Network,
}

impl TaskModel for ColumnModel<'_> {
    fn forward(&self, tape: &mut Tape, x: Var, _step: usize) -> Result<Var> {
        let h = self.net.forward(tape, x)?;
        self.head.forward(tape, h)
    }

    fn trainable(&mut self) -> Vec<&mut ParamStore> {
        vec![self.net.params_mut(), self.head.params_mut()]
    }
}

impl Columns {
    /// A fresh Xavier network of `arch` per task, drawn from the task's side
    /// stream.
    pub fn scratch(arch: NetworkSpec, common: Common) -> Result<Self> {
        let probe = build_network(&arch, "probe", &mut Rng::new(0))?;
        Ok(Columns {
            kind: StrategyKind::Scratch,
            width: feature_width(&probe)?,
            source: Source::Scratch(arch),
            columns: BTreeMap::new(),
            common,
        })
    }

    /// A trainable copy of the base per task; nothing is shared.
    pub fn independent(base: &Network, common: Common) -> Result<Self> {
        Ok(Columns {
            kind: StrategyKind::Independent,
            width: feature_width(base)?,
            source: Source::Base({
                let mut b = base.clone();
                b.freeze();
                b
            }),
            columns: BTreeMap::new(),
            common,
        })
    }

    pub fn column(&self, task_id: usize) -> Option<&Network> {
        self.columns.get(&task_id).map(|c| &c.0)
    }

    fn fresh(&self, task: &TaskSpec) -> Result<(Network, Network)> {
        let prefix = format!("column.{}", task.task_id);
        let net = match &self.source {
            Source::Scratch(spec) => {
                build_network(spec, &prefix, &mut Rng::stream(self.common.seed, task.task_id, "side"))?
            }
            Source::Base(base) => {
                let mut n = base.renamed(&prefix);
                n.unfreeze();
                n
            }
        };
        check_input(&net, task)?;
        Ok((net, Heads::build(self.common.seed, task, self.width)?))
    }
}

impl Strategy for Columns {
    fn kind(&self) -> StrategyKind {
        self.kind
    }

    fn train_task(&mut self, task: &TaskSpec, budget: &TrainBudget) -> Result<TrainLog> {
        let (mut net, mut head) = self.fresh(task)?;
        let mut rng = Rng::stream(self.common.seed, task.task_id, "batches");
        let log = fit(
            &mut ColumnModel {
                net: &mut net,
                head: &mut head,
            },
            task,
            budget,
            self.common.loss,
            &mut rng,
            None,
        )?;
        self.columns.insert(task.task_id, (net, head));
        Ok(log)
    }

    fn evaluate(&self, task: &TaskSpec, split: Split, zero_shot: bool) -> Result<Metric> {
        let fresh;
        let (net, head) = match self.columns.get(&task.task_id) {
            Some(c) => c,
            None if zero_shot => {
                fresh = self.fresh(task)?;
                &fresh
            }
            None => return Err(Error::contract(format!("task {} has not been trained", task.task_id))),
        };
        evaluate_with(task.split(split), task.kind, self.common.loss, |tape, x| {
            let h = net.forward(tape, x)?;
            head.forward(tape, h)
        })
    }

    fn groups(&self) -> Vec<(ParamGroup, &ParamStore)> {
        let mut v = Vec::new();
        if let Source::Base(b) = &self.source {
            v.push((ParamGroup::Base, b.params()));
        }
        for (net, head) in self.columns.values() {
            v.push((ParamGroup::Side, net.params()));
            v.push((ParamGroup::Readout, head.params()));
        }
        v
    }

    fn groups_mut(&mut self) -> Vec<(ParamGroup, &mut ParamStore)> {
        let mut v = Vec::new();
        if let Source::Base(b) = &mut self.source {
            v.push((ParamGroup::Base, b.params_mut()));
        }
        for (net, head) in self.columns.values_mut() {
            v.push((ParamGroup::Side, net.params_mut()));
            v.push((ParamGroup::Readout, head.params_mut()));
        }
        v
    }

    /// Checksum of the base the columns are copied from; scratch columns have
    /// no base and report 0.
    fn base_checksum(&self) -> u64 {
        match &self.source {
            Source::Base(b) => b.checksum(),
            Source::Scratch(_) => 0,
        }
    }

    fn trained_tasks(&self) -> Vec<usize> {
        self.columns.keys().copied().collect()
    }
}
