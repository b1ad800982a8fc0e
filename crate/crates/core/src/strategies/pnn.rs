//! Progressive-network-style side columns with lateral adapters from the
//! frozen base.

use std::collections::BTreeMap;

use super::sidetune::build_side;
use super::train::{check_input, evaluate_with, feature_width, fit, Heads, TaskModel};
use super::{resolve_init, Common, Metric, ParamGroup, Strategy, StrategyKind, TrainBudget, TrainLog};
use crate::error::{Error, Result};
use crate::merge::{AlphaParam, MergeKind, MergeOperator};
use crate::nets::{build_network, InitScheme, LayerSpec, Network, NetworkRole, NetworkSpec, ParamStore, Parameters};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tasks::{Split, TaskSpec};

fn linear_only(spec: &NetworkSpec) -> bool {
    spec.layers
        .iter()
        .all(|l| matches!(l, LayerSpec::Linear { .. } | LayerSpec::Relu | LayerSpec::Tanh))
}

fn layer_inputs(spec: &NetworkSpec) -> Vec<usize> {
    spec.layers
        .iter()
        .filter_map(|l| match *l {
            LayerSpec::Linear { in_features, .. } => Some(in_features),
            _ => None,
        })
        .collect()
}

/// One task's column: side network, lateral adapters, merge and readout.
///
/// Adapter `l` maps the base's input to its parametric layer `l + 1` into the
/// column's input to the same layer, where it is added.
#[derive(Debug, Clone, PartialEq)]
pub struct PnnColumn {
    pub column: Network,
    pub laterals: Vec<Network>,
    pub merge: MergeOperator,
    pub head: Network,
}

impl PnnColumn {
    pub fn forward(&self, base: &Network, tape: &mut Tape, x: Var, step: usize) -> Result<Var> {
        let mut taps = Vec::new();
        let mut h = x;
        for (i, layer) in base.spec().layers.iter().enumerate() {
            if layer.has_params() {
                taps.push(h);
            }
            h = base.forward_layer(tape, i, h)?;
        }
        let b = h;
        let mut c = x;
        let mut l = 0;
        for (i, layer) in self.column.spec().layers.iter().enumerate() {
            if layer.has_params() {
                if l >= 1 {
                    let a = self.laterals[l - 1].forward(tape, taps[l])?;
                    c = tape.add(c, a)?;
                }
                l += 1;
            }
            c = self.column.forward_layer(tape, i, c)?;
        }
        let r = self.merge.forward(tape, b, c, step)?;
        self.head.forward(tape, r)
    }
}

impl Parameters for PnnColumn {
    fn stores(&self) -> Vec<&ParamStore> {
        let mut v = vec![self.column.params(), self.head.params()];
        v.extend(self.laterals.iter().map(Network::params));
        v.extend(self.merge.stores());
        v
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        let mut v = vec![self.column.params_mut(), self.head.params_mut()];
        v.extend(self.laterals.iter_mut().map(Network::params_mut));
        v.extend(self.merge.stores_mut());
        v
    }
}

struct PnnModel<'a> {
    base: &'a Network,
    col: &'a mut PnnColumn,
}

impl TaskModel for PnnModel<'_> {
    fn forward(&self, tape: &mut Tape, x: Var, step: usize) -> Result<Var> {
        self.col.forward(self.base, tape, x, step)
    }

    fn trainable(&mut self) -> Vec<&mut ParamStore> {
        self.col.stores_mut()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnnLite {
    base: Network,
    side_spec: NetworkSpec,
    init: InitScheme,
    merge: MergeKind,
    alpha: AlphaParam,
    common: Common,
    width: usize,
    tasks: BTreeMap<usize, PnnColumn>,
}

impl PnnLite {
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
        if !linear_only(base.spec()) || !linear_only(&side_spec) {
            return Err(Error::Spec(
                "pnn_lite supports linear and activation layers only".into(),
            ));
        }
        let (bl, sl) = (layer_inputs(base.spec()), layer_inputs(&side_spec));
        if bl.len() != sl.len() || side_spec.output_shape()? != base.output_shape() {
            return Err(Error::Spec(format!(
                "pnn_lite column needs as many linear layers as the base ({} vs {}) and the same output",
                sl.len(),
                bl.len()
            )));
        }
        let width = feature_width(&base)?;
        let init = resolve_init(init, &base, &side_spec);
        Ok(PnnLite {
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

    pub fn task(&self, task_id: usize) -> Option<&PnnColumn> {
        self.tasks.get(&task_id)
    }

    fn fresh(&self, task: &TaskSpec) -> Result<PnnColumn> {
        check_input(&self.base, task)?;
        let id = task.task_id;
        let column = build_side(
            &self.side_spec,
            &self.base,
            &self.init,
            &format!("pnn.{id}"),
            task,
            self.common.seed,
        )?;
        let mut laterals = Vec::new();
        let (bl, sl) = (layer_inputs(self.base.spec()), layer_inputs(&self.side_spec));
        for l in 1..bl.len() {
            let spec = NetworkSpec::new(
                vec![bl[l]],
                vec![LayerSpec::linear(bl[l], sl[l])],
                NetworkRole::MergeInternal,
            );
            let mut adapter = build_network(&spec, &format!("lateral.{id}.{l}"), &mut Rng::new(0))?;
            for (_, p) in adapter.params_mut().iter_mut() {
                p.value.data_mut().fill(0.0);
            }
            laterals.push(adapter);
        }
        let merge = MergeOperator::new(
            self.merge,
            self.alpha,
            Some(self.width),
            &format!("merge.{id}"),
            &mut Rng::stream(self.common.seed, id, "merge"),
        )?;
        let head = Heads::build(self.common.seed, task, self.width)?;
        Ok(PnnColumn {
            column,
            laterals,
            merge,
            head,
        })
    }
}

impl Strategy for PnnLite {
    fn kind(&self) -> StrategyKind {
        StrategyKind::PnnLite
    }

    fn train_task(&mut self, task: &TaskSpec, budget: &TrainBudget) -> Result<TrainLog> {
        let mut col = self.fresh(task)?;
        let mut rng = Rng::stream(self.common.seed, task.task_id, "batches");
        let mut log = fit(
            &mut PnnModel {
                base: &self.base,
                col: &mut col,
            },
            task,
            budget,
            self.common.loss,
            &mut rng,
            None,
        )?;
        col.merge.record_steps(budget.steps);
        log.final_alpha = col.merge.final_alpha();
        self.tasks.insert(task.task_id, col);
        Ok(log)
    }

    fn evaluate(&self, task: &TaskSpec, split: Split, zero_shot: bool) -> Result<Metric> {
        let fresh;
        let col = match self.tasks.get(&task.task_id) {
            Some(c) => c,
            None if zero_shot => {
                fresh = self.fresh(task)?;
                &fresh
            }
            None => return Err(Error::contract(format!("task {} has not been trained", task.task_id))),
        };
        let step = col.merge.steps_trained();
        evaluate_with(task.split(split), task.kind, self.common.loss, |tape, x| {
            col.forward(&self.base, tape, x, step)
        })
    }

    fn groups(&self) -> Vec<(ParamGroup, &ParamStore)> {
        let mut v = vec![(ParamGroup::Base, self.base.params())];
        for c in self.tasks.values() {
            v.push((ParamGroup::Side, c.column.params()));
            v.extend(c.laterals.iter().map(|l| (ParamGroup::Lateral, l.params())));
            v.extend(c.merge.stores().into_iter().map(|s| (ParamGroup::Merge, s)));
            v.push((ParamGroup::Readout, c.head.params()));
        }
        v
    }

    fn groups_mut(&mut self) -> Vec<(ParamGroup, &mut ParamStore)> {
        let mut v = vec![(ParamGroup::Base, self.base.params_mut())];
        for c in self.tasks.values_mut() {
            v.push((ParamGroup::Side, c.column.params_mut()));
            v.extend(c.laterals.iter_mut().map(|l| (ParamGroup::Lateral, l.params_mut())));
            v.extend(c.merge.stores_mut().into_iter().map(|s| (ParamGroup::Merge, s)));
            v.push((ParamGroup::Readout, c.head.params_mut()));
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
            .map(|(&t, c)| (t, c.merge.final_alpha().expect("alpha-blend merge")))
            .collect())
    }
}
