//! Online elastic weight consolidation.

use std::collections::BTreeMap;

use super::train::task_loss;
use super::LossNorm;
use crate::error::{Error, Result};
use crate::nets::ParamStore;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tasks::{Dataset, TaskKind};
use crate::tensor::Tensor;

/// Penalty strengths searched by default.
pub const EWC_LAMBDA_GRID: [f64; 2] = [1.0, 1e5];

/// `λ/2 · Σ F (θ − θ*)²` over flat slices.
pub fn ewc_penalty_value(fisher: &[f64], theta: &[f64], anchor: &[f64], lambda: f64) -> f64 {
    let s: f64 = fisher
        .iter()
        .zip(theta.iter().zip(anchor))
        .map(|(f, (t, a))| f * (t - a) * (t - a))
        .sum();
    0.5 * lambda * s
}

/// Running Fisher estimate and anchor. Each consolidation decays the old
/// Fisher by `gamma` and adds the new one.
#[derive(Debug, Clone, PartialEq)]
pub struct EwcState {
    lambda: f64,
    gamma: f64,
    fisher_samples: usize,
    fisher: BTreeMap<String, Tensor>,
    anchor: BTreeMap<String, Tensor>,
    consolidations: usize,
}

impl EwcState {
    pub fn new(lambda: f64, gamma: f64, fisher_samples: usize) -> Result<Self> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::Config(format!("ewc lambda must be non-negative, got {lambda}")));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Config(format!("ewc gamma must lie in [0, 1], got {gamma}")));
        }
        if fisher_samples == 0 {
            return Err(Error::Config("ewc needs at least one fisher sample".into()));
        }
        Ok(EwcState {
            lambda,
            gamma,
            fisher_samples,
            fisher: BTreeMap::new(),
            anchor: BTreeMap::new(),
            consolidations: 0,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn fisher_samples(&self) -> usize {
        self.fisher_samples
    }

    pub fn consolidations(&self) -> usize {
        self.consolidations
    }

    pub fn fisher(&self) -> &BTreeMap<String, Tensor> {
        &self.fisher
    }

    pub fn anchor(&self) -> &BTreeMap<String, Tensor> {
        &self.anchor
    }

    /// Folds a new Fisher estimate in and re-anchors at the current values.
    pub fn consolidate(&mut self, params: &ParamStore, fisher_new: BTreeMap<String, Tensor>) -> Result<()> {
        for (name, f) in fisher_new {
            let value = params.value(&name)?;
            if value.shape() != f.shape() {
                return Err(Error::dim(
                    "ewc_consolidate",
                    format!("{name}: {:?} vs {:?}", value.shape(), f.shape()),
                ));
            }
            let merged = match self.fisher.remove(&name) {
                Some(mut old) => {
                    old.scale_assign(self.gamma);
                    old.add_assign(&f);
                    old
                }
                None => f,
            };
            self.fisher.insert(name.clone(), merged);
            self.anchor.insert(name, value.clone());
        }
        self.consolidations += 1;
        Ok(())
    }

    /// The penalty as a differentiable scalar, or `None` before any
    /// consolidation.
    pub fn penalty(&self, tape: &mut Tape, params: &ParamStore) -> Result<Option<Var>> {
        let mut total: Option<Var> = None;
        for (name, anchor) in &self.anchor {
            let p = params.var(tape, name)?;
            let a = tape.constant(anchor.clone())?;
            let f = tape.constant(self.fisher[name].clone())?;
            let d = tape.sub(p, a)?;
            let d2 = tape.mul(d, d)?;
            let w = tape.mul(d2, f)?;
            let s = tape.sum(w)?;
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
        }
        match total {
            Some(t) => Ok(Some(tape.scale(t, 0.5 * self.lambda)?)),
            None => Ok(None),
        }
    }

    pub fn penalty_value(&self, params: &ParamStore) -> Result<f64> {
        let mut s = 0.0;
        for (name, anchor) in &self.anchor {
            s += ewc_penalty_value(
                self.fisher[name].data(),
                params.value(name)?.data(),
                anchor.data(),
                self.lambda,
            );
        }
        Ok(s)
    }
}

/// Empirical Fisher diagonal: squared per-example gradients of the task loss
/// with respect to every trainable entry of `params`, averaged over up to
/// `samples` training examples.
pub(crate) fn empirical_fisher(
    params: &ParamStore,
    data: &Dataset,
    kind: TaskKind,
    norm: LossNorm,
    samples: usize,
    rng: &mut Rng,
    forward: impl Fn(&mut Tape, Var) -> Result<Var>,
) -> Result<BTreeMap<String, Tensor>> {
    let mut order = rng.permutation(data.len());
    order.truncate(samples.min(data.len()));
    let mut fisher: BTreeMap<String, Tensor> = params
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(n, p)| (n.clone(), Tensor::zeros(p.value.shape())))
        .collect();
    for &i in &order {
        let (x, y) = data.batch(&[i]);
        let mut tape = Tape::new();
        let xv = tape.constant(x)?;
        let out = forward(&mut tape, xv)?;
        let loss = task_loss(&mut tape, out, &y, kind, norm)?;
        let grads = tape.backward(loss)?;
        for (name, f) in fisher.iter_mut() {
            let g = grads
                .param(name)
                .ok_or_else(|| Error::contract(format!("no gradient for {name}")))?;
            for (fv, gv) in f.data_mut().iter_mut().zip(g.data()) {
                *fv += gv * gv;
            }
        }
    }
    let inv = 1.0 / order.len() as f64;
    for f in fisher.values_mut() {
        f.scale_assign(inv);
    }
    Ok(fisher)
}
