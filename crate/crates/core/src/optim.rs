//! First-order optimizers over [`ParamStore`]s.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::ParamStore;
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl OptimizerState {
    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    /// Adam with betas (0.9, 0.999) and epsilon 1e-8.
    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        OptimizerState {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable entry of `stores`.
    ///
    /// Every trainable entry must have a gradient in `grads`; frozen entries
    /// are skipped.
    pub fn step(&mut self, stores: &mut [&mut ParamStore], grads: &Gradients) -> Result<()> {
        for store in stores.iter() {
            for (name, p) in store.iter() {
                if p.frozen {
                    continue;
                }
                match grads.param(name) {
                    Some(g) if g.shape() == p.value.shape() => {}
                    Some(g) => {
                        return Err(Error::contract(format!(
                            "gradient for {name} has shape {:?}, parameter has {:?}",
                            g.shape(),
                            p.value.shape()
                        )))
                    }
                    None => return Err(Error::contract(format!("missing gradient for {name}"))),
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for store in stores.iter_mut() {
            for (name, p) in store.iter_mut() {
                if p.frozen {
                    continue;
                }
                let g = grads.param(name).expect("checked above");
                match self.kind {
                    OptimizerKind::Sgd => {
                        for (w, gv) in p.value.data_mut().iter_mut().zip(g.data()) {
                            *w -= self.lr * gv;
                        }
                    }
                    OptimizerKind::Adam => {
                        let (m, v) = self
                            .moments
                            .entry(name.clone())
                            .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
                        for (((w, gv), mv), vv) in p
                            .value
                            .data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .zip(m.data_mut())
                            .zip(v.data_mut())
                        {
                            *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                            *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                            let mhat = *mv / bc1;
                            let vhat = *vv / bc2;
                            *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn grads_for(store: &ParamStore, g: f64) -> Gradients {
        // loss = g · Σ p, so ∂loss/∂p = g everywhere
        let mut tape = Tape::new();
        let mut total = None;
        for (name, _) in store.iter() {
            let v = store.var(&mut tape, name).unwrap();
            let s = tape.sum(v).unwrap();
            let s = tape.scale(s, g).unwrap();
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s).unwrap(),
            });
        }
        tape.backward(total.unwrap()).unwrap()
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(1.0));
        let grads = grads_for(&store, 2.0);
        let mut opt = OptimizerState::sgd(0.1);
        opt.step(&mut [&mut store], &grads).unwrap();
        assert!((store.value("p").unwrap().item() - 0.8).abs() < 1e-15);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn sgd_zero_grad_is_fixed_point() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::from_vec(vec![0.3, -0.7]));
        let before = store.clone();
        let grads = grads_for(&store, 0.0);
        OptimizerState::sgd(0.5).step(&mut [&mut store], &grads).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        for g in [3.0, -0.02] {
            let mut store = ParamStore::new();
            store.insert("p", Tensor::scalar(1.0));
            let grads = grads_for(&store, g);
            let mut opt = OptimizerState::adam(0.01);
            opt.step(&mut [&mut store], &grads).unwrap();
            let moved = store.value("p").unwrap().item() - 1.0;
            assert!((moved + 0.01 * f64::signum(g)).abs() < 1e-8, "moved {moved}");
        }
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(1.0));
        let mut other = ParamStore::new();
        other.insert("q", Tensor::scalar(1.0));
        let grads = grads_for(&other, 1.0);
        let err = OptimizerState::sgd(0.1).step(&mut [&mut store], &grads);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_entries_untouched() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(1.0));
        store.freeze();
        let grads = grads_for(&ParamStore::new_with("x"), 1.0);
        OptimizerState::adam(0.1).step(&mut [&mut store], &grads).unwrap();
        assert_eq!(store.value("p").unwrap().item(), 1.0);
    }

    impl ParamStore {
        fn new_with(name: &str) -> Self {
            let mut s = ParamStore::new();
            s.insert(name, Tensor::scalar(0.0));
            s
        }
    }
}
