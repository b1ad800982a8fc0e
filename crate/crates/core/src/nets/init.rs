//! Side-network initialisation schemes.

use serde::{Deserialize, Serialize};

use super::{build_network, Network};
use crate::error::{Error, Result};
use crate::optim::OptimizerState;
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitScheme {
    /// Fresh Xavier-uniform weights.
    Xavier,
    /// Bitwise copy of the base; architectures must match.
    CopyBase,
    /// Final parametric layer zeroed so the side outputs exactly zero.
    LowEnergy,
    /// Regress the side's outputs onto the base's outputs.
    Distill(DistillConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "default_distill_steps")]
    pub steps: usize,
    #[serde(default = "default_distill_lr")]
    pub lr: f64,
    #[serde(default = "default_distill_batch")]
    pub batch_size: usize,
}

fn default_distill_steps() -> usize {
    2000
}

fn default_distill_lr() -> f64 {
    1e-2
}

fn default_distill_batch() -> usize {
    64
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            steps: default_distill_steps(),
            lr: default_distill_lr(),
            batch_size: default_distill_batch(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillReport {
    /// `(step, mse over the whole sample)` every 100 steps, starting at 0.
    pub checkpoints: Vec<(usize, f64)>,
    /// Lowest checkpoint mse so far at each checkpoint; the side ends at the
    /// parameters of the last entry.
    pub best_so_far: Vec<(usize, f64)>,
}

/// Initialises `side` against `base` according to `scheme`.
///
/// `sampler` supplies unlabeled inputs and is required for distillation.
pub fn init_side(
    side: Network,
    base: &Network,
    scheme: &InitScheme,
    sampler: Option<&Tensor>,
    rng: &mut Rng,
) -> Result<Network> {
    match scheme {
        InitScheme::Xavier => build_network(side.spec(), side.prefix(), rng),
        InitScheme::CopyBase => {
            let (s, b) = (side.spec(), base.spec());
            if s.layers != b.layers || s.input_shape != b.input_shape {
                return Err(Error::Scheme(
                    "copy_base requires identical base and side architectures".into(),
                ));
            }
            let mut copy = base.renamed(side.prefix());
            copy.unfreeze();
            Ok(copy)
        }
        InitScheme::LowEnergy => {
            let mut side = side;
            let last = *side
                .param_layers()
                .last()
                .ok_or_else(|| Error::Scheme("low_energy needs a parametric layer".into()))?;
            for name in [side.weight_name(last), side.bias_name(last)] {
                if let Some(p) = side.params_mut().get_mut(&name) {
                    p.value.data_mut().fill(0.0);
                }
            }
            Ok(side)
        }
        InitScheme::Distill(cfg) => {
            let inputs = sampler.ok_or_else(|| Error::Scheme("distill requires an input sampler".into()))?;
            let mut side = side;
            distill(&mut side, base, inputs, cfg, rng)?;
            Ok(side)
        }
    }
}

fn sample_mse(side: &Network, targets: &Tensor, inputs: &Tensor) -> Result<f64> {
    let pred = side.predict(inputs)?;
    let n = pred.len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(targets.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Trains `side` to reproduce `base`'s outputs (mean squared error) on
/// minibatches drawn from `inputs`, with Adam, keeping the best checkpoint.
pub fn distill(
    side: &mut Network,
    base: &Network,
    inputs: &Tensor,
    cfg: &DistillConfig,
    rng: &mut Rng,
) -> Result<DistillReport> {
    if side.output_shape() != base.output_shape() || side.spec().input_shape != base.spec().input_shape {
        return Err(Error::Scheme(format!(
            "distill needs matching input/output shapes: side {:?}→{:?}, base {:?}→{:?}",
            side.spec().input_shape,
            side.output_shape(),
            base.spec().input_shape,
            base.output_shape()
        )));
    }
    let n = inputs.shape()[0];
    let targets = base.predict(inputs)?;
    let mut opt = OptimizerState::adam(cfg.lr);
    let first = sample_mse(side, &targets, inputs)?;
    let mut checkpoints = vec![(0, first)];
    let mut best_so_far = vec![(0, first)];
    let mut best = (first, side.params().clone());
    let batch = cfg.batch_size.min(n).max(1);
    for step in 1..=cfg.steps {
        let idx: Vec<usize> = (0..batch).map(|_| rng.below(n)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(inputs.gather_rows(&idx))?;
        let y = tape.constant(targets.gather_rows(&idx))?;
        let pred = side.forward(&mut tape, x)?;
        let loss = tape.mse_loss(pred, y)?;
        let grads = tape.backward(loss)?;
        opt.step(&mut [side.params_mut()], &grads)?;
        if step % 100 == 0 || step == cfg.steps {
            let mse = sample_mse(side, &targets, inputs)?;
            checkpoints.push((step, mse));
            if mse < best.0 {
                best = (mse, side.params().clone());
            }
            best_so_far.push((step, best.0));
        }
    }
    *side.params_mut() = best.1;
    Ok(DistillReport {
        checkpoints,
        best_so_far,
    })
}
