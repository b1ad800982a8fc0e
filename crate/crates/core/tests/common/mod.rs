#![allow(dead_code)]

use sidetune::harness::pretrain_base;
use sidetune::strategies::{LossNorm, TrainBudget};
use sidetune::tasks::{gaussian_mixture, gen_permuted_tasks, GaussianMixtureConfig, SequenceSpec};
use sidetune::{LayerSpec, Network, NetworkRole, NetworkSpec};

pub fn base_spec() -> NetworkSpec {
    NetworkSpec::mlp(&[16, 32, 16], LayerSpec::Tanh, true, NetworkRole::Base)
}

pub fn side_spec() -> NetworkSpec {
    NetworkSpec::mlp(&[16, 8, 16], LayerSpec::Tanh, true, NetworkRole::Side)
}

pub fn permuted(m: usize, seed: u64) -> SequenceSpec {
    let cfg = GaussianMixtureConfig {
        train_size: 128,
        val_size: 128,
        ..Default::default()
    };
    gen_permuted_tasks(&gaussian_mixture(&cfg, seed).unwrap(), m, seed).unwrap()
}

pub fn budget(steps: usize) -> TrainBudget {
    TrainBudget::new(steps, 32, 1e-2)
}

pub fn pretrained_base(seq: &SequenceSpec, seed: u64) -> Network {
    pretrain_base(&base_spec(), Some((&seq.tasks[0], &budget(200))), seed, LossNorm::Mse).unwrap()
}
