//! Fixtures shared by the benchmarks.

use sidetune::tasks::{gaussian_mixture, gen_permuted_tasks, GaussianMixtureConfig, SequenceSpec};
use sidetune::{LayerSpec, NetworkRole, NetworkSpec, Rng, Tensor};

pub fn normal(shape: &[usize], seed: u64) -> Tensor {
    let mut r = Rng::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.normal()).collect()).expect("valid shape")
}

/// Two conv layers and a pooled linear readout on 3×16×16 inputs.
pub fn conv_spec() -> NetworkSpec {
    NetworkSpec {
        input_shape: vec![3, 16, 16],
        layers: vec![
            LayerSpec::Conv2d {
                in_channels: 3,
                out_channels: 8,
                kernel: 3,
                stride: 1,
                pad: 1,
                bias: true,
            },
            LayerSpec::Relu,
            LayerSpec::Conv2d {
                in_channels: 8,
                out_channels: 8,
                kernel: 3,
                stride: 2,
                pad: 1,
                bias: true,
            },
            LayerSpec::Relu,
            LayerSpec::AvgPool2d {
                kernel: 8,
                stride: None,
            },
            LayerSpec::Flatten,
            LayerSpec::Linear {
                in_features: 8,
                out_features: 10,
                bias: true,
            },
        ],
        role: NetworkRole::Base,
    }
}

pub fn permuted(m: usize, seed: u64) -> SequenceSpec {
    let cfg = GaussianMixtureConfig {
        train_size: 256,
        val_size: 128,
        ..Default::default()
    };
    gen_permuted_tasks(&gaussian_mixture(&cfg, seed).expect("mixture"), m, seed).expect("sequence")
}
