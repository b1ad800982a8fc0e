//! Side-tuning laboratory: a frozen base network adapted by additive side
//! networks, the usual continual-learning baselines, and the metrics used to
//! compare them.

pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod harness;
pub mod merge;
pub mod nets;
pub mod optim;
pub mod rng;
pub mod strategies;
pub mod tape;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use merge::{AlphaCurriculum, AlphaParam, MergeKind, MergeOperator};
pub use nets::{build_network, LayerSpec, Network, NetworkRole, NetworkSpec, ParamStore, Parameters};
pub use optim::{OptimizerKind, OptimizerState};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
