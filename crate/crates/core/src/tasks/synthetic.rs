//! Self-contained synthetic task families.

use serde::{Deserialize, Serialize};

use super::{Dataset, SequenceFamily, SequenceSpec, Targets, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

/// A labelled train/val pair that task families are carved from.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceData {
    pub train: Dataset,
    pub val: Dataset,
    pub kind: TaskKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixtureConfig {
    #[serde(default = "default_input_shape")]
    pub input_shape: Vec<usize>,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_train")]
    pub train_size: usize,
    #[serde(default = "default_val")]
    pub val_size: usize,
    /// Standard deviation of the class means relative to unit within-class noise.
    #[serde(default = "default_separation")]
    pub separation: f64,
}

fn default_input_shape() -> Vec<usize> {
    vec![16]
}
fn default_classes() -> usize {
    4
}
fn default_train() -> usize {
    256
}
fn default_val() -> usize {
    256
}
fn default_separation() -> f64 {
    0.6
}

impl Default for GaussianMixtureConfig {
    fn default() -> Self {
        GaussianMixtureConfig {
            input_shape: default_input_shape(),
            num_classes: default_classes(),
            train_size: default_train(),
            val_size: default_val(),
            separation: default_separation(),
        }
    }
}

/// Balanced Gaussian-mixture classification data, standardised with the
/// training split's statistics.
pub fn gaussian_mixture(cfg: &GaussianMixtureConfig, seed: u64) -> Result<SourceData> {
    let c = cfg.num_classes;
    if c < 2 || cfg.train_size == 0 || cfg.val_size == 0 {
        return Err(Error::Config("mixture needs ≥2 classes and non-empty splits".into()));
    }
    let d: usize = cfg.input_shape.iter().product();
    if d == 0 {
        return Err(Error::Config("input shape must be non-empty".into()));
    }
    let mut means_rng = Rng::stream(seed, 0, "mixture-means");
    let means: Vec<f64> = (0..c * d).map(|_| cfg.separation * means_rng.normal()).collect();
    let draw = |n: usize, label: &str| -> Result<Dataset> {
        let mut r = Rng::stream(seed, 0, label);
        let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        r.shuffle(&mut labels);
        let mut data = Vec::with_capacity(n * d);
        for &y in &labels {
            for f in 0..d {
                data.push(means[y * d + f] + r.normal());
            }
        }
        let mut shape = vec![n];
        shape.extend(&cfg.input_shape);
        Dataset::new(Tensor::new(shape, data)?, Targets::Classes(labels))
    };
    let mut train = draw(cfg.train_size, "mixture-train")?;
    let mut val = draw(cfg.val_size, "mixture-val")?;
    Dataset::normalize_pair(&mut train, &mut val)?;
    Ok(SourceData {
        train,
        val,
        kind: TaskKind::Classification { num_classes: c },
    })
}

/// `out[.., i] = x[.., perm[i]]` over the flattened per-example features.
pub fn permute_features(x: &Tensor, perm: &[usize]) -> Tensor {
    let d = perm.len();
    let mut out = x.clone();
    for (dst, src) in out.data_mut().chunks_mut(d).zip(x.data().chunks(d)) {
        for (o, &p) in dst.iter_mut().zip(perm) {
            *o = src[p];
        }
    }
    out
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `m` tasks sharing the source labels, task `j` seeing inputs under a fixed
/// feature permutation. Task 0 uses the identity.
pub fn gen_permuted_tasks(source: &SourceData, m: usize, seed: u64) -> Result<SequenceSpec> {
    if m < 1 {
        return Err(Error::Config("permuted sequence needs m ≥ 1".into()));
    }
    let d: usize = source.train.input_shape().iter().product();
    let tasks = (0..m)
        .map(|j| {
            let perm = if j == 0 {
                (0..d).collect()
            } else {
                Rng::stream(seed, j, "permutation").permutation(d)
            };
            TaskSpec::new(
                j,
                source.kind,
                source.train.map_inputs(|x| permute_features(x, &perm)),
                source.val.map_inputs(|x| permute_features(x, &perm)),
                derive_seed(seed, j, "task"),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    SequenceSpec::new(SequenceFamily::Permuted, tasks, seed)
}

/// Disjoint class partition; labels inside each task are remapped to
/// `0..classes_per_task` in increasing order of the original class.
pub fn gen_split_class_tasks(source: &SourceData, classes_per_task: usize, seed: u64) -> Result<SequenceSpec> {
    let TaskKind::Classification { num_classes } = source.kind else {
        return Err(Error::Config("split_class needs a labelled source".into()));
    };
    if classes_per_task == 0 || num_classes % classes_per_task != 0 {
        return Err(Error::Config(format!(
            "{num_classes} classes cannot be split into groups of {classes_per_task}"
        )));
    }
    let order = Rng::stream(seed, 0, "class-split").permutation(num_classes);
    let mut tasks = Vec::new();
    for (j, group) in order.chunks(classes_per_task).enumerate() {
        let mut group = group.to_vec();
        group.sort_unstable();
        let carve = |d: &Dataset| {
            let Targets::Classes(labels) = d.targets() else {
                unreachable!()
            };
            let idx: Vec<usize> = (0..d.len()).filter(|&i| group.contains(&labels[i])).collect();
            let remapped = idx
                .iter()
                .map(|&i| group.iter().position(|&g| g == labels[i]).expect("in group"))
                .collect();
            d.subset(&idx).with_targets(Targets::Classes(remapped))
        };
        let (train, val) = (carve(&source.train), carve(&source.val));
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config(format!("task {j} has an empty split")));
        }
        tasks.push(TaskSpec::new(
            j,
            TaskKind::Classification {
                num_classes: classes_per_task,
            },
            train,
            val,
            derive_seed(seed, j, "task"),
        )?);
    }
    SequenceSpec::new(SequenceFamily::SplitClass, tasks, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotatedRegressionConfig {
    pub num_tasks: usize,
    #[serde(default = "default_rr_in")]
    pub in_dim: usize,
    #[serde(default = "default_rr_out")]
    pub out_dim: usize,
    #[serde(default = "default_rr_train")]
    pub train_size: usize,
    #[serde(default = "default_val")]
    pub val_size: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Rotation angle of the last task, radians; task `j` uses `j/(m−1)` of it.
    #[serde(default = "default_angle")]
    pub max_angle: f64,
}

fn default_rr_in() -> usize {
    8
}
fn default_rr_out() -> usize {
    4
}
fn default_rr_train() -> usize {
    128
}
fn default_noise() -> f64 {
    0.05
}
fn default_angle() -> f64 {
    std::f64::consts::FRAC_PI_2
}

impl RotatedRegressionConfig {
    pub fn new(num_tasks: usize) -> Self {
        RotatedRegressionConfig {
            num_tasks,
            in_dim: default_rr_in(),
            out_dim: default_rr_out(),
            train_size: default_rr_train(),
            val_size: default_val(),
            noise: default_noise(),
            max_angle: default_angle(),
        }
    }
}

/// Shared teacher `W` with per-task output rotations `Q_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct RotatedTeacher {
    /// `in_dim × out_dim`, applied as `x · W`.
    pub weight: Tensor,
    pub angles: Vec<f64>,
}

impl RotatedTeacher {
    /// Pre-activation `Q_j · W · x` for each row of `x`.
    fn rotated(&self, x: &Tensor, task: usize) -> Tensor {
        let (n, i) = (x.shape()[0], x.shape()[1]);
        let o = self.weight.shape()[1];
        let mut z = crate::tape::matmul_raw(x.data(), self.weight.data(), n, i, o);
        let (c, s) = (self.angles[task].cos(), self.angles[task].sin());
        for row in z.chunks_mut(o) {
            for p in 0..o / 2 {
                let (a, b) = (row[2 * p], row[2 * p + 1]);
                row[2 * p] = c * a - s * b;
                row[2 * p + 1] = s * a + c * b;
            }
        }
        Tensor::from_parts_unchecked(vec![n, o], z)
    }

    /// Noise-free targets `tanh(Q_j · W · x)`.
    pub fn predict(&self, x: &Tensor, task: usize) -> Tensor {
        self.rotated(x, task).map(f64::tanh)
    }
}

/// Regression tasks `y = tanh(Q_j·W·x) + noise` over shared inputs. `Q_j`
/// rotates consecutive output pairs by an angle growing linearly with `j`,
/// from the identity at task 0, so relatedness to the teacher decreases along
/// the sequence.
pub fn gen_rotated_regression(cfg: &RotatedRegressionConfig, seed: u64) -> Result<(SequenceSpec, RotatedTeacher)> {
    if cfg.num_tasks < 1 {
        return Err(Error::Config("rotated regression needs m ≥ 1".into()));
    }
    if cfg.in_dim == 0 || cfg.out_dim == 0 || cfg.train_size == 0 || cfg.val_size == 0 {
        return Err(Error::Config("rotated regression dimensions must be positive".into()));
    }
    let mut wr = Rng::stream(seed, 0, "teacher");
    let scale = 1.0 / (cfg.in_dim as f64).sqrt();
    let weight = Tensor::new(
        vec![cfg.in_dim, cfg.out_dim],
        (0..cfg.in_dim * cfg.out_dim)
            .map(|_| 2.0 * scale * wr.normal())
            .collect(),
    )?;
    let m = cfg.num_tasks;
    let angles = (0..m)
        .map(|j| {
            if m == 1 {
                0.0
            } else {
                cfg.max_angle * j as f64 / (m - 1) as f64
            }
        })
        .collect();
    let teacher = RotatedTeacher { weight, angles };
    let inputs = |n: usize, label: &str| {
        let mut r = Rng::stream(seed, 0, label);
        Tensor::new(vec![n, cfg.in_dim], (0..n * cfg.in_dim).map(|_| r.normal()).collect())
    };
    let (xt, xv) = (inputs(cfg.train_size, "rr-train")?, inputs(cfg.val_size, "rr-val")?);
    let mut train = Dataset {
        inputs: xt,
        targets: Targets::Classes(vec![0; cfg.train_size]),
        norm: None,
    };
    let mut val = Dataset {
        inputs: xv,
        targets: Targets::Classes(vec![0; cfg.val_size]),
        norm: None,
    };
    Dataset::normalize_pair(&mut train, &mut val)?;
    let kind = TaskKind::Regression { out_dim: cfg.out_dim };
    let tasks = (0..m)
        .map(|j| {
            let targets = |d: &Dataset, label: &str| {
                let mut r = Rng::stream(seed, j, label);
                let mut y = teacher.predict(d.inputs(), j);
                if cfg.noise > 0.0 {
                    for v in y.data_mut() {
                        *v += cfg.noise * r.normal();
                    }
                }
                Targets::Values(y)
            };
            let tr = train.with_targets(targets(&train, "rr-noise-train"));
            let va = val.with_targets(targets(&val, "rr-noise-val"));
            TaskSpec::new(j, kind, tr, va, derive_seed(seed, j, "task"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        SequenceSpec::new(SequenceFamily::RotatedRegression, tasks, seed)?,
        teacher,
    ))
}
