//! Operators combining base features `b` and side features `s`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{build_network, LayerSpec, Network, NetworkRole, NetworkSpec, ParamStore, Parameters};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeKind {
    /// `α·b + (1−α)·s`
    #[serde(alias = "addition")]
    AlphaBlend,
    /// `b ⊙ s`
    Product,
    /// `F(b) + s` with a two-layer perceptron `F`
    #[serde(alias = "mlp")]
    MlpAdapter,
    /// `γ(b) ⊙ s + β(b)`
    Film,
}

impl MergeKind {
    pub fn label(self) -> &'static str {
        match self {
            MergeKind::AlphaBlend => "alpha_blend",
            MergeKind::Product => "product",
            MergeKind::MlpAdapter => "mlp_adapter",
            MergeKind::Film => "film",
        }
    }
}

/// Fixed schedule for α, clocked in optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlphaCurriculum {
    Constant {
        value: f64,
    },
    /// α = 1 before `switch_step`, 0 from it on.
    StageSwitch {
        switch_step: usize,
    },
    /// α(N) = k / (k + N).
    Hyperbolic {
        k: f64,
    },
}

impl AlphaCurriculum {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AlphaCurriculum::Constant { value } if !(0.0..=1.0).contains(&value) => {
                Err(Error::Config(format!("constant alpha {value} outside [0, 1]")))
            }
            AlphaCurriculum::Hyperbolic { k } if !(k > 0.0 && k.is_finite()) => {
                Err(Error::Config(format!("hyperbolic k must be positive, got {k}")))
            }
            _ => Ok(()),
        }
    }

    pub fn value(&self, step: usize) -> f64 {
        match *self {
            AlphaCurriculum::Constant { value } => value,
            AlphaCurriculum::StageSwitch { switch_step } => {
                if step < switch_step {
                    1.0
                } else {
                    0.0
                }
            }
            AlphaCurriculum::Hyperbolic { k } => k / (k + step as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AlphaParam {
    /// α = sigmoid(a) with a trainable, starting at a = 0 (α = 0.5).
    #[default]
    Learnable,
    Scheduled(AlphaCurriculum),
}

pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// Effective α for a learnable logit or a schedule at `step`.
pub fn alpha_value(param: &AlphaParam, logit: f64, step: usize) -> f64 {
    match param {
        AlphaParam::Learnable => sigmoid(logit),
        AlphaParam::Scheduled(c) => c.value(step),
    }
}

#[derive(Debug, Clone, PartialEq)]
struct FilmNets {
    trunk: Network,
    gamma: Network,
    beta: Network,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOperator {
    kind: MergeKind,
    alpha: AlphaParam,
    prefix: String,
    params: ParamStore,
    adapter: Option<Network>,
    film: Option<FilmNets>,
    steps_trained: usize,
}

impl MergeOperator {
    /// `width` is the feature width, required for the MLP and FiLM operators
    /// whose internal networks act on flat feature vectors.
    pub fn new(kind: MergeKind, alpha: AlphaParam, width: Option<usize>, prefix: &str, rng: &mut Rng) -> Result<Self> {
        if let AlphaParam::Scheduled(c) = &alpha {
            c.validate()?;
        }
        let mut params = ParamStore::new();
        if kind == MergeKind::AlphaBlend && alpha == AlphaParam::Learnable {
            params.insert(format!("{prefix}.alpha_logit"), Tensor::scalar(0.0));
        }
        let need_width =
            || width.ok_or_else(|| Error::Spec(format!("{} merge needs flat feature vectors", kind.label())));
        let mut adapter = None;
        let mut film = None;
        match kind {
            MergeKind::MlpAdapter => {
                let w = need_width()?;
                let spec = NetworkSpec::mlp(&[w, w, w], LayerSpec::Relu, false, NetworkRole::MergeInternal);
                adapter = Some(build_network(&spec, &format!("{prefix}.adapter"), rng)?);
            }
            MergeKind::Film => {
                let w = need_width()?;
                let trunk_spec = NetworkSpec::mlp(&[w, w], LayerSpec::Relu, true, NetworkRole::MergeInternal);
                let head_spec = NetworkSpec::mlp(&[w, w], LayerSpec::Relu, false, NetworkRole::MergeInternal);
                let trunk = build_network(&trunk_spec, &format!("{prefix}.film_trunk"), rng)?;
                let mut gamma = build_network(&head_spec, &format!("{prefix}.film_gamma"), rng)?;
                let beta = build_network(&head_spec, &format!("{prefix}.film_beta"), rng)?;
                let gb = gamma.bias_name(0);
                gamma
                    .params_mut()
                    .get_mut(&gb)
                    .expect("head has bias")
                    .value
                    .data_mut()
                    .fill(1.0);
                film = Some(FilmNets { trunk, gamma, beta });
            }
            MergeKind::AlphaBlend | MergeKind::Product => {}
        }
        Ok(MergeOperator {
            kind,
            alpha,
            prefix: prefix.to_string(),
            params,
            adapter,
            film,
            steps_trained: 0,
        })
    }

    pub fn kind(&self) -> MergeKind {
        self.kind
    }

    pub fn alpha_param(&self) -> &AlphaParam {
        &self.alpha
    }

    fn logit_name(&self) -> String {
        format!("{}.alpha_logit", self.prefix)
    }

    /// Effective α at `step`, or `None` for operators without α.
    pub fn alpha(&self, step: usize) -> Option<f64> {
        if self.kind != MergeKind::AlphaBlend {
            return None;
        }
        let logit = self.params.get(&self.logit_name()).map_or(0.0, |p| p.value.item());
        Some(alpha_value(&self.alpha, logit, step))
    }

    /// α after the recorded number of training steps.
    pub fn final_alpha(&self) -> Option<f64> {
        self.alpha(self.steps_trained)
    }

    pub fn steps_trained(&self) -> usize {
        self.steps_trained
    }

    pub fn record_steps(&mut self, steps: usize) {
        self.steps_trained = steps;
    }

    pub fn set_alpha_logit(&mut self, a: f64) -> Result<()> {
        let name = self.logit_name();
        let p = self
            .params
            .get_mut(&name)
            .ok_or_else(|| Error::contract("merge has no learnable alpha"))?;
        p.value.data_mut()[0] = a;
        Ok(())
    }

    /// Sets the FiLM heads to γ ≡ 1, β ≡ 0.
    pub fn set_film_identity(&mut self) -> Result<()> {
        let film = self.film.as_mut().ok_or_else(|| Error::contract("not a FiLM merge"))?;
        for (head, bias) in [(&mut film.gamma, 1.0), (&mut film.beta, 0.0)] {
            for (name, p) in head.params_mut().iter_mut() {
                let fill = if name.ends_with(".bias") { bias } else { 0.0 };
                p.value.data_mut().fill(fill);
            }
        }
        Ok(())
    }

    pub fn freeze(&mut self) {
        for s in self.stores_mut() {
            s.freeze();
        }
    }

    pub fn forward(&self, tape: &mut Tape, b: Var, s: Var, step: usize) -> Result<Var> {
        if tape.shape(b) != tape.shape(s) {
            return Err(Error::dim(
                "merge",
                format!("base {:?} vs side {:?}", tape.shape(b), tape.shape(s)),
            ));
        }
        match self.kind {
            MergeKind::AlphaBlend => {
                let alpha = match self.alpha {
                    AlphaParam::Learnable => {
                        let a = self.params.var(tape, &self.logit_name())?;
                        tape.sigmoid(a)?
                    }
                    AlphaParam::Scheduled(c) => tape.constant(Tensor::scalar(c.value(step)))?,
                };
                tape.scalar_blend(alpha, b, s)
            }
            MergeKind::Product => tape.mul(b, s),
            MergeKind::MlpAdapter => {
                let f = self.adapter.as_ref().expect("built with adapter").forward(tape, b)?;
                tape.add(f, s)
            }
            MergeKind::Film => {
                let film = self.film.as_ref().expect("built with film nets");
                let h = film.trunk.forward(tape, b)?;
                let gamma = film.gamma.forward(tape, h)?;
                let beta = film.beta.forward(tape, h)?;
                let mod_s = tape.mul(gamma, s)?;
                tape.add(mod_s, beta)
            }
        }
    }
}

impl Parameters for MergeOperator {
    fn stores(&self) -> Vec<&ParamStore> {
        let mut v = vec![&self.params];
        if let Some(a) = &self.adapter {
            v.push(a.params());
        }
        if let Some(f) = &self.film {
            v.extend([f.trunk.params(), f.gamma.params(), f.beta.params()]);
        }
        v
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        let mut v = vec![&mut self.params];
        if let Some(a) = &mut self.adapter {
            v.push(a.params_mut());
        }
        if let Some(f) = &mut self.film {
            v.push(f.trunk.params_mut());
            v.push(f.gamma.params_mut());
            v.push(f.beta.params_mut());
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(op: &MergeOperator, b: Vec<f64>, s: Vec<f64>, shape: &[usize]) -> Vec<f64> {
        let mut tape = Tape::new();
        let bv = tape.constant(Tensor::new(shape.to_vec(), b).unwrap()).unwrap();
        let sv = tape.constant(Tensor::new(shape.to_vec(), s).unwrap()).unwrap();
        let r = op.forward(&mut tape, bv, sv, 0).unwrap();
        tape.value(r).data().to_vec()
    }

    fn scheduled(c: AlphaCurriculum) -> MergeOperator {
        MergeOperator::new(
            MergeKind::AlphaBlend,
            AlphaParam::Scheduled(c),
            None,
            "m",
            &mut Rng::new(0),
        )
        .unwrap()
    }

    #[test]
    fn alpha_one_is_feature_extraction() {
        let op = scheduled(AlphaCurriculum::Constant { value: 1.0 });
        assert_eq!(run(&op, vec![2.0, -4.0], vec![9.0, 3.0], &[1, 2]), vec![2.0, -4.0]);
    }

    #[test]
    fn alpha_half_arithmetic() {
        let op = scheduled(AlphaCurriculum::Constant { value: 0.5 });
        assert_eq!(run(&op, vec![2.0, 4.0], vec![0.0, 2.0], &[1, 2]), vec![1.0, 3.0]);
    }

    #[test]
    fn product_with_ones_is_side() {
        let op = MergeOperator::new(MergeKind::Product, AlphaParam::Learnable, None, "m", &mut Rng::new(0)).unwrap();
        assert_eq!(
            run(&op, vec![1.0; 3], vec![0.5, -2.0, 7.0], &[1, 3]),
            vec![0.5, -2.0, 7.0]
        );
    }

    #[test]
    fn film_identity_modulation() {
        let mut op =
            MergeOperator::new(MergeKind::Film, AlphaParam::Learnable, Some(3), "m", &mut Rng::new(5)).unwrap();
        op.set_film_identity().unwrap();
        let s = vec![0.25, -1.5, 3.0, 1.0, 2.0, -0.5];
        assert_eq!(run(&op, vec![0.3, 0.9, -2.0, 1.0, 1.0, 1.0], s.clone(), &[2, 3]), s);
    }

    #[test]
    fn learnable_starts_at_half() {
        let op = MergeOperator::new(
            MergeKind::AlphaBlend,
            AlphaParam::Learnable,
            None,
            "m",
            &mut Rng::new(0),
        )
        .unwrap();
        assert_eq!(op.alpha(0), Some(0.5));
        assert_eq!(op.final_alpha(), Some(0.5));
        assert_eq!(op.count_params(true), 1);
    }

    #[test]
    fn curricula_values() {
        let h = AlphaCurriculum::Hyperbolic { k: 1.0 };
        assert_eq!(h.value(0), 1.0);
        assert_eq!(h.value(1), 0.5);
        let s = AlphaCurriculum::StageSwitch { switch_step: 100 };
        assert_eq!(s.value(99), 1.0);
        assert_eq!(s.value(100), 0.0);
        assert_eq!(AlphaCurriculum::Constant { value: 0.3 }.value(12345), 0.3);
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(AlphaCurriculum::Hyperbolic { k: 0.0 }.validate().is_err());
        assert!(AlphaCurriculum::Constant { value: 1.5 }.validate().is_err());
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let op = scheduled(AlphaCurriculum::Constant { value: 0.5 });
        let mut tape = Tape::new();
        let b = tape.constant(Tensor::zeros(&[1, 2])).unwrap();
        let s = tape.constant(Tensor::zeros(&[1, 3])).unwrap();
        assert!(matches!(op.forward(&mut tape, b, s, 0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn alpha_absent_for_other_merges() {
        let op = MergeOperator::new(MergeKind::Product, AlphaParam::Learnable, None, "m", &mut Rng::new(0)).unwrap();
        assert_eq!(op.alpha(3), None);
        assert_eq!(op.count_params(false), 0);
    }
}
