//! Boosted side networks: a stack of sides trained one after another on a
//! single task, each fitting what the frozen earlier members left over.

use serde::{Deserialize, Serialize};

use super::sidetune::build_side;
use super::train::{check_input, evaluate_with, feature_width, fit, Heads, TaskModel};
use super::{resolve_init, Common, Metric, TrainBudget};
use crate::error::{Error, Result};
use crate::nets::{build_network, init_side, InitScheme, LayerSpec, Network, NetworkSpec, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tasks::{Split, TaskSpec};
use crate::tensor::Tensor;

fn default_alpha() -> f64 {
    0.5
}

fn default_check_every() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoostConfig {
    pub members: usize,
    /// Member architecture; defaults to the base architecture.
    #[serde(default)]
    pub side: Option<NetworkSpec>,
    /// Initialisation of the first member; later members start low-energy.
    #[serde(default)]
    pub init: Option<InitScheme>,
    /// Fixed blend weight on the base.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Steps between best-so-far checkpoints of the full training loss.
    #[serde(default = "default_check_every")]
    pub check_every: usize,
}

impl BoostConfig {
    pub fn new(members: usize) -> Self {
        BoostConfig {
            members,
            side: None,
            init: None,
            alpha: default_alpha(),
            check_every: default_check_every(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostMemberLog {
    pub member: usize,
    /// Full training loss when the member was added.
    pub initial_loss: f64,
    /// Full training loss at the member's best checkpoint.
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

/// Representation `α·B(x) + (1 − α)·Σ_i S_i(x)` feeding one readout.
#[derive(Debug, Clone, PartialEq)]
pub struct BoostStack {
    base: Network,
    cfg: BoostConfig,
    side_spec: NetworkSpec,
    init: InitScheme,
    members: Vec<Network>,
    head: Option<Network>,
    common: Common,
    width: usize,
}

fn stack_forward(
    base: &Network,
    members: &[Network],
    head: &Network,
    alpha: f64,
    tape: &mut Tape,
    x: Var,
) -> Result<Var> {
    let b = base.forward(tape, x)?;
    let mut sum = members[0].forward(tape, x)?;
    for m in &members[1..] {
        let s = m.forward(tape, x)?;
        sum = tape.add(sum, s)?;
    }
    let a = tape.constant(Tensor::scalar(alpha))?;
    let r = tape.scalar_blend(a, b, sum)?;
    head.forward(tape, r)
}

struct StackModel<'a> {
    base: &'a Network,
    members: &'a mut [Network],
    head: &'a mut Network,
    alpha: f64,
}

impl TaskModel for StackModel<'_> {
    fn forward(&self, tape: &mut Tape, x: Var, _step: usize) -> Result<Var> {
        stack_forward(self.base, self.members, self.head, self.alpha, tape, x)
    }

    fn trainable(&mut self) -> Vec<&mut ParamStore> {
        let last = self.members.last_mut().expect("at least one member");
        vec![last.params_mut(), self.head.params_mut()]
    }
}

impl BoostStack {
    pub fn new(base: &Network, cfg: BoostConfig, common: Common) -> Result<Self> {
        if cfg.members == 0 {
            return Err(Error::Config("boost stack needs at least one member".into()));
        }
        if !(0.0..=1.0).contains(&cfg.alpha) {
            return Err(Error::Config(format!(
                "boost alpha must lie in [0, 1], got {}",
                cfg.alpha
            )));
        }
        let mut base = base.clone();
        base.freeze();
        let side_spec = cfg.side.clone().unwrap_or_else(|| base.spec().clone());
        if side_spec.output_shape()? != base.output_shape() {
            return Err(Error::Spec("boost members must match the base output shape".into()));
        }
        let width = feature_width(&base)?;
        let init = resolve_init(cfg.init.clone(), &base, &side_spec);
        Ok(BoostStack {
            base,
            cfg,
            side_spec,
            init,
            members: Vec::new(),
            head: None,
            common,
            width,
        })
    }

    pub fn members(&self) -> &[Network] {
        &self.members
    }

    /// Trainable parameters of the members and readout.
    pub fn param_count(&self) -> usize {
        let head = self.head.as_ref().map_or(0, |h| h.params().count(false));
        self.members.iter().map(|m| m.params().count(false)).sum::<usize>() + head
    }

    /// Trains all members in order, each with `budget`. Earlier members are
    /// frozen while later ones train; the readout keeps training throughout.
    pub fn train(&mut self, task: &TaskSpec, budget: &TrainBudget) -> Result<Vec<BoostMemberLog>> {
        check_input(&self.base, task)?;
        if !self.members.is_empty() {
            return Err(Error::contract("boost stack is already trained"));
        }
        let id = task.task_id;
        let mut head = Heads::build(self.common.seed, task, self.width)?;
        let mut logs = Vec::with_capacity(self.cfg.members);
        for j in 0..self.cfg.members {
            let prefix = format!("boost.{id}.{j}");
            let member = if j == 0 {
                build_side(&self.side_spec, &self.base, &self.init, &prefix, task, self.common.seed)?
            } else {
                let mut rng = Rng::stream(self.common.seed, id, &format!("boost-member-{j}"));
                let fresh = build_network(&self.side_spec, &prefix, &mut rng)?;
                init_side(fresh, &self.base, &InitScheme::LowEnergy, None, &mut rng)?
            };
            self.members.push(member);
            let mut rng = Rng::stream(self.common.seed, id, &format!("boost-batches-{j}"));
            let log = fit(
                &mut StackModel {
                    base: &self.base,
                    members: &mut self.members,
                    head: &mut head,
                    alpha: self.cfg.alpha,
                },
                task,
                budget,
                self.common.loss,
                &mut rng,
                Some(self.cfg.check_every),
            )?;
            self.members.last_mut().expect("just pushed").freeze();
            logs.push(BoostMemberLog {
                member: j,
                initial_loss: log.initial_loss,
                final_loss: log.final_loss,
                losses: log.losses,
            });
        }
        self.head = Some(head);
        Ok(logs)
    }

    pub fn evaluate(&self, task: &TaskSpec, split: Split) -> Result<Metric> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::contract("boost stack has not been trained"))?;
        evaluate_with(task.split(split), task.kind, self.common.loss, |tape, x| {
            stack_forward(&self.base, &self.members, head, self.cfg.alpha, tape, x)
        })
    }
}

/// A `members`-long boost stack against a single deeper side network with
/// about as many parameters, trained for the same total number of steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepVsStack {
    pub members: usize,
    pub stack_params: usize,
    pub deep_params: usize,
    pub deep_hidden_width: usize,
    pub stack_member_losses: Vec<f64>,
    pub stack_train_loss: f64,
    pub deep_train_loss: f64,
    pub stack_val: Metric,
    pub deep_val: Metric,
}

/// Deep MLP with `depth` hidden layers of width `h`, input and output as in
/// `like`, using `like`'s activation.
fn deep_spec(like: &NetworkSpec, depth: usize, h: usize) -> Result<NetworkSpec> {
    let dims: Vec<usize> = like
        .layers
        .iter()
        .filter_map(|l| match *l {
            LayerSpec::Linear {
                in_features,
                out_features,
                ..
            } => Some((in_features, out_features)),
            _ => None,
        })
        .fold(Vec::new(), |mut v, (i, o)| {
            if v.is_empty() {
                v.push(i);
            }
            v.push(o);
            v
        });
    let linear = like
        .layers
        .iter()
        .all(|l| matches!(l, LayerSpec::Linear { .. } | LayerSpec::Relu | LayerSpec::Tanh));
    if !linear || dims.len() < 2 {
        return Err(Error::Spec("deep-vs-stack needs an MLP side".into()));
    }
    let act = like
        .layers
        .iter()
        .find(|l| !l.has_params())
        .cloned()
        .unwrap_or(LayerSpec::Relu);
    let final_act = !like.layers.last().expect("non-empty").has_params();
    let mut widths = vec![dims[0]];
    widths.extend(std::iter::repeat_n(h, depth));
    widths.push(*dims.last().expect("non-empty"));
    Ok(NetworkSpec::mlp(&widths, act, final_act, like.role))
}

pub fn deep_vs_stack(
    base: &Network,
    cfg: &BoostConfig,
    task: &TaskSpec,
    budget: &TrainBudget,
    common: Common,
) -> Result<DeepVsStack> {
    let mut stack = BoostStack::new(base, cfg.clone(), common)?;
    let logs = stack.train(task, budget)?;
    let stack_params = stack.param_count();

    let side = stack.side_spec.clone();
    let hidden = side
        .layers
        .iter()
        .filter(|l| l.has_params())
        .count()
        .saturating_sub(1)
        .max(1);
    let depth = hidden * cfg.members;
    let head_params = stack.head.as_ref().map_or(0, |h| h.params().count(false));
    let target = stack_params - head_params;
    let mut best = (usize::MAX, 1);
    for h in 1..=4096 {
        let spec = deep_spec(&side, depth, h)?;
        let n = build_network(&spec, "probe", &mut Rng::new(0))?.params().count(false);
        let gap = n.abs_diff(target);
        if gap < best.0 {
            best = (gap, h);
        }
        if n > target {
            break;
        }
    }
    let deep_side = deep_spec(&side, depth, best.1)?;
    let deep_cfg = BoostConfig {
        members: 1,
        side: Some(deep_side),
        init: Some(InitScheme::Xavier),
        alpha: cfg.alpha,
        check_every: cfg.check_every,
    };
    let mut deep = BoostStack::new(base, deep_cfg, common)?;
    let deep_budget = TrainBudget {
        steps: budget.steps * cfg.members,
        ..*budget
    };
    let deep_logs = deep.train(task, &deep_budget)?;
    Ok(DeepVsStack {
        members: cfg.members,
        stack_params,
        deep_params: deep.param_count(),
        deep_hidden_width: best.1,
        stack_member_losses: logs.iter().map(|l| l.final_loss).collect(),
        stack_train_loss: logs.last().expect("members ≥ 1").final_loss,
        deep_train_loss: deep_logs[0].final_loss,
        stack_val: stack.evaluate(task, Split::Val)?,
        deep_val: deep.evaluate(task, Split::Val)?,
    })
}
