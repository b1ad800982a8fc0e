//! A fixed battery of gradient checks covering every differentiable op,
//! each merge operator, lateral adapters and the EWC penalty.

use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::merge::{AlphaParam, MergeKind, MergeOperator};
use crate::nets::{build_network, LayerSpec, Network, NetworkRole, NetworkSpec, ParamStore, Parameters};
use crate::rng::Rng;
use crate::strategies::{EwcState, PnnColumn};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Tolerance for every case except the EWC penalty.
pub const GRAD_TOL: f64 = 1e-5;
/// The EWC penalty is quadratic, so finite differences are nearly exact.
pub const EWC_TOL: f64 = 1e-7;

pub const CASES: &[&str] = &[
    "matmul",
    "linear",
    "elementwise",
    "relu",
    "tanh",
    "sigmoid",
    "conv2d",
    "conv2d_strided",
    "avgpool_flatten",
    "mse_loss",
    "l1_loss",
    "softmax_ce",
    "merge_alpha",
    "merge_product",
    "merge_mlp",
    "merge_film",
    "pnn_laterals",
    "ewc_penalty",
    "sidetune_net",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteCase {
    pub name: &'static str,
    pub seed: u64,
    pub tol: f64,
    pub report: GradCheckReport,
}

fn normal(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).expect("valid shape")
}

/// Normal draws pushed at least `margin` away from zero.
fn away_from_zero(rng: &mut Rng, shape: &[usize], margin: f64) -> Tensor {
    let mut t = normal(rng, shape, 1.0);
    for v in t.data_mut() {
        *v = v.signum() * (v.abs() + margin);
    }
    t
}

/// `Σ out ⊙ r` for a fixed random `r`: every output element gets a generic
/// upstream gradient.
fn probe(tape: &mut Tape, out: Var, r: &Tensor) -> Result<Var> {
    let rv = tape.constant(r.clone())?;
    let w = tape.mul(out, rv)?;
    tape.sum(w)
}

fn store(entries: Vec<(&str, Tensor)>) -> ParamStore {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.insert(n, t);
    }
    s
}

fn check_store(s: &mut ParamStore, loss: impl Fn(&ParamStore, &mut Tape) -> Result<Var>) -> GradCheckReport {
    grad_check(s, loss, GRAD_TOL)
}

/// Redraws `x` until no first-layer pre-activation of `net` lies within
/// `margin` of zero, so ReLU kinks stay outside the finite-difference step.
fn relu_safe_input(net: &Network, rng: &mut Rng, shape: &[usize], margin: f64) -> Result<Tensor> {
    for _ in 0..1000 {
        let x = normal(rng, shape, 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let z = net.forward_range(&mut tape, xv, 0..1)?;
        if tape.value(z).data().iter().all(|v| v.abs() > margin) {
            return Ok(x);
        }
    }
    Err(Error::contract("could not draw a kink-free input"))
}

fn merge_case(kind: MergeKind, rng: &mut Rng) -> Result<GradCheckReport> {
    let (n, w) = (3, 4);
    let mut op = MergeOperator::new(kind, AlphaParam::Learnable, Some(w), "merge", rng)?;
    if kind == MergeKind::AlphaBlend {
        op.set_alpha_logit(rng.uniform_range(-2.0, 2.0))?;
    }
    // Non-trivial FiLM heads so γ and β depend on the base.
    for s in op.stores_mut() {
        for (name, p) in s.iter_mut() {
            if name.ends_with(".bias") {
                for v in p.value.data_mut() {
                    *v += 0.1 * rng.normal();
                }
            }
        }
    }
    let b = match kind {
        MergeKind::MlpAdapter | MergeKind::Film => {
            let probe_net = match kind {
                MergeKind::MlpAdapter => op_internal_first_layer(&op, "adapter"),
                _ => op_internal_first_layer(&op, "film_trunk"),
            };
            relu_safe_input(&probe_net, rng, &[n, w], 0.02)?
        }
        _ => normal(rng, &[n, w], 1.0),
    };
    let s = normal(rng, &[n, w], 1.0);
    let r = normal(rng, &[n, w], 1.0);
    struct Target {
        op: MergeOperator,
        inputs: ParamStore,
    }
    impl Parameters for Target {
        fn stores(&self) -> Vec<&ParamStore> {
            let mut v = self.op.stores();
            v.push(&self.inputs);
            v
        }
        fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
            let mut v = self.op.stores_mut();
            v.push(&mut self.inputs);
            v
        }
    }
    let mut target = Target {
        op,
        inputs: store(vec![("b", b), ("s", s)]),
    };
    Ok(grad_check(
        &mut target,
        |t, tape| {
            let b = t.inputs.var(tape, "b")?;
            let s = t.inputs.var(tape, "s")?;
            let out = t.op.forward(tape, b, s, 0)?;
            probe(tape, out, &r)
        },
        GRAD_TOL,
    ))
}

/// The first linear layer of a merge's internal network, as a standalone
/// network, for kink screening.
fn op_internal_first_layer(op: &MergeOperator, part: &str) -> Network {
    let mut found = None;
    for s in op.stores() {
        if let Some((name, p)) = s.iter().find(|(n, _)| n.contains(part) && n.ends_with(".0.weight")) {
            found = Some((
                name.clone(),
                p.value.clone(),
                s.value(&name.replace(".weight", ".bias")).ok().cloned(),
            ));
        }
    }
    let (_, w, b) = found.expect("merge has the internal network");
    let (i, o) = (w.shape()[0], w.shape()[1]);
    let spec = NetworkSpec::new(vec![i], vec![LayerSpec::linear(i, o)], NetworkRole::MergeInternal);
    let mut net = build_network(&spec, "probe", &mut Rng::new(0)).expect("valid spec");
    net.params_mut().get_mut("probe.0.weight").expect("weight").value = w;
    if let Some(b) = b {
        net.params_mut().get_mut("probe.0.bias").expect("bias").value = b;
    }
    net
}

/// Adds small noise to every parameter so zero biases become generic.
fn perturbed(mut net: Network, rng: &mut Rng) -> Network {
    for (_, p) in net.params_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v += 0.1 * rng.normal();
        }
    }
    net
}

fn mlp(widths: &[usize], prefix: &str, rng: &mut Rng, role: NetworkRole) -> Result<Network> {
    let net = build_network(&NetworkSpec::mlp(widths, LayerSpec::Tanh, true, role), prefix, rng)?;
    Ok(perturbed(net, rng))
}

fn pnn_case(rng: &mut Rng) -> Result<GradCheckReport> {
    let widths = [5, 6, 4];
    let mut base = mlp(&widths, "base", rng, NetworkRole::Base)?;
    base.freeze();
    let column = mlp(&[5, 3, 4], "col", rng, NetworkRole::Side)?;
    let spec = NetworkSpec::new(vec![6], vec![LayerSpec::linear(6, 3)], NetworkRole::MergeInternal);
    let lateral = perturbed(build_network(&spec, "lateral", rng)?, rng);
    let mut merge = MergeOperator::new(MergeKind::AlphaBlend, AlphaParam::Learnable, Some(4), "merge", rng)?;
    merge.set_alpha_logit(rng.uniform_range(-1.0, 1.0))?;
    let head = mlp(&[4, 3], "head", rng, NetworkRole::Readout)?;
    let mut col = PnnColumn {
        column,
        laterals: vec![lateral],
        merge,
        head,
    };
    let x = normal(rng, &[3, 5], 1.0);
    let r = normal(rng, &[3, 3], 1.0);
    Ok(grad_check(
        &mut col,
        |c, tape| {
            let xv = tape.constant(x.clone())?;
            let out = c.forward(&base, tape, xv, 0)?;
            probe(tape, out, &r)
        },
        GRAD_TOL,
    ))
}

fn ewc_case(rng: &mut Rng) -> Result<GradCheckReport> {
    let shapes: [(&str, &[usize]); 2] = [("w", &[3, 4]), ("b", &[4])];
    let anchor = store(shapes.iter().map(|&(n, s)| (n, normal(rng, s, 1.0))).collect());
    let fisher = shapes
        .iter()
        .map(|&(n, s)| {
            let mut f = normal(rng, s, 1.0);
            f.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.01);
            (n.to_string(), f)
        })
        .collect();
    let mut ewc = EwcState::new(rng.uniform_range(0.5, 2.0), 1.0, 1)?;
    ewc.consolidate(&anchor, fisher)?;
    let mut current = store(shapes.iter().map(|&(n, s)| (n, normal(rng, s, 1.0))).collect());
    Ok(grad_check(
        &mut current,
        |s, tape| ewc.penalty(tape, s)?.ok_or_else(|| Error::contract("no penalty")),
        EWC_TOL,
    ))
}

fn sidetune_case(rng: &mut Rng) -> Result<GradCheckReport> {
    let mut base = mlp(&[5, 6, 4], "base", rng, NetworkRole::Base)?;
    base.freeze();
    let side = mlp(&[5, 3, 4], "side", rng, NetworkRole::Side)?;
    let mut merge = MergeOperator::new(MergeKind::AlphaBlend, AlphaParam::Learnable, Some(4), "merge", rng)?;
    merge.set_alpha_logit(rng.uniform_range(-1.0, 1.0))?;
    let spec = NetworkSpec::new(vec![4], vec![LayerSpec::linear(4, 3)], NetworkRole::Readout);
    let head = build_network(&spec, "head", rng)?;
    let x = normal(rng, &[6, 5], 1.0);
    let labels: Vec<usize> = (0..6).map(|_| rng.below(3)).collect();
    struct Model {
        side: Network,
        merge: MergeOperator,
        head: Network,
    }
    impl Parameters for Model {
        fn stores(&self) -> Vec<&ParamStore> {
            let mut v = vec![self.side.params(), self.head.params()];
            v.extend(self.merge.stores());
            v
        }
        fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
            let mut v = vec![self.side.params_mut(), self.head.params_mut()];
            v.extend(self.merge.stores_mut());
            v
        }
    }
    let mut model = Model { side, merge, head };
    Ok(grad_check(
        &mut model,
        |m, tape| {
            let xv = tape.constant(x.clone())?;
            let b = base.forward(tape, xv)?;
            let s = m.side.forward(tape, xv)?;
            let r = m.merge.forward(tape, b, s, 0)?;
            let out = m.head.forward(tape, r)?;
            tape.softmax_cross_entropy(out, &labels)
        },
        GRAD_TOL,
    ))
}

fn layer_case(spec: NetworkSpec, input: &[usize], rng: &mut Rng) -> Result<GradCheckReport> {
    let mut net = perturbed(build_network(&spec, "net", rng)?, rng);
    let x = normal(rng, input, 1.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let out = net.forward(&mut tape, xv)?;
    let out_shape = tape.shape(out).to_vec();
    let r = normal(rng, &out_shape, 1.0);
    Ok(grad_check(
        &mut net,
        |n, tape| {
            let xv = tape.constant(x.clone())?;
            let out = n.forward(tape, xv)?;
            probe(tape, out, &r)
        },
        GRAD_TOL,
    ))
}

/// Runs one named case. The seed fixes every random draw in it.
pub fn run_case(name: &str, seed: u64) -> Result<SuiteCase> {
    let name: &'static str = CASES
        .iter()
        .find(|&&c| c == name)
        .copied()
        .ok_or_else(|| Error::Config(format!("unknown gradient case {name:?}")))?;
    let rng = &mut Rng::stream(seed, 0, name);
    let mut tol = GRAD_TOL;
    let report = match name {
        "matmul" => {
            let mut s = store(vec![("a", normal(rng, &[3, 4], 1.0)), ("b", normal(rng, &[4, 2], 1.0))]);
            let r = normal(rng, &[3, 2], 1.0);
            check_store(&mut s, |s, t| {
                let (a, b) = (s.var(t, "a")?, s.var(t, "b")?);
                let y = t.matmul(a, b)?;
                probe(t, y, &r)
            })
        }
        "linear" => layer_case(
            NetworkSpec::new(vec![5], vec![LayerSpec::linear(5, 3)], NetworkRole::Base),
            &[4, 5],
            rng,
        )?,
        "elementwise" => {
            let mut s = store(vec![
                ("a", normal(rng, &[3, 4], 1.0)),
                ("b", normal(rng, &[3, 4], 1.0)),
                ("c", normal(rng, &[4], 1.0)),
            ]);
            let r = normal(rng, &[3, 4], 1.0);
            check_store(&mut s, |s, t| {
                let (a, b, c) = (s.var(t, "a")?, s.var(t, "b")?, s.var(t, "c")?);
                let ab = t.mul(a, b)?;
                let d = t.sub(ab, c)?;
                let e = t.add(d, a)?;
                let f = t.scale(e, 0.7)?;
                probe(t, f, &r)
            })
        }
        "relu" | "tanh" | "sigmoid" => {
            let mut s = store(vec![("x", away_from_zero(rng, &[3, 5], 0.05))]);
            let r = normal(rng, &[3, 5], 1.0);
            check_store(&mut s, |s, t| {
                let x = s.var(t, "x")?;
                let y = match name {
                    "relu" => t.relu(x)?,
                    "tanh" => t.tanh(x)?,
                    _ => t.sigmoid(x)?,
                };
                probe(t, y, &r)
            })
        }
        "conv2d" => layer_case(
            NetworkSpec::new(vec![2, 5, 5], vec![LayerSpec::conv2d(2, 3, 3, 1, 1)], NetworkRole::Base),
            &[2, 2, 5, 5],
            rng,
        )?,
        "conv2d_strided" => layer_case(
            NetworkSpec::new(vec![2, 7, 7], vec![LayerSpec::conv2d(2, 2, 3, 2, 0)], NetworkRole::Base),
            &[1, 2, 7, 7],
            rng,
        )?,
        "avgpool_flatten" => layer_case(
            NetworkSpec::new(
                vec![2, 4, 4],
                vec![
                    LayerSpec::conv2d(2, 2, 3, 1, 1),
                    LayerSpec::AvgPool2d {
                        kernel: 2,
                        stride: None,
                    },
                    LayerSpec::Flatten,
                    LayerSpec::linear(8, 3),
                ],
                NetworkRole::Base,
            ),
            &[2, 2, 4, 4],
            rng,
        )?,
        "mse_loss" | "l1_loss" => {
            let target = normal(rng, &[4, 3], 1.0);
            let mut pred = away_from_zero(rng, &[4, 3], 0.05);
            pred.add_assign(&target);
            let mut s = store(vec![("p", pred)]);
            check_store(&mut s, |s, t| {
                let p = s.var(t, "p")?;
                let y = t.constant(target.clone())?;
                if name == "mse_loss" {
                    t.mse_loss(p, y)
                } else {
                    t.l1_loss(p, y)
                }
            })
        }
        "softmax_ce" => {
            let mut s = store(vec![("z", normal(rng, &[5, 4], 2.0))]);
            let labels: Vec<usize> = (0..5).map(|_| rng.below(4)).collect();
            check_store(&mut s, |s, t| {
                let z = s.var(t, "z")?;
                t.softmax_cross_entropy(z, &labels)
            })
        }
        "merge_alpha" => merge_case(MergeKind::AlphaBlend, rng)?,
        "merge_product" => merge_case(MergeKind::Product, rng)?,
        "merge_mlp" => merge_case(MergeKind::MlpAdapter, rng)?,
        "merge_film" => merge_case(MergeKind::Film, rng)?,
        "pnn_laterals" => pnn_case(rng)?,
        "ewc_penalty" => {
            tol = EWC_TOL;
            ewc_case(rng)?
        }
        "sidetune_net" => sidetune_case(rng)?,
        _ => unreachable!("listed in CASES"),
    };
    Ok(SuiteCase {
        name,
        seed,
        tol,
        report,
    })
}

/// Every case for every seed, in order.
pub fn run_suite(seeds: impl IntoIterator<Item = u64>) -> Result<Vec<SuiteCase>> {
    let seeds: Vec<u64> = seeds.into_iter().collect();
    let mut out = Vec::with_capacity(seeds.len() * CASES.len());
    for name in CASES {
        for &seed in &seeds {
            out.push(run_case(name, seed)?);
        }
    }
    Ok(out)
}
