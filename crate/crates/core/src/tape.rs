//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is topologically sorted
//! by construction and the backward sweep is a single reverse pass.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Two-dimensional convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize, Option<Vec<usize>>),
    Sub(usize, usize, Option<Vec<usize>>),
    Mul(usize, usize, Option<Vec<usize>>),
    Blend {
        alpha: usize,
        b: usize,
        s: usize,
    },
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Scale(usize, f64),
    Sum(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geo: Conv2dGeometry,
    },
    AvgPool2d {
        x: usize,
        kernel: usize,
        stride: usize,
    },
    Reshape(usize),
    Mse(usize, usize),
    L1(usize, usize),
    SoftmaxCe {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: Vec<(usize, String)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// For each flat index of `out`, the flat index into a tensor broadcast to it.
/// `None` when the shapes are already identical.
fn broadcast_map(op: &'static str, out: &[usize], rhs: &[usize]) -> Result<Option<Vec<usize>>> {
    if out == rhs {
        return Ok(None);
    }
    if rhs.len() > out.len() {
        return Err(Error::dim(op, format!("cannot broadcast {rhs:?} to {out:?}")));
    }
    let offset = out.len() - rhs.len();
    let mut strides = vec![0usize; out.len()];
    let mut acc = 1;
    for d in (0..rhs.len()).rev() {
        let (r, o) = (rhs[d], out[d + offset]);
        if r == o {
            strides[d + offset] = acc;
        } else if r != 1 {
            return Err(Error::dim(op, format!("cannot broadcast {rhs:?} to {out:?}")));
        }
        acc *= r;
    }
    let n = numel(out);
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; out.len()];
    for _ in 0..n {
        map.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum());
        for d in (0..out.len()).rev() {
            counter[d] += 1;
            if counter[d] < out[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    Ok(Some(map))
}

fn reduce_to(grad: &[f64], map: &Option<Vec<usize>>, shape: &[usize]) -> Tensor {
    match map {
        None => Tensor::from_parts_unchecked(shape.to_vec(), grad.to_vec()),
        Some(m) => {
            let mut out = vec![0.0; numel(shape)];
            for (g, &j) in grad.iter().zip(m) {
                out[j] += g;
            }
            Tensor::from_parts_unchecked(shape.to_vec(), out)
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv_out(op: &'static str, size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 || size + 2 * pad < kernel {
        return Err(Error::dim(
            op,
            format!("size {size} with kernel {kernel}, stride {stride}, pad {pad} gives no output"),
        ));
    }
    Ok((size + 2 * pad - kernel) / stride + 1)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::contract("variable is not recorded on this tape"));
        }
        Ok(v.idx)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Leaf that receives a gradient, reported under `name` after [`Tape::backward`].
    pub fn param(&mut self, name: &str, value: &Tensor) -> Result<Var> {
        let v = self.push("param", value.clone(), Op::Leaf, true)?;
        self.params.push((v.idx, name.to_string()));
        Ok(v)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.nodes[ia].value.data(), self.nodes[ib].value.data(), n, k, m);
        let rg = self.rg(ia) || self.rg(ib);
        self.push(
            "matmul",
            Tensor::from_parts_unchecked(vec![n, m], out),
            Op::MatMul(ia, ib),
            rg,
        )
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(usize, usize, Option<Vec<usize>>, Tensor)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let map = broadcast_map(name, self.nodes[ia].value.shape(), self.nodes[ib].value.shape())?;
        let av = &self.nodes[ia].value;
        let bv = self.nodes[ib].value.data();
        let data: Vec<f64> = match &map {
            None => av.data().iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Some(m) => av.data().iter().zip(m).map(|(&x, &j)| f(x, bv[j])).collect(),
        };
        let out = Tensor::from_parts_unchecked(av.shape().to_vec(), data);
        Ok((ia, ib, map, out))
    }

    /// `a + b`, with `b` broadcast to the shape of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, map, out) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(ia) || self.rg(ib);
        self.push("add", out, Op::Add(ia, ib, map), rg)
    }

    /// `a - b`, with `b` broadcast to the shape of `a`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, map, out) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(ia) || self.rg(ib);
        self.push("sub", out, Op::Sub(ia, ib, map), rg)
    }

    /// Element-wise `a * b`, with `b` broadcast to the shape of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, map, out) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(ia) || self.rg(ib);
        self.push("mul", out, Op::Mul(ia, ib, map), rg)
    }

    /// `alpha * b + (1 - alpha) * s` for a one-element `alpha`.
    pub fn scalar_blend(&mut self, alpha: Var, b: Var, s: Var) -> Result<Var> {
        let (ia, ibb, is) = (self.idx(alpha)?, self.idx(b)?, self.idx(s)?);
        if self.nodes[ia].value.len() != 1 {
            return Err(Error::dim(
                "scalar_blend",
                format!("alpha has shape {:?}", self.nodes[ia].value.shape()),
            ));
        }
        let (bv, sv) = (&self.nodes[ibb].value, &self.nodes[is].value);
        if bv.shape() != sv.shape() {
            return Err(Error::dim(
                "scalar_blend",
                format!("{:?} vs {:?}", bv.shape(), sv.shape()),
            ));
        }
        let a = self.nodes[ia].value.item();
        let c = 1.0 - a;
        let data = bv.data().iter().zip(sv.data()).map(|(&x, &y)| a * x + c * y).collect();
        let out = Tensor::from_parts_unchecked(bv.shape().to_vec(), data);
        let rg = self.rg(ia) || self.rg(ibb) || self.rg(is);
        self.push(
            "scalar_blend",
            out,
            Op::Blend {
                alpha: ia,
                b: ibb,
                s: is,
            },
            rg,
        )
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(usize) -> Op,
    ) -> Result<Var> {
        let i = self.idx(x)?;
        let out = self.nodes[i].value.map(f);
        let rg = self.rg(i);
        self.push(name, out, op(i), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * c, |i| Op::Scale(i, c))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let s = self.nodes[i].value.sum();
        let rg = self.rg(i);
        self.push("sum", Tensor::scalar(s), Op::Sum(i), rg)
    }

    /// Direct 2-D convolution. `x`: N×C×H×W, `w`: O×C×K×K, `bias`: O.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, geo: Conv2dGeometry) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let ib = bias.map(|b| self.idx(b)).transpose()?;
        let xs = self.nodes[ix].value.shape().to_vec();
        let ws = self.nodes[iw].value.shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::dim("conv2d", format!("input {xs:?}, kernel {ws:?}")));
        }
        if let Some(ib) = ib {
            let bs = self.nodes[ib].value.shape();
            if bs != [ws[0]] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias {bs:?} for {} output channels", ws[0]),
                ));
            }
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        let ho = conv_out("conv2d", h, k, geo.stride, geo.pad)?;
        let wo = conv_out("conv2d", wd, k, geo.stride, geo.pad)?;
        let xd = self.nodes[ix].value.data();
        let wdata = self.nodes[iw].value.data();
        let bd = ib.map(|i| self.nodes[i].value.data());
        let mut out = vec![0.0; n * o * ho * wo];
        for ni in 0..n {
            for oc in 0..o {
                let b0 = bd.map_or(0.0, |b| b[oc]);
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b0;
                        for ci in 0..c {
                            for ky in 0..k {
                                let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ixx = (ox * geo.stride + kx) as isize - geo.pad as isize;
                                    if ixx < 0 || ixx >= wd as isize {
                                        continue;
                                    }
                                    acc += xd[((ni * c + ci) * h + iy as usize) * wd + ixx as usize]
                                        * wdata[((oc * c + ci) * k + ky) * k + kx];
                                }
                            }
                        }
                        out[((ni * o + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        let rg = self.rg(ix) || self.rg(iw) || ib.is_some_and(|i| self.rg(i));
        self.push(
            "conv2d",
            Tensor::from_parts_unchecked(vec![n, o, ho, wo], out),
            Op::Conv2d {
                x: ix,
                w: iw,
                b: ib,
                geo,
            },
            rg,
        )
    }

    /// Average pooling over square windows without padding.
    pub fn avgpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let xs = self.nodes[ix].value.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::dim("avgpool2d", format!("input {xs:?} is not N×C×H×W")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let ho = conv_out("avgpool2d", h, kernel, stride, 0)?;
        let wo = conv_out("avgpool2d", w, kernel, stride, 0)?;
        let xd = self.nodes[ix].value.data();
        let inv = 1.0 / (kernel * kernel) as f64;
        let mut out = vec![0.0; n * c * ho * wo];
        for nc in 0..n * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            acc += xd[(nc * h + oy * stride + ky) * w + ox * stride + kx];
                        }
                    }
                    out[(nc * ho + oy) * wo + ox] = acc * inv;
                }
            }
        }
        let rg = self.rg(ix);
        self.push(
            "avgpool2d",
            Tensor::from_parts_unchecked(vec![n, c, ho, wo], out),
            Op::AvgPool2d { x: ix, kernel, stride },
            rg,
        )
    }

    /// Collapse all but the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let xs = self.nodes[ix].value.shape();
        let n = xs[0];
        let rest = numel(&xs[1..]);
        let out = self.nodes[ix].value.reshape(vec![n, rest])?;
        let rg = self.rg(ix);
        self.push("flatten", out, Op::Reshape(ix), rg)
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(Error::dim(op, format!("prediction {sa:?} vs target {sb:?}")));
        }
        Ok(())
    }

    /// Mean over all elements of the squared difference.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (ip, it) = (self.idx(pred)?, self.idx(target)?);
        self.same_shape("mse_loss", ip, it)?;
        let p = self.nodes[ip].value.data();
        let t = self.nodes[it].value.data();
        let s: f64 = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
        let loss = s / p.len() as f64;
        let rg = self.rg(ip) || self.rg(it);
        self.push("mse_loss", Tensor::scalar(loss), Op::Mse(ip, it), rg)
    }

    /// Mean over all elements of the absolute difference.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (ip, it) = (self.idx(pred)?, self.idx(target)?);
        self.same_shape("l1_loss", ip, it)?;
        let p = self.nodes[ip].value.data();
        let t = self.nodes[it].value.data();
        let s: f64 = p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum();
        let loss = s / p.len() as f64;
        let rg = self.rg(ip) || self.rg(it);
        self.push("l1_loss", Tensor::scalar(loss), Op::L1(ip, it), rg)
    }

    /// Mean softmax cross-entropy of N×C logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let ls = self.nodes[il].value.shape();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("logits {ls:?} with {} labels", labels.len()),
            ));
        }
        let (n, c) = (ls[0], ls[1]);
        if let Some(bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let z = self.nodes[il].value.data();
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for i in 0..n {
            let row = &z[i * c..(i + 1) * c];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let se: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + se.ln();
            total += lse - row[labels[i]];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let rg = self.rg(il);
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(total / n as f64),
            Op::SoftmaxCe {
                logits: il,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Gradients of the scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[li] = Some(Tensor::full(self.nodes[li].value.shape(), 1.0));
        for i in (0..=li).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
        for (idx, name) in &self.params {
            let g = grads[*idx]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[*idx].value.shape()));
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
            match params.get_mut(name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    params.insert(name.clone(), g);
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            nodes: grads,
            params,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
        if !self.nodes[i].requires_grad {
            return;
        }
        match &mut grads[i] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.rg(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; n * k];
                    for r in 0..n {
                        for c in 0..k {
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += gd[r * m + j] * bv.data()[c * m + j];
                            }
                            da[r * k + c] = acc;
                        }
                    }
                    self.accumulate(grads, *a, Tensor::from_parts_unchecked(vec![n, k], da));
                }
                if self.rg(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * m];
                    for r in 0..n {
                        for c in 0..k {
                            let x = av.data()[r * k + c];
                            for j in 0..m {
                                db[c * m + j] += x * gd[r * m + j];
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_parts_unchecked(vec![k, m], db));
                }
            }
            Op::Add(a, b, map) | Op::Sub(a, b, map) => {
                let sign = if matches!(self.nodes[i].op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let mut gb = reduce_to(gd, map, self.nodes[*b].value.shape());
                    if sign < 0.0 {
                        gb.scale_assign(-1.0);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b, map) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let bi = |j: usize| map.as_ref().map_or(j, |m| m[j]);
                if self.rg(*a) {
                    let da = gd.iter().enumerate().map(|(j, &gv)| gv * bv.data()[bi(j)]).collect();
                    self.accumulate(grads, *a, Tensor::from_parts_unchecked(av.shape().to_vec(), da));
                }
                if self.rg(*b) {
                    let prod: Vec<f64> = gd.iter().zip(av.data()).map(|(&gv, &x)| gv * x).collect();
                    self.accumulate(grads, *b, reduce_to(&prod, map, bv.shape()));
                }
            }
            Op::Blend { alpha, b, s } => {
                let a = self.nodes[*alpha].value.item();
                let c = 1.0 - a;
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.map(|v| a * v));
                }
                if self.rg(*s) {
                    self.accumulate(grads, *s, g.map(|v| c * v));
                }
                if self.rg(*alpha) {
                    let bv = self.nodes[*b].value.data();
                    let sv = self.nodes[*s].value.data();
                    let da: f64 = gd
                        .iter()
                        .zip(bv.iter().zip(sv))
                        .map(|(&gv, (&x, &y))| gv * (x - y))
                        .sum();
                    let shape = self.nodes[*alpha].value.shape().to_vec();
                    self.accumulate(grads, *alpha, Tensor::from_parts_unchecked(shape, vec![da]));
                }
            }
            Op::Relu(x) => {
                let xv = &self.nodes[*x].value;
                let d = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_parts_unchecked(xv.shape().to_vec(), d));
            }
            Op::Tanh(x) => {
                let y = self.nodes[i].value.data();
                let d = gd.iter().zip(y).map(|(&gv, &t)| gv * (1.0 - t * t)).collect();
                self.accumulate(grads, *x, Tensor::from_parts_unchecked(g.shape().to_vec(), d));
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data();
                let d = gd.iter().zip(y).map(|(&gv, &s)| gv * s * (1.0 - s)).collect();
                self.accumulate(grads, *x, Tensor::from_parts_unchecked(g.shape().to_vec(), d));
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, g.map(|v| v * c)),
            Op::Sum(x) => {
                let shape = self.nodes[*x].value.shape();
                self.accumulate(grads, *x, Tensor::full(shape, gd[0]));
            }
            Op::Conv2d { x, w, b, geo } => self.conv2d_backward(*x, *w, *b, *geo, g, grads),
            Op::AvgPool2d { x, kernel, stride } => {
                let xs = self.nodes[*x].value.shape().to_vec();
                let (h, wd) = (xs[2], xs[3]);
                let (ho, wo) = (g.shape()[2], g.shape()[3]);
                let inv = 1.0 / (kernel * kernel) as f64;
                let mut dx = vec![0.0; numel(&xs)];
                for nc in 0..xs[0] * xs[1] {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = gd[(nc * ho + oy) * wo + ox] * inv;
                            for ky in 0..*kernel {
                                for kx in 0..*kernel {
                                    dx[(nc * h + oy * stride + ky) * wd + ox * stride + kx] += gv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts_unchecked(xs, dx));
            }
            Op::Reshape(x) => {
                let shape = self.nodes[*x].value.shape().to_vec();
                self.accumulate(grads, *x, Tensor::from_parts_unchecked(shape, gd.to_vec()));
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (&self.nodes[*p].value, &self.nodes[*t].value);
                let k = 2.0 * gd[0] / pv.len() as f64;
                let d: Vec<f64> = pv.data().iter().zip(tv.data()).map(|(a, b)| k * (a - b)).collect();
                if self.rg(*t) {
                    let neg = d.iter().map(|v| -v).collect();
                    self.accumulate(grads, *t, Tensor::from_parts_unchecked(tv.shape().to_vec(), neg));
                }
                self.accumulate(grads, *p, Tensor::from_parts_unchecked(pv.shape().to_vec(), d));
            }
            Op::L1(p, t) => {
                let (pv, tv) = (&self.nodes[*p].value, &self.nodes[*t].value);
                let k = gd[0] / pv.len() as f64;
                let d: Vec<f64> = pv
                    .data()
                    .iter()
                    .zip(tv.data())
                    .map(|(a, b)| {
                        if a > b {
                            k
                        } else if a < b {
                            -k
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if self.rg(*t) {
                    let neg = d.iter().map(|v| -v).collect();
                    self.accumulate(grads, *t, Tensor::from_parts_unchecked(tv.shape().to_vec(), neg));
                }
                self.accumulate(grads, *p, Tensor::from_parts_unchecked(pv.shape().to_vec(), d));
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let shape = self.nodes[*logits].value.shape().to_vec();
                let (n, c) = (shape[0], shape[1]);
                let k = gd[0] / n as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * k).collect();
                for (r, &y) in labels.iter().enumerate() {
                    d[r * c + y] -= k;
                }
                self.accumulate(grads, *logits, Tensor::from_parts_unchecked(shape, d));
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        x: usize,
        w: usize,
        b: Option<usize>,
        geo: Conv2dGeometry,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        let (xs, ws) = (xv.shape(), wv.shape());
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        let (ho, wo) = (g.shape()[2], g.shape()[3]);
        let gd = g.data();
        let (want_x, want_w) = (self.rg(x), self.rg(w));
        let mut dx = vec![0.0; if want_x { xv.len() } else { 0 }];
        let mut dw = vec![0.0; if want_w { wv.len() } else { 0 }];
        for ni in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gv = gd[((ni * o + oc) * ho + oy) * wo + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        for ci in 0..c {
                            for ky in 0..k {
                                let iy = (oy * geo.stride + ky) as isize - geo.pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ixx = (ox * geo.stride + kx) as isize - geo.pad as isize;
                                    if ixx < 0 || ixx >= wd as isize {
                                        continue;
                                    }
                                    let xi = ((ni * c + ci) * h + iy as usize) * wd + ixx as usize;
                                    let wi = ((oc * c + ci) * k + ky) * k + kx;
                                    if want_x {
                                        dx[xi] += gv * wv.data()[wi];
                                    }
                                    if want_w {
                                        dw[wi] += gv * xv.data()[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if want_x {
            self.accumulate(grads, x, Tensor::from_parts_unchecked(xs.to_vec(), dx));
        }
        if want_w {
            self.accumulate(grads, w, Tensor::from_parts_unchecked(ws.to_vec(), dw));
        }
        if let Some(b) = b {
            if self.rg(b) {
                let mut db = vec![0.0; o];
                for ni in 0..n {
                    for (oc, acc) in db.iter_mut().enumerate() {
                        let base = (ni * o + oc) * ho * wo;
                        *acc += gd[base..base + ho * wo].iter().sum::<f64>();
                    }
                }
                self.accumulate(grads, b, Tensor::from_parts_unchecked(vec![o], db));
            }
        }
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        let orow = &mut out[r * m..(r + 1) * m];
        for c in 0..k {
            let x = a[r * k + c];
            let brow = &b[c * m..(c + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += x * bv;
            }
        }
    }
    out
}

/// Result of a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a recorded variable; `None` when it does not
    /// require a gradient or the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.nodes.get(v.idx).and_then(Option::as_ref)
    }

    /// Gradient for a named parameter leaf. Leaves the loss does not reach
    /// carry zeros.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}
