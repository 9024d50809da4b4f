//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the [`Graph`]; node indices are a
//! topological order, so [`Graph::backward`] is a single reverse sweep.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::tensor::{axis_split, Tensor};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-8;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    DivScalarVar(usize, usize),
    AddBias(usize, usize),
    ScaleChannels(usize, usize),
    MulSpatial(usize, usize),
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeom },
    Depthwise { x: usize, w: usize, b: usize, geom: ConvGeom },
    Deconv2 { x: usize, w: usize, b: usize },
    AvgPool2(usize),
    GlobalAvgPool(usize),
    ChannelConv1d(usize, usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, rstd: Vec<f64> },
    Sigmoid(usize),
    Gelu(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Sqrt(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    Softmax { x: usize, axis: usize },
    L2Normalize { x: usize, axis: usize, eps: f64 },
    Matmul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Narrow { x: usize, axis: usize, start: usize },
    Concat { inputs: Vec<usize>, axis: usize },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Recording context for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, param: Option<ParamId>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            param,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false, None)
    }

    /// A leaf that receives a gradient but is not tied to a stored parameter.
    pub fn input(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true, None)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { graph: self, id: node };
        }
        let v = self.push(store.get(id).tensor.clone(), Op::Leaf, true, Some(id));
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn record(&self, op_name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let rg = self.needs(inputs);
        Ok(self.push(value, op, rg, None))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NotScalar {
                shape: root.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, contrib) in backward_op(&nodes, node, &g)? {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        let mut params = Vec::new();
        let mut leaves = HashMap::new();
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                continue;
            }
            if let Some(g) = grads[id].take() {
                if let Some(p) = node.param {
                    params.push((p, g.clone()));
                }
                leaves.insert(id, g);
            }
        }
        Ok(Gradients { leaves, params })
    }

    /// Runs [`Graph::backward`] and accumulates parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var<'_>, store: &mut ParamStore) -> Result<()> {
        self.backward(loss)?.accumulate_into(store);
        Ok(())
    }
}

/// Gradients of leaf nodes after a backward sweep.
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.leaves.get(&v.id)
    }

    pub fn params(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }

    /// Adds into each reached parameter's `grad`; unreached parameters are left alone.
    pub fn accumulate_into(self, store: &mut ParamStore) {
        for (id, g) in self.params {
            let p = store.get_mut(id);
            match &mut p.grad {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
    }
}

fn unary_grad(x: &Tensor, g: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = x.data().iter().zip(g.data()).map(|(&xv, &gv)| f(xv, gv)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn shaped(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("kernel output length")
}

fn backward_op(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let rg = |i: usize| nodes[i].requires_grad;
    let out = &*node.value;
    let gd = g.data();
    Ok(match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
        Op::Mul(a, b) => vec![
            (*a, g.zip_map(val(*b), |gv, bv| gv * bv)?),
            (*b, g.zip_map(val(*a), |gv, av| gv * av)?),
        ],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::MulScalar(a, c) => vec![(*a, g.map(|v| v * c))],
        Op::DivScalarVar(a, s) => {
            let sv = val(*s).item();
            let gs: f64 = gd.iter().zip(val(*a).data()).map(|(gv, av)| gv * av).sum();
            vec![
                (*a, g.map(|v| v / sv)),
                (*s, Tensor::new(val(*s).shape().to_vec(), vec![-gs / (sv * sv)])?),
            ]
        }
        Op::AddBias(x, b) => {
            let c = val(*b).numel();
            let mut gb = vec![0.0; c];
            for (i, v) in gd.iter().enumerate() {
                gb[i % c] += v;
            }
            vec![(*x, g.clone()), (*b, shaped(val(*b).shape(), gb))]
        }
        Op::ScaleChannels(x, s) => {
            let sv = val(*s).data();
            let xv = val(*x).data();
            let c = sv.len();
            let mut gs = vec![0.0; c];
            let mut gx = vec![0.0; xv.len()];
            for i in 0..xv.len() {
                gs[i % c] += gd[i] * xv[i];
                gx[i] = gd[i] * sv[i % c];
            }
            vec![(*x, shaped(val(*x).shape(), gx)), (*s, shaped(val(*s).shape(), gs))]
        }
        Op::MulSpatial(x, m) => {
            let mv = val(*m).data();
            let xv = val(*x).data();
            let c = xv.len() / mv.len();
            let mut gm = vec![0.0; mv.len()];
            let mut gx = vec![0.0; xv.len()];
            for i in 0..xv.len() {
                gm[i / c] += gd[i] * xv[i];
                gx[i] = gd[i] * mv[i / c];
            }
            vec![(*x, shaped(val(*x).shape(), gx)), (*m, shaped(val(*m).shape(), gm))]
        }
        Op::Conv2d { x, w, b, geom } => {
            let (gx, gw, gb) = kernels::conv2d_backward(geom, val(*x).data(), val(*w).data(), gd, rg(*x));
            let mut v = vec![(*w, shaped(val(*w).shape(), gw)), (*b, shaped(val(*b).shape(), gb))];
            if let Some(gx) = gx {
                v.push((*x, shaped(val(*x).shape(), gx)));
            }
            v
        }
        Op::Depthwise { x, w, b, geom } => {
            let (gx, gw, gb) = kernels::depthwise_backward(geom, val(*x).data(), val(*w).data(), gd, rg(*x));
            let mut v = vec![(*w, shaped(val(*w).shape(), gw)), (*b, shaped(val(*b).shape(), gb))];
            if let Some(gx) = gx {
                v.push((*x, shaped(val(*x).shape(), gx)));
            }
            v
        }
        Op::Deconv2 { x, w, b } => {
            let xs = val(*x).shape();
            let ws = val(*w).shape();
            let (gx, gw, gb) = kernels::deconv2_backward(
                xs[0],
                xs[1],
                ws[2],
                ws[3],
                val(*x).data(),
                val(*w).data(),
                gd,
                rg(*x),
            );
            let mut v = vec![(*w, shaped(ws, gw)), (*b, shaped(val(*b).shape(), gb))];
            if let Some(gx) = gx {
                v.push((*x, shaped(xs, gx)));
            }
            v
        }
        Op::AvgPool2(x) => {
            let s = val(*x).shape();
            let inner = s[2..].iter().product();
            vec![(*x, shaped(s, kernels::avg_pool2_backward(s[0], s[1], inner, gd)))]
        }
        Op::GlobalAvgPool(x) => {
            let s = val(*x).shape();
            let c = gd.len();
            let n = (val(*x).numel() / c) as f64;
            let gx = (0..val(*x).numel()).map(|i| gd[i % c] / n).collect();
            vec![(*x, shaped(s, gx))]
        }
        Op::ChannelConv1d(x, w) => {
            let xv = val(*x).data();
            let wv = val(*w).data();
            let (c, k) = (xv.len(), wv.len());
            let half = k / 2;
            let mut gx = vec![0.0; c];
            let mut gw = vec![0.0; k];
            for o in 0..c {
                for (j, &wj) in wv.iter().enumerate() {
                    if let Some(src) = (o + j).checked_sub(half).filter(|&s| s < c) {
                        gx[src] += gd[o] * wj;
                        gw[j] += gd[o] * xv[src];
                    }
                }
            }
            vec![(*x, shaped(val(*x).shape(), gx)), (*w, shaped(val(*w).shape(), gw))]
        }
        Op::LayerNorm { x, gamma, beta, rstd } => {
            let xv = val(*x).data();
            let gam = val(*gamma).data();
            let c = gam.len();
            let rows = xv.len() / c;
            let mut gx = vec![0.0; xv.len()];
            let mut gg = vec![0.0; c];
            let mut gb = vec![0.0; c];
            for r in 0..rows {
                let xs = &xv[r * c..][..c];
                let gs = &gd[r * c..][..c];
                let mu = xs.iter().sum::<f64>() / c as f64;
                let rs = rstd[r];
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for i in 0..c {
                    let xhat = (xs[i] - mu) * rs;
                    let d = gs[i] * gam[i];
                    gg[i] += gs[i] * xhat;
                    gb[i] += gs[i];
                    mean_d += d;
                    mean_dx += d * xhat;
                }
                mean_d /= c as f64;
                mean_dx /= c as f64;
                for i in 0..c {
                    let xhat = (xs[i] - mu) * rs;
                    gx[r * c + i] = rs * (gs[i] * gam[i] - mean_d - xhat * mean_dx);
                }
            }
            vec![
                (*x, shaped(val(*x).shape(), gx)),
                (*gamma, shaped(val(*gamma).shape(), gg)),
                (*beta, shaped(val(*beta).shape(), gb)),
            ]
        }
        Op::Sigmoid(x) => vec![(*x, unary_grad(out, g, |y, gv| gv * y * (1.0 - y)))],
        Op::Gelu(x) => vec![(
            *x,
            unary_grad(val(*x), g, |xv, gv| {
                let t = (GELU_C * (xv + GELU_A * xv * xv * xv)).tanh();
                let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * xv * xv);
                gv * (0.5 * (1.0 + t) + 0.5 * xv * dt)
            }),
        )],
        Op::Relu(x) => vec![(*x, unary_grad(val(*x), g, |xv, gv| if xv > 0.0 { gv } else { 0.0 }))],
        Op::LeakyRelu(x, slope) => vec![(
            *x,
            unary_grad(val(*x), g, |xv, gv| if xv > 0.0 { gv } else { gv * slope }),
        )],
        Op::Sqrt(x) => vec![(*x, unary_grad(out, g, |y, gv| gv / (2.0 * y)))],
        Op::Abs(x) => vec![(*x, unary_grad(val(*x), g, |xv, gv| gv * sign(xv)))],
        Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), gd[0]))],
        Op::Mean(x) => {
            let n = val(*x).numel() as f64;
            vec![(*x, Tensor::full(val(*x).shape(), gd[0] / n))]
        }
        Op::Softmax { x, axis } => {
            let (outer, n, inner) = axis_split(out.shape(), *axis);
            let y = out.data();
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * n + j) * inner + i;
                    let dotp: f64 = (0..n).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                    for j in 0..n {
                        gx[idx(j)] = y[idx(j)] * (gd[idx(j)] - dotp);
                    }
                }
            }
            vec![(*x, shaped(out.shape(), gx))]
        }
        Op::L2Normalize { x, axis, eps } => {
            let xv = val(*x).data();
            let (outer, n, inner) = axis_split(out.shape(), *axis);
            let y = out.data();
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * n + j) * inner + i;
                    let norm = (0..n).map(|j| xv[idx(j)] * xv[idx(j)]).sum::<f64>().sqrt();
                    if norm > *eps {
                        let dotp: f64 = (0..n).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] = (gd[idx(j)] - y[idx(j)] * dotp) / norm;
                        }
                    } else {
                        for j in 0..n {
                            gx[idx(j)] = gd[idx(j)] / eps;
                        }
                    }
                }
            }
            vec![(*x, shaped(out.shape(), gx))]
        }
        Op::Matmul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let mut v = Vec::new();
            if rg(*a) {
                let bt = kernels::transpose(bv.data(), k, n);
                v.push((*a, shaped(av.shape(), kernels::matmul(gd, &bt, m, n, k))));
            }
            if rg(*b) {
                let at = kernels::transpose(av.data(), m, k);
                v.push((*b, shaped(bv.shape(), kernels::matmul(&at, gd, k, m, n))));
            }
            v
        }
        Op::Transpose(x) => {
            let s = out.shape();
            vec![(*x, shaped(val(*x).shape(), kernels::transpose(gd, s[0], s[1])))]
        }
        Op::Reshape(x) => vec![(*x, shaped(val(*x).shape(), gd.to_vec()))],
        Op::Narrow { x, axis, start } => {
            let xs = val(*x).shape();
            let (outer, n, inner) = axis_split(xs, *axis);
            let len = out.shape()[*axis];
            let mut gx = vec![0.0; val(*x).numel()];
            for o in 0..outer {
                let src = &gd[o * len * inner..][..len * inner];
                gx[(o * n + start) * inner..][..len * inner].copy_from_slice(src);
            }
            vec![(*x, shaped(xs, gx))]
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = axis_split(out.shape(), *axis);
            let mut offset = 0;
            let mut v = Vec::with_capacity(inputs.len());
            for &inp in inputs {
                let s = val(inp).shape();
                let n = s[*axis];
                let mut gi = Vec::with_capacity(val(inp).numel());
                for o in 0..outer {
                    gi.extend_from_slice(&gd[(o * total + offset) * inner..][..n * inner]);
                }
                offset += n;
                v.push((inp, shaped(s, gi)));
            }
            v
        }
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn same_graph(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "vars from different graphs"
        );
    }

    fn binary(self, other: Var<'g>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'g>> {
        self.same_graph(&other);
        let a = self.value();
        let b = other.value();
        b.expect_shape(name, a.shape())?;
        let v = a.zip_map(&b, f)?;
        self.graph.record(name, v, op, &[self.id, other.id])
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'g>> {
        let v = self.value().map(|x| x + c);
        self.graph.record("add_scalar", v, Op::AddScalar(self.id), &[self.id])
    }

    pub fn mul_scalar(self, c: f64) -> Result<Var<'g>> {
        let v = self.value().map(|x| x * c);
        self.graph.record("mul_scalar", v, Op::MulScalar(self.id, c), &[self.id])
    }

    /// Divides every element by the single value held in `s`.
    pub fn div_scalar_var(self, s: Var<'g>) -> Result<Var<'g>> {
        let sv = s.value();
        if sv.numel() != 1 {
            return Err(Error::dim("div_scalar_var", "numel", 1, sv.numel()));
        }
        let d = sv.item();
        let v = self.value().map(|x| x / d);
        self.graph
            .record("div_scalar_var", v, Op::DivScalarVar(self.id, s.id), &[self.id, s.id])
    }

    /// Adds a `[C]` vector along the last axis.
    pub fn add_bias(self, b: Var<'g>) -> Result<Var<'g>> {
        let x = self.value();
        let bv = b.value();
        let c = *x.shape().last().unwrap();
        bv.expect_shape("add_bias", &[c])?;
        let mut v = (*x).clone();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            *e += bv.data()[i % c];
        }
        self.graph.record("add_bias", v, Op::AddBias(self.id, b.id), &[self.id, b.id])
    }

    /// Multiplies each channel (last axis) by the matching entry of a `[C]` vector.
    pub fn scale_channels(self, s: Var<'g>) -> Result<Var<'g>> {
        let x = self.value();
        let sv = s.value();
        let c = *x.shape().last().unwrap();
        sv.expect_shape("scale_channels", &[c])?;
        let mut v = (*x).clone();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            *e *= sv.data()[i % c];
        }
        self.graph
            .record("scale_channels", v, Op::ScaleChannels(self.id, s.id), &[self.id, s.id])
    }

    /// `[H, W, C] ⊙ [H, W, 1]`, the spatial map broadcast over channels.
    pub fn mul_spatial(self, m: Var<'g>) -> Result<Var<'g>> {
        let x = self.value();
        let mv = m.value();
        x.expect_rank("mul_spatial", 3)?;
        let s = x.shape();
        mv.expect_shape("mul_spatial", &[s[0], s[1], 1])?;
        let c = s[2];
        let mut v = (*x).clone();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            *e *= mv.data()[i / c];
        }
        self.graph
            .record("mul_spatial", v, Op::MulSpatial(self.id, m.id), &[self.id, m.id])
    }

    /// Square-kernel convolution. `weight` is `[k, k, Cin, Cout]`, `bias` is `[Cout]`.
    pub fn conv2d(self, weight: Var<'g>, bias: Var<'g>, stride: usize, padding: usize) -> Result<Var<'g>> {
        const OP: &str = "conv2d";
        let x = self.value();
        let w = weight.value();
        x.expect_rank(OP, 3)?;
        w.expect_rank(OP, 4)?;
        let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = w.shape()[0];
        if w.shape()[1] != k {
            return Err(Error::dim(OP, "weight 1 (kernel width)", k, w.shape()[1]));
        }
        if w.shape()[2] != cin {
            return Err(Error::dim(OP, "2 (input channels)", w.shape()[2], cin));
        }
        let cout = w.shape()[3];
        bias.value().expect_shape(OP, &[cout])?;
        if !(1..=2).contains(&stride) {
            return Err(Error::invalid(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        if h + 2 * padding < k {
            return Err(Error::dim(OP, "0 (height)", k, h + 2 * padding));
        }
        if wd + 2 * padding < k {
            return Err(Error::dim(OP, "1 (width)", k, wd + 2 * padding));
        }
        let geom = ConvGeom {
            h,
            w: wd,
            cin,
            cout,
            k,
            stride,
            pad: padding,
            oh: (h + 2 * padding - k) / stride + 1,
            ow: (wd + 2 * padding - k) / stride + 1,
        };
        let data = kernels::conv2d_forward(&geom, x.data(), w.data(), bias.value().data());
        let v = Tensor::new(vec![geom.oh, geom.ow, cout], data)?;
        self.graph.record(
            OP,
            v,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.id,
                geom,
            },
            &[self.id, weight.id, bias.id],
        )
    }

    /// Per-channel convolution, stride 1. `weight` is `[k, k, C]`.
    pub fn depthwise_conv2d(self, weight: Var<'g>, bias: Var<'g>, padding: usize) -> Result<Var<'g>> {
        const OP: &str = "depthwise_conv2d";
        let x = self.value();
        let w = weight.value();
        x.expect_rank(OP, 3)?;
        let (h, wd, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let k = w.shape()[0];
        w.expect_shape(OP, &[k, k, c])?;
        bias.value().expect_shape(OP, &[c])?;
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(Error::dim(OP, "0 (height)", k, h.min(wd) + 2 * padding));
        }
        let geom = ConvGeom {
            h,
            w: wd,
            cin: c,
            cout: c,
            k,
            stride: 1,
            pad: padding,
            oh: h + 2 * padding - k + 1,
            ow: wd + 2 * padding - k + 1,
        };
        let data = kernels::depthwise_forward(&geom, x.data(), w.data(), bias.value().data());
        let v = Tensor::new(vec![geom.oh, geom.ow, c], data)?;
        self.graph.record(
            OP,
            v,
            Op::Depthwise {
                x: self.id,
                w: weight.id,
                b: bias.id,
                geom,
            },
            &[self.id, weight.id, bias.id],
        )
    }

    /// Stride-2 transposed convolution with a `[2, 2, Cin, Cout]` kernel; doubles H and W.
    pub fn deconv2d(self, weight: Var<'g>, bias: Var<'g>, stride: usize) -> Result<Var<'g>> {
        const OP: &str = "deconv2d";
        let x = self.value();
        let w = weight.value();
        x.expect_rank(OP, 3)?;
        w.expect_rank(OP, 4)?;
        if stride != 2 || w.shape()[0] != 2 || w.shape()[1] != 2 {
            return Err(Error::invalid(format!(
                "deconv2d only supports a 2x2 kernel with stride 2 (got kernel {}x{}, stride {stride})",
                w.shape()[0],
                w.shape()[1]
            )));
        }
        let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if w.shape()[2] != cin {
            return Err(Error::dim(OP, "2 (input channels)", w.shape()[2], cin));
        }
        let cout = w.shape()[3];
        bias.value().expect_shape(OP, &[cout])?;
        let data = kernels::deconv2_forward(h, wd, cin, cout, x.data(), w.data(), bias.value().data());
        let v = Tensor::new(vec![2 * h, 2 * wd, cout], data)?;
        self.graph.record(
            OP,
            v,
            Op::Deconv2 {
                x: self.id,
                w: weight.id,
                b: bias.id,
            },
            &[self.id, weight.id, bias.id],
        )
    }

    /// 2×2 mean pooling over the two leading axes; both must be even.
    pub fn avg_pool2(self) -> Result<Var<'g>> {
        let x = self.value();
        let v = avg_pool2(&x)?;
        self.graph.record("avg_pool2", v, Op::AvgPool2(self.id), &[self.id])
    }

    /// `[H, W, C] -> [C]`.
    pub fn global_avg_pool(self) -> Result<Var<'g>> {
        let x = self.value();
        x.expect_rank("global_avg_pool", 3)?;
        let c = x.shape()[2];
        let n = (x.numel() / c) as f64;
        let mut out = vec![0.0; c];
        for (i, v) in x.data().iter().enumerate() {
            out[i % c] += v;
        }
        out.iter_mut().for_each(|v| *v /= n);
        let v = Tensor::new(vec![c], out)?;
        self.graph
            .record("global_avg_pool", v, Op::GlobalAvgPool(self.id), &[self.id])
    }

    /// Zero-padded 1-D convolution across a `[C]` vector with an odd `[k]` kernel, no bias.
    pub fn channel_conv1d(self, weight: Var<'g>) -> Result<Var<'g>> {
        let x = self.value();
        let w = weight.value();
        x.expect_rank("channel_conv1d", 1)?;
        w.expect_rank("channel_conv1d", 1)?;
        let (c, k) = (x.numel(), w.numel());
        if k % 2 == 0 {
            return Err(Error::invalid("channel_conv1d needs an odd kernel"));
        }
        let half = k / 2;
        let out = (0..c)
            .map(|o| {
                (0..k)
                    .filter_map(|j| {
                        (o + j)
                            .checked_sub(half)
                            .filter(|&s| s < c)
                            .map(|s| w.data()[j] * x.data()[s])
                    })
                    .sum()
            })
            .collect();
        let v = Tensor::new(vec![c], out)?;
        self.graph.record(
            "channel_conv1d",
            v,
            Op::ChannelConv1d(self.id, weight.id),
            &[self.id, weight.id],
        )
    }

    /// Normalizes each position over the last (channel) axis.
    pub fn layer_norm(self, gamma: Var<'g>, beta: Var<'g>) -> Result<Var<'g>> {
        let x = self.value();
        let c = *x.shape().last().unwrap();
        gamma.value().expect_shape("layer_norm", &[c])?;
        beta.value().expect_shape("layer_norm", &[c])?;
        let gam = gamma.value();
        let bet = beta.value();
        let rows = x.numel() / c;
        let mut out = vec![0.0; x.numel()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let xs = &x.data()[r * c..][..c];
            let mu = xs.iter().sum::<f64>() / c as f64;
            let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            for i in 0..c {
                out[r * c + i] = (xs[i] - mu) * rs * gam.data()[i] + bet.data()[i];
            }
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        self.graph.record(
            "layer_norm",
            v,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                rstd,
            },
            &[self.id, gamma.id, beta.id],
        )
    }

    fn unary(self, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'g>> {
        let v = self.value().map(f);
        self.graph.record(name, v, op, &[self.id])
    }

    pub fn sigmoid(self) -> Result<Var<'g>> {
        self.unary("sigmoid", |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(self.id))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Result<Var<'g>> {
        self.unary(
            "gelu",
            |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Op::Gelu(self.id),
        )
    }

    pub fn relu(self) -> Result<Var<'g>> {
        self.unary("relu", |x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn leaky_relu(self, slope: f64) -> Result<Var<'g>> {
        self.unary(
            "leaky_relu",
            move |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(self.id, slope),
        )
    }

    pub fn sqrt(self) -> Result<Var<'g>> {
        if self.value().data().iter().any(|&v| v <= 0.0) {
            return Err(Error::NonFinite { op: "sqrt" });
        }
        self.unary("sqrt", f64::sqrt, Op::Sqrt(self.id))
    }

    pub fn abs(self) -> Result<Var<'g>> {
        self.unary("abs", f64::abs, Op::Abs(self.id))
    }

    pub fn sum(self) -> Result<Var<'g>> {
        let v = Tensor::scalar(self.value().sum());
        self.graph.record("sum", v, Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let v = Tensor::scalar(self.value().mean());
        self.graph.record("mean", v, Op::Mean(self.id), &[self.id])
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<()> {
        let rank = self.value().rank();
        if axis >= rank {
            return Err(Error::AxisOutOfRange { op, axis, rank });
        }
        Ok(())
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        self.check_axis("softmax", axis)?;
        let x = self.value();
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![0.0; x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| xd[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..n {
                    let e = (xd[idx(j)] - m).exp();
                    out[idx(j)] = e;
                    s += e;
                }
                for j in 0..n {
                    out[idx(j)] /= s;
                }
            }
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        self.graph
            .record("softmax", v, Op::Softmax { x: self.id, axis }, &[self.id])
    }

    /// Scales each fiber along `axis` to unit Euclidean norm (norms below `eps` divide by `eps`).
    pub fn l2_normalize(self, axis: usize, eps: f64) -> Result<Var<'g>> {
        self.check_axis("l2_normalize", axis)?;
        let x = self.value();
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![0.0; x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let norm = (0..n).map(|j| xd[idx(j)] * xd[idx(j)]).sum::<f64>().sqrt();
                let d = norm.max(eps);
                for j in 0..n {
                    out[idx(j)] = xd[idx(j)] / d;
                }
            }
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        self.graph.record(
            "l2_normalize",
            v,
            Op::L2Normalize { x: self.id, axis, eps },
            &[self.id],
        )
    }

    /// `[m, k] × [k, n]`.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.same_graph(&other);
        let a = self.value();
        let b = other.value();
        a.expect_rank("matmul", 2)?;
        b.expect_rank("matmul", 2)?;
        let (m, k) = (a.shape()[0], a.shape()[1]);
        if b.shape()[0] != k {
            return Err(Error::dim("matmul", "0 (inner)", k, b.shape()[0]));
        }
        let n = b.shape()[1];
        let v = Tensor::new(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))?;
        self.graph
            .record("matmul", v, Op::Matmul(self.id, other.id), &[self.id, other.id])
    }

    pub fn transpose(self) -> Result<Var<'g>> {
        let x = self.value();
        x.expect_rank("transpose", 2)?;
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let v = Tensor::new(vec![c, r], kernels::transpose(x.data(), r, c))?;
        self.graph.record("transpose", v, Op::Transpose(self.id), &[self.id])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let v = (*self.value()).clone().reshape(shape)?;
        self.graph.record("reshape", v, Op::Reshape(self.id), &[self.id])
    }

    /// The slice `start..start+len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        self.check_axis("narrow", axis)?;
        let x = self.value();
        let (outer, n, inner) = axis_split(x.shape(), axis);
        if len == 0 || start + len > n {
            return Err(Error::dim("narrow", axis, n, start + len));
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x.data()[(o * n + start) * inner..][..len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let v = Tensor::new(shape, out)?;
        self.graph.record(
            "narrow",
            v,
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
            &[self.id],
        )
    }
}

/// Joins tensors along `axis`; every other extent must agree.
pub fn concat<'g>(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    first.check_axis("concat", axis)?;
    let graph = first.graph;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    let mut total = 0;
    for v in &values {
        if v.rank() != base.len() {
            return Err(Error::dim("concat", "rank", base.len(), v.rank()));
        }
        for (ax, (&e, &f)) in base.iter().zip(v.shape()).enumerate() {
            if ax != axis && e != f {
                return Err(Error::dim("concat", ax, e, f));
            }
        }
        total += v.shape()[axis];
    }
    let (outer, _, inner) = axis_split(&base, axis);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for v in &values {
            let n = v.shape()[axis];
            out.extend_from_slice(&v.data()[o * n * inner..][..n * inner]);
        }
    }
    let mut shape = base;
    shape[axis] = total;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let t = Tensor::new(shape, out)?;
    graph.record("concat", t, Op::Concat { inputs: ids.clone(), axis }, &ids)
}

/// Graph-free 2×2 mean pooling over the leading two axes.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(Error::dim("avg_pool2", "rank", 2, x.rank()));
    }
    let s = x.shape();
    for axis in 0..2 {
        if s[axis] % 2 != 0 {
            return Err(Error::Dimension {
                op: "avg_pool2",
                axis: format!("{axis} (odd extent {}; pad first)", s[axis]),
                expected: s[axis] + 1,
                found: s[axis],
            });
        }
    }
    let inner = s[2..].iter().product();
    let mut shape = s.to_vec();
    shape[0] /= 2;
    shape[1] /= 2;
    Tensor::new(shape, kernels::avg_pool2_forward(s[0], s[1], inner, x.data()))
}
