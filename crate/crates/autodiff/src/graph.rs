use std::cell::RefCell;

use crate::error::{shape_err, Result, TapeError};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Stabilizer added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Spatial padding mode of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output spatial size is `ceil(input / stride)`.
    Same,
    /// No padding.
    Valid,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddBias(usize, usize),
    MulBias(usize, usize),
    MulRows(usize, usize),
    DivRows(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    AvgPool(usize, usize),
    MaxPool(usize, Vec<usize>),
    Relu(usize),
    Gelu(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    LayerNorm(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    MeanLast(usize),
    Norm(usize),
    NormLast(usize),
    Concat(Vec<usize>, usize),
    Reshape(usize),
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations in creation order so that a reverse sweep
/// visits them in reverse topological order.
///
/// A graph is single-threaded; build one per independent computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

/// Gradients of a scalar output with respect to every differentiable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Takes ownership of a gradient, leaving `None` behind.
    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(TapeError::NonFinite { op })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn last_dim(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape().last() {
        Some(&d) if d > 0 => Ok((t.len() / d, d)),
        _ => shape_err(op, format!("needs a non-empty last axis, got {:?}", t.shape())),
    }
}

/// Splits a matmul operand shape into (batch, rows, cols).
fn mat_dims(t: &Tensor) -> Option<(usize, usize, usize)> {
    match *t.shape() {
        [r, c] => Some((1, r, c)),
        [b, r, c] => Some((b, r, c)),
        _ => None,
    }
}

/// `tanh` through one `exp`; libm's version is several times slower and
/// the absolute error here stays near machine epsilon.
#[inline]
fn fast_tanh(z: f64) -> f64 {
    if z.abs() > 20.0 {
        return z.signum();
    }
    1.0 - 2.0 / ((2.0 * z).exp() + 1.0)
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_A * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = fast_tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// A differentiable leaf.
    pub fn input(&self, value: Tensor) -> Result<Var<'_>> {
        check_finite("input", &value)?;
        Ok(self.push(value, Op::Leaf, true))
    }

    /// A leaf that receives no gradient.
    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        check_finite("constant", &value)?;
        Ok(self.push(value, Op::Leaf, false))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn record(&self, name: &'static str, value: Tensor, op: Op, parents: &[usize]) -> Result<Var<'_>> {
        check_finite(name, &value)?;
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        Ok(self.push(value, op, requires_grad))
    }

    pub fn value(&self, var: Var<'_>) -> Tensor {
        self.nodes.borrow()[var.id].value.clone()
    }

    fn with_values<R>(&self, ids: &[usize], f: impl FnOnce(&[&Tensor]) -> R) -> R {
        let nodes = self.nodes.borrow();
        let vals: Vec<&Tensor> = ids.iter().map(|&i| &nodes[i].value).collect();
        f(&vals)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let shape = self.nodes.borrow()[output.id].value.shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(TapeError::Contract(format!(
                "backward needs a scalar output, got shape {shape:?}"
            )));
        }
        self.backward_with_seed(output, Tensor::ones(&shape))
    }

    /// Vector-Jacobian product: reverse sweep seeded with `seed` at `output`.
    pub fn backward_with_seed(&self, output: Var<'_>, seed: Tensor) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if seed.shape() != nodes[output.id].value.shape() {
            return shape_err(
                "backward",
                format!(
                    "seed {:?} vs output {:?}",
                    seed.shape(),
                    nodes[output.id].value.shape()
                ),
            );
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[output.id] = Some(seed);
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            backprop_node(&nodes, node, &g, &mut grads)?;
        }
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                match &grads[id] {
                    Some(g) => check_finite("backward", g)?,
                    None => grads[id] = Some(Tensor::zeros(node.value.shape())),
                }
            } else {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, contrib: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&contrib),
        slot @ None => *slot = Some(contrib),
    }
}

fn needs(nodes: &[Node], id: usize) -> bool {
    nodes[id].requires_grad
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let val = |id: usize| &nodes[id].value;
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            if needs(nodes, *a) {
                accumulate(nodes, grads, *a, g.zip_map(val(*b), |g, y| g * y)?);
            }
            if needs(nodes, *b) {
                accumulate(nodes, grads, *b, g.zip_map(val(*a), |g, x| g * x)?);
            }
        }
        Op::Div(a, b) => {
            if needs(nodes, *a) {
                accumulate(nodes, grads, *a, g.zip_map(val(*b), |g, y| g / y)?);
            }
            if needs(nodes, *b) {
                // d(x/y)/dy = -out / y
                let t = g.zip_map(out, |g, o| g * o)?;
                accumulate(nodes, grads, *b, t.zip_map(val(*b), |t, y| -t / y)?);
            }
        }
        Op::AddBias(x, b) => {
            accumulate(nodes, grads, *x, g.clone());
            if needs(nodes, *b) {
                let blen = val(*b).len();
                let mut db = vec![0.0; blen];
                for chunk in g.data().chunks(blen) {
                    db.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                }
                accumulate(nodes, grads, *b, Tensor::new(val(*b).shape().to_vec(), db)?);
            }
        }
        Op::MulBias(x, b) => {
            let bv = val(*b);
            let blen = bv.len();
            if needs(nodes, *x) {
                let mut dx = g.clone();
                for chunk in dx.data_mut().chunks_mut(blen) {
                    chunk.iter_mut().zip(bv.data()).for_each(|(d, s)| *d *= s);
                }
                accumulate(nodes, grads, *x, dx);
            }
            if needs(nodes, *b) {
                let mut db = vec![0.0; blen];
                for (gc, xc) in g.data().chunks(blen).zip(val(*x).data().chunks(blen)) {
                    for ((d, gv), xv) in db.iter_mut().zip(gc).zip(xc) {
                        *d += gv * xv;
                    }
                }
                accumulate(nodes, grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
            }
        }
        Op::MulRows(x, s) | Op::DivRows(x, s) => {
            let divide = matches!(node.op, Op::DivRows(..));
            let xs = val(*x);
            let ss = val(*s);
            let d = xs.len() / ss.len().max(1);
            if needs(nodes, *x) {
                let mut dx = g.clone();
                for (row, &sv) in dx.data_mut().chunks_mut(d).zip(ss.data()) {
                    let f = if divide { 1.0 / sv } else { sv };
                    row.iter_mut().for_each(|v| *v *= f);
                }
                accumulate(nodes, grads, *x, dx);
            }
            if needs(nodes, *s) {
                let ds: Vec<f64> = g
                    .data()
                    .chunks(d)
                    .zip(xs.data().chunks(d))
                    .zip(ss.data())
                    .map(|((gr, xr), &sv)| {
                        let dotp: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                        if divide {
                            -dotp / (sv * sv)
                        } else {
                            dotp
                        }
                    })
                    .collect();
                accumulate(nodes, grads, *s, Tensor::new(ss.shape().to_vec(), ds)?);
            }
        }
        Op::Scale(x, c) => accumulate(nodes, grads, *x, g.map(|v| v * c)),
        Op::AddScalar(x) => accumulate(nodes, grads, *x, g.clone()),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (batch, m, k) = mat_dims(av).expect("validated at forward");
            let (_, _, n) = mat_dims(bv).expect("validated at forward");
            if needs(nodes, *a) {
                let mut da = vec![0.0; av.len()];
                for bi in 0..batch {
                    kernels::matmul_grad_a(
                        &g.data()[bi * m * n..(bi + 1) * m * n],
                        &bv.data()[bi * k * n..(bi + 1) * k * n],
                        &mut da[bi * m * k..(bi + 1) * m * k],
                        m,
                        k,
                        n,
                    );
                }
                accumulate(nodes, grads, *a, Tensor::new(av.shape().to_vec(), da)?);
            }
            if needs(nodes, *b) {
                let mut db = vec![0.0; bv.len()];
                for bi in 0..batch {
                    kernels::matmul_grad_b(
                        &av.data()[bi * m * k..(bi + 1) * m * k],
                        &g.data()[bi * m * n..(bi + 1) * m * n],
                        &mut db[bi * k * n..(bi + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                accumulate(nodes, grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
            }
        }
        Op::Transpose(x) => {
            accumulate(nodes, grads, *x, transpose_last2(g));
        }
        Op::Conv2d { x, w, b, geom } => {
            let mut dx = needs(nodes, *x).then(|| vec![0.0; val(*x).len()]);
            let mut dw = needs(nodes, *w).then(|| vec![0.0; val(*w).len()]);
            let mut db = b.filter(|&b| needs(nodes, b)).map(|b| vec![0.0; val(b).len()]);
            kernels::conv2d_backward(
                g.data(),
                val(*x).data(),
                val(*w).data(),
                geom,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            if let Some(dx) = dx {
                accumulate(nodes, grads, *x, Tensor::new(val(*x).shape().to_vec(), dx)?);
            }
            if let Some(dw) = dw {
                accumulate(nodes, grads, *w, Tensor::new(val(*w).shape().to_vec(), dw)?);
            }
            if let (Some(b), Some(db)) = (b, db) {
                accumulate(nodes, grads, *b, Tensor::new(val(*b).shape().to_vec(), db)?);
            }
        }
        Op::AvgPool(x, k) => {
            let xs = val(*x).shape();
            let (h, w) = (xs[2], xs[3]);
            let mut dx = vec![0.0; val(*x).len()];
            kernels::avg_pool_backward(g.data(), &mut dx, xs[0] * xs[1], h, w, *k);
            accumulate(nodes, grads, *x, Tensor::new(xs.to_vec(), dx)?);
        }
        Op::MaxPool(x, argmax) => {
            let mut dx = vec![0.0; val(*x).len()];
            for (&at, &gv) in argmax.iter().zip(g.data()) {
                dx[at] += gv;
            }
            accumulate(nodes, grads, *x, Tensor::new(val(*x).shape().to_vec(), dx)?);
        }
        Op::Relu(x) => {
            accumulate(nodes, grads, *x, g.zip_map(val(*x), |g, x| if x > 0.0 { g } else { 0.0 })?);
        }
        Op::Gelu(x) => {
            accumulate(nodes, grads, *x, g.zip_map(val(*x), |g, x| g * gelu_grad(x))?);
        }
        Op::Tanh(x) => {
            accumulate(nodes, grads, *x, g.zip_map(out, |g, t| g * (1.0 - t * t))?);
        }
        Op::Exp(x) => accumulate(nodes, grads, *x, g.zip_map(out, |g, e| g * e)?),
        Op::Log(x) => accumulate(nodes, grads, *x, g.zip_map(val(*x), |g, x| g / x)?),
        Op::Sqrt(x) => {
            if out.data().contains(&0.0) {
                return Err(TapeError::NonFinite { op: "sqrt backward" });
            }
            accumulate(nodes, grads, *x, g.zip_map(out, |g, s| 0.5 * g / s)?);
        }
        Op::LayerNorm(x) => {
            let xv = val(*x);
            let (_, d) = last_dim("layer_norm", xv)?;
            let mut dx = vec![0.0; xv.len()];
            for ((dxr, xr), (gr, yr)) in dx
                .chunks_mut(d)
                .zip(xv.data().chunks(d))
                .zip(g.data().chunks(d).zip(out.data().chunks(d)))
            {
                let mean = xr.iter().sum::<f64>() / d as f64;
                let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                let g_mean = gr.iter().sum::<f64>() / d as f64;
                let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                for ((o, &gv), &yv) in dxr.iter_mut().zip(gr).zip(yr) {
                    *o = inv * (gv - g_mean - yv * gy_mean);
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
        }
        Op::Softmax(x) => {
            let (_, d) = last_dim("softmax", out)?;
            let mut dx = vec![0.0; out.len()];
            for ((dxr, yr), gr) in dx.chunks_mut(d).zip(out.data().chunks(d)).zip(g.data().chunks(d)) {
                let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((o, &y), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                    *o = y * (gv - s);
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(out.shape().to_vec(), dx)?);
        }
        Op::LogSoftmax(x) => {
            let (_, d) = last_dim("log_softmax", out)?;
            let mut dx = vec![0.0; out.len()];
            for ((dxr, yr), gr) in dx.chunks_mut(d).zip(out.data().chunks(d)).zip(g.data().chunks(d)) {
                let s: f64 = gr.iter().sum();
                for ((o, &y), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                    *o = gv - y.exp() * s;
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(out.shape().to_vec(), dx)?);
        }
        Op::Sum(x) => {
            let gv = g.data()[0];
            accumulate(nodes, grads, *x, Tensor::full(val(*x).shape(), gv));
        }
        Op::Mean(x) => {
            let n = val(*x).len() as f64;
            let gv = g.data()[0] / n;
            accumulate(nodes, grads, *x, Tensor::full(val(*x).shape(), gv));
        }
        Op::SumLast(x) | Op::MeanLast(x) => {
            let xv = val(*x);
            let (_, d) = last_dim("sum_last", xv)?;
            let f = if matches!(node.op, Op::MeanLast(_)) { 1.0 / d as f64 } else { 1.0 };
            let data: Vec<f64> = g
                .data()
                .iter()
                .flat_map(|&gv| std::iter::repeat_n(gv * f, d))
                .collect();
            accumulate(nodes, grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
        }
        Op::Norm(x) => {
            let n = out.data()[0];
            if n == 0.0 {
                return Err(TapeError::NonFinite { op: "norm backward at zero" });
            }
            let f = g.data()[0] / n;
            accumulate(nodes, grads, *x, val(*x).map(|v| v * f));
        }
        Op::NormLast(x) => {
            let xv = val(*x);
            let (_, d) = last_dim("norm_last", xv)?;
            if out.data().contains(&0.0) {
                return Err(TapeError::NonFinite { op: "norm_last backward at zero" });
            }
            let mut dx = xv.clone();
            for ((row, &n), &gv) in dx.data_mut().chunks_mut(d).zip(out.data()).zip(g.data()) {
                let f = gv / n;
                row.iter_mut().for_each(|v| *v *= f);
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::Concat(parts, axis) => {
            let shape = out.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let ps = val(p).shape().to_vec();
                let width = ps[*axis] * inner;
                if needs(nodes, p) {
                    let mut d = Vec::with_capacity(outer * width);
                    for o in 0..outer {
                        d.extend_from_slice(&g.data()[o * total + offset..o * total + offset + width]);
                    }
                    accumulate(nodes, grads, p, Tensor::new(ps, d)?);
                }
                offset += width;
            }
        }
        Op::Reshape(x) => {
            accumulate(nodes, grads, *x, g.reshaped(val(*x).shape())?);
        }
        Op::Slice { x, axis, start } => {
            let xs = val(*x).shape();
            let outer: usize = xs[..*axis].iter().product();
            let inner: usize = xs[axis + 1..].iter().product();
            let src_w = xs[*axis] * inner;
            let w = out.shape()[*axis] * inner;
            let mut dx = vec![0.0; val(*x).len()];
            for o in 0..outer {
                let dst = &mut dx[o * src_w + start * inner..o * src_w + start * inner + w];
                dst.iter_mut()
                    .zip(&g.data()[o * w..(o + 1) * w])
                    .for_each(|(d, v)| *d += v);
            }
            accumulate(nodes, grads, *x, Tensor::new(xs.to_vec(), dx)?);
        }
    }
    Ok(())
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let s = t.shape();
    let nd = s.len();
    let (r, c) = (s[nd - 2], s[nd - 1]);
    let batch = t.len() / (r * c);
    let mut data = vec![0.0; t.len()];
    for b in 0..batch {
        let src = &t.data()[b * r * c..(b + 1) * r * c];
        let dst = &mut data[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(nd - 2, nd - 1);
    Tensor::new(shape, data).expect("same element count")
}

fn conv_out(input: usize, k: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Valid => (input >= k).then(|| ((input - k) / stride + 1, 0)),
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            Some((out, total / 2))
        }
    }
}

// fallible, so not the std operator traits
#[allow(clippy::should_implement_trait)]
impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// The value of a one-element node.
    pub fn item(&self) -> Result<f64> {
        self.graph.nodes.borrow()[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    fn same_graph(&self, other: &Var<'g>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(TapeError::Contract("operands recorded on different graphs".into()))
        }
    }

    fn unary(self, name: &'static str, f: impl FnOnce(&Tensor) -> Result<(Tensor, Op)>) -> Result<Var<'g>> {
        let (value, op) = self.graph.with_values(&[self.id], |v| f(v[0]))?;
        self.graph.record(name, value, op, &[self.id])
    }

    fn binary(
        self,
        other: Var<'g>,
        name: &'static str,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<(Tensor, Op)>,
    ) -> Result<Var<'g>> {
        self.same_graph(&other)?;
        let (value, op) = self.graph.with_values(&[self.id, other.id], |v| f(v[0], v[1]))?;
        self.graph.record(name, value, op, &[self.id, other.id])
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.id, other.id);
        self.binary(other, "add", |x, y| {
            same_shape("add", x, y)?;
            Ok((x.zip_map(y, |a, b| a + b)?, Op::Add(a, b)))
        })
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.id, other.id);
        self.binary(other, "sub", |x, y| {
            same_shape("sub", x, y)?;
            Ok((x.zip_map(y, |a, b| a - b)?, Op::Sub(a, b)))
        })
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.id, other.id);
        self.binary(other, "mul", |x, y| {
            same_shape("mul", x, y)?;
            Ok((x.zip_map(y, |a, b| a * b)?, Op::Mul(a, b)))
        })
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.id, other.id);
        self.binary(other, "div", |x, y| {
            same_shape("div", x, y)?;
            Ok((x.zip_map(y, |a, b| a / b)?, Op::Div(a, b)))
        })
    }

    pub fn square(self) -> Result<Var<'g>> {
        self.mul(self)
    }

    /// Adds `bias` to every trailing block: `bias.shape` must be a suffix of
    /// `self.shape` (broadcast over leading batch dimensions).
    pub fn add_bias(self, bias: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.id, bias.id);
        self.binary(bias, "add_bias", |x, bv| {
            let (xs, bs) = (x.shape(), bv.shape());
            if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs || bv.is_empty() {
                return shape_err("add_bias", format!("{bs:?} is not a suffix of {xs:?}"));
            }
            let mut out = x.clone();
            for chunk in out.data_mut().chunks_mut(bv.len()) {
                chunk.iter_mut().zip(bv.data()).for_each(|(o, b)| *o += b);
            }
            Ok((out, Op::AddBias(a, b)))
        })
    }

    /// Multiplies every trailing block by `scale`, whose shape must be a
    /// suffix of `self.shape`.
    pub fn mul_bias(self, scale: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.id, scale.id);
        self.binary(scale, "mul_bias", |x, sv| {
            let (xs, ss) = (x.shape(), sv.shape());
            if ss.len() > xs.len() || xs[xs.len() - ss.len()..] != *ss || sv.is_empty() {
                return shape_err("mul_bias", format!("{ss:?} is not a suffix of {xs:?}"));
            }
            let mut out = x.clone();
            for chunk in out.data_mut().chunks_mut(sv.len()) {
                chunk.iter_mut().zip(sv.data()).for_each(|(o, s)| *o *= s);
            }
            Ok((out, Op::MulBias(a, b)))
        })
    }

    fn row_op(self, scale: Var<'g>, name: &'static str, divide: bool) -> Result<Var<'g>> {
        let (a, b) = (self.id, scale.id);
        self.binary(scale, name, |x, s| {
            let xs = x.shape();
            if xs.is_empty() || s.shape() != &xs[..xs.len() - 1] {
                return shape_err(name, format!("{:?} does not index the rows of {xs:?}", s.shape()));
            }
            let d = xs[xs.len() - 1];
            let mut out = x.clone();
            for (row, &sv) in out.data_mut().chunks_mut(d.max(1)).zip(s.data()) {
                if divide {
                    row.iter_mut().for_each(|v| *v /= sv);
                } else {
                    row.iter_mut().for_each(|v| *v *= sv);
                }
            }
            let op = if divide { Op::DivRows(a, b) } else { Op::MulRows(a, b) };
            Ok((out, op))
        })
    }

    /// Multiplies each last-axis row by the matching entry of `scale`, whose
    /// shape is `self.shape` without the last axis.
    pub fn mul_rows(self, scale: Var<'g>) -> Result<Var<'g>> {
        self.row_op(scale, "mul_rows", false)
    }

    /// Divides each last-axis row by the matching entry of `scale`.
    pub fn div_rows(self, scale: Var<'g>) -> Result<Var<'g>> {
        self.row_op(scale, "div_rows", true)
    }

    pub fn scale(self, c: f64) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("scale", |x| Ok((x.map(|v| v * c), Op::Scale(id, c))))
    }

    pub fn neg(self) -> Result<Var<'g>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("add_scalar", |x| Ok((x.map(|v| v + c), Op::AddScalar(id))))
    }

    /// `[m,k] x [k,n]` or batched `[b,m,k] x [b,k,n]`.
    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.id, other.id);
        self.binary(other, "matmul", |x, y| {
            let bad = || shape_err("matmul", format!("{:?} x {:?}", x.shape(), y.shape()));
            let (Some((ba, m, k)), Some((bb, k2, n))) = (mat_dims(x), mat_dims(y)) else {
                return bad();
            };
            if k != k2 || ba != bb || x.ndim() != y.ndim() {
                return bad();
            }
            let mut out = vec![0.0; ba * m * n];
            for bi in 0..ba {
                kernels::matmul_acc(
                    &x.data()[bi * m * k..(bi + 1) * m * k],
                    &y.data()[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            let shape = if x.ndim() == 2 { vec![m, n] } else { vec![ba, m, n] };
            Ok((Tensor::new(shape, out)?, Op::MatMul(a, b)))
        })
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("transpose", |x| {
            if x.ndim() < 2 {
                return shape_err("transpose", format!("needs >= 2 axes, got {:?}", x.shape()));
            }
            Ok((transpose_last2(x), Op::Transpose(id)))
        })
    }

    /// 2-D convolution of NCHW input with OIHW weights and optional per-channel bias.
    pub fn conv2d(self, weight: Var<'g>, bias: Option<Var<'g>>, stride: usize, padding: Padding) -> Result<Var<'g>> {
        self.same_graph(&weight)?;
        if let Some(b) = &bias {
            self.same_graph(b)?;
        }
        if stride == 0 {
            return shape_err("conv2d", "stride must be positive");
        }
        let mut ids = vec![self.id, weight.id];
        ids.extend(bias.map(|b| b.id));
        let (value, geom) = self.graph.with_values(&ids, |v| {
            let (xs, ws) = (v[0].shape(), v[1].shape());
            let [n, c, h, w] = <[usize; 4]>::try_from(xs).map_err(|_| ())?;
            let [o, c2, kh, kw] = <[usize; 4]>::try_from(ws).map_err(|_| ())?;
            if c != c2 {
                return Err(());
            }
            if let Some(b) = v.get(2) {
                if b.shape() != [o] {
                    return Err(());
                }
            }
            let (oh, pad_top) = conv_out(h, kh, stride, padding).ok_or(())?;
            let (ow, pad_left) = conv_out(w, kw, stride, padding).ok_or(())?;
            let geom = ConvGeom {
                n,
                c,
                h,
                w,
                o,
                kh,
                kw,
                stride,
                pad_top,
                pad_left,
                oh,
                ow,
            };
            let out = kernels::conv2d_forward(v[0].data(), v[1].data(), v.get(2).map(|b| b.data()), &geom);
            Ok((Tensor::new(vec![n, o, oh, ow], out).expect("sized"), geom))
        })
        .map_err(|_| TapeError::Shape {
            op: "conv2d",
            detail: format!("input {:?}, weight {:?}", self.shape(), weight.shape()),
        })?;
        let op = Op::Conv2d {
            x: self.id,
            w: weight.id,
            b: bias.map(|b| b.id),
            geom,
        };
        self.graph.record("conv2d", value, op, &ids)
    }

    fn pool_dims(x: &Tensor, k: usize, name: &'static str) -> Result<(usize, usize, usize)> {
        match *x.shape() {
            [n, c, h, w] if k > 0 && h % k == 0 && w % k == 0 => Ok((n * c, h, w)),
            _ => shape_err(name, format!("window {k} on {:?}", x.shape())),
        }
    }

    /// Non-overlapping `k x k` average pooling over NCHW input.
    pub fn avg_pool2d(self, k: usize) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("avg_pool2d", |x| {
            let (planes, h, w) = Self::pool_dims(x, k, "avg_pool2d")?;
            let s = x.shape();
            let out = kernels::avg_pool_forward(x.data(), planes, h, w, k);
            Ok((Tensor::new(vec![s[0], s[1], h / k, w / k], out)?, Op::AvgPool(id, k)))
        })
    }

    /// Non-overlapping `k x k` max pooling over NCHW input.
    pub fn max_pool2d(self, k: usize) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("max_pool2d", |x| {
            let (planes, h, w) = Self::pool_dims(x, k, "max_pool2d")?;
            let s = x.shape();
            let idx = kernels::max_pool_argmax(x.data(), planes, h, w, k);
            let out: Vec<f64> = idx.iter().map(|&i| x.data()[i]).collect();
            Ok((Tensor::new(vec![s[0], s[1], h / k, w / k], out)?, Op::MaxPool(id, idx)))
        })
    }

    pub fn relu(self) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("relu", |x| Ok((x.map(|v| v.max(0.0)), Op::Relu(id))))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("gelu", |x| Ok((x.map(gelu), Op::Gelu(id))))
    }

    pub fn tanh(self) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("tanh", |x| Ok((x.map(f64::tanh), Op::Tanh(id))))
    }

    pub fn exp(self) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("exp", |x| Ok((x.map(f64::exp), Op::Exp(id))))
    }

    pub fn log(self) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("log", |x| Ok((x.map(f64::ln), Op::Log(id))))
    }

    pub fn sqrt(self) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("sqrt", |x| Ok((x.map(f64::sqrt), Op::Sqrt(id))))
    }

    /// Normalizes each last-axis row to zero mean and unit variance.
    /// No affine terms; compose with `mul`/`add_bias` for those.
    pub fn layer_norm(self) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("layer_norm", |x| {
            let (_, d) = last_dim("layer_norm", x)?;
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(d) {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            }
            Ok((out, Op::LayerNorm(id)))
        })
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(self) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("softmax", |x| {
            let (_, d) = last_dim("softmax", x)?;
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(d) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.iter_mut().for_each(|v| *v = (*v - m).exp());
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
            }
            Ok((out, Op::Softmax(id)))
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("log_softmax", |x| {
            let (_, d) = last_dim("log_softmax", x)?;
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(d) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            }
            Ok((out, Op::LogSoftmax(id)))
        })
    }

    pub fn sum(self) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("sum", |x| Ok((Tensor::scalar(x.sum()), Op::Sum(id))))
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("mean", |x| {
            if x.is_empty() {
                return shape_err("mean", "empty tensor");
            }
            Ok((Tensor::scalar(x.sum() / x.len() as f64), Op::Mean(id)))
        })
    }

    fn reduce_last(self, name: &'static str, f: impl Fn(&[f64]) -> f64, op: Op) -> Result<Var<'g>> {
        self.unary(name, |x| {
            let (_, d) = last_dim(name, x)?;
            let data: Vec<f64> = x.data().chunks(d).map(f).collect();
            let shape = x.shape()[..x.ndim() - 1].to_vec();
            Ok((Tensor::new(shape, data)?, op))
        })
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(self) -> Result<Var<'g>> {
        self.reduce_last("sum_last", |r| r.iter().sum(), Op::SumLast(self.id))
    }

    /// Mean over the last axis, dropping it.
    pub fn mean_last(self) -> Result<Var<'g>> {
        self.reduce_last("mean_last", |r| r.iter().sum::<f64>() / r.len() as f64, Op::MeanLast(self.id))
    }

    /// Euclidean norm of the whole tensor.
    pub fn l2_norm(self) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("l2_norm", |x| Ok((Tensor::scalar(x.l2_norm()), Op::Norm(id))))
    }

    /// Euclidean norm of each last-axis row, dropping the last axis.
    pub fn l2_norm_last(self) -> Result<Var<'g>> {
        self.reduce_last(
            "l2_norm_last",
            |r| r.iter().map(|v| v * v).sum::<f64>().sqrt(),
            Op::NormLast(self.id),
        )
    }

    /// Rows divided by their Euclidean norm.
    pub fn normalize_last(self) -> Result<Var<'g>> {
        let n = self.l2_norm_last()?;
        self.div_rows(n)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("reshape", |x| {
            if shape.iter().product::<usize>() != x.len() {
                return shape_err("reshape", format!("{:?} -> {shape:?}", x.shape()));
            }
            Ok((x.reshaped(shape)?, Op::Reshape(id)))
        })
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let id = self.id;
        self.unary("slice", |x| {
            let xs = x.shape();
            if axis >= xs.len() || start + len > xs[axis] {
                return shape_err("slice", format!("axis {axis} [{start}, {}) of {xs:?}", start + len));
            }
            let outer: usize = xs[..axis].iter().product();
            let inner: usize = xs[axis + 1..].iter().product();
            let src_w = xs[axis] * inner;
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * src_w + start * inner;
                data.extend_from_slice(&x.data()[base..base + len * inner]);
            }
            let mut shape = xs.to_vec();
            shape[axis] = len;
            Ok((Tensor::new(shape, data)?, Op::Slice { x: id, axis, start }))
        })
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let Some(first) = parts.first() else {
            return shape_err("concat", "no operands");
        };
        for p in parts {
            first.same_graph(p)?;
        }
        let graph = first.graph;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let value = graph.with_values(&ids, |vals| {
            let s0 = vals[0].shape();
            if axis >= s0.len() {
                return shape_err("concat", format!("axis {axis} of {s0:?}"));
            }
            let mut total = 0;
            for v in vals {
                let s = v.shape();
                if s.len() != s0.len() || s.iter().zip(s0).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                    return shape_err("concat", format!("{s:?} vs {s0:?} along axis {axis}"));
                }
                total += s[axis];
            }
            let outer: usize = s0[..axis].iter().product();
            let inner: usize = s0[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in vals {
                    let w = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
                }
            }
            let mut shape = s0.to_vec();
            shape[axis] = total;
            Tensor::new(shape, data)
        })?;
        graph.record("concat", value, Op::Concat(ids.clone(), axis), &ids)
    }
}
