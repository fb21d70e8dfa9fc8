use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use super::kernels::{self, AttentionShape, LayerNormCache};
use super::{Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddRow(usize, usize),
    Softmax { x: usize, outer: usize, n: usize, inner: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, cache: LayerNormCache },
    Gelu(usize),
    Relu(usize),
    Sqrt(usize),
    RowSums(usize),
    Sum(usize),
    Mean(usize),
    Embedding { table: usize, ids: Vec<usize> },
    GatherRows { x: usize, idx: Vec<usize> },
    ConcatRows(Vec<usize>),
    SegmentMean { x: usize, seg: usize },
    ReplaceRows { x: usize, fill: usize, rows: Vec<usize> },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
    Mse { pred: usize, target: Vec<f64> },
    Attention { q: usize, k: usize, v: usize, shape: AttentionShape, probs: Vec<f64> },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Gelu(a) | Relu(a) | Sqrt(a) | RowSums(a) | Sum(a)
            | Mean(a) => vec![*a],
            Softmax { x, .. } | GatherRows { x, .. } | SegmentMean { x, .. } => vec![*x],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Embedding { table, .. } => vec![*table],
            ConcatRows(parts) => parts.clone(),
            ReplaceRows { x, fill, .. } => vec![*x, *fill],
            CrossEntropy { logits, .. } => vec![*logits],
            Mse { pred, .. } => vec![*pred],
            Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of recorded operations. Values are immutable once recorded; a single
/// [`Graph::backward`] consumes the tape until [`Graph::clear`] is called.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Gradients produced by one backward pass, indexed by recorded value.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when the value does not require grad or the loss does not reach it.
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Vec<f64>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl Graph {
    /// Probabilities of every attention op recorded so far, in recording order.
    pub fn attention_maps(&self) -> Vec<Vec<f64>> {
        self.nodes
            .borrow()
            .iter()
            .filter_map(|n| match &n.op {
                Op::Attention { probs, .. } => Some(probs.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded operation so the graph can serve a new step.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
        self.consumed.set(false);
    }

    /// Records a tensor as an input; gradients flow to it when it requires grad.
    pub fn leaf(&self, tensor: Tensor) -> Result<Var<'_>> {
        let needs = tensor.requires_grad();
        self.record(tensor, Op::Leaf, Some(needs))
    }

    pub fn constant(&self, tensor: Tensor) -> Result<Var<'_>> {
        self.record(tensor.with_requires_grad(false), Op::Leaf, Some(false))
    }

    pub fn param(&self, tensor: &Tensor) -> Result<Var<'_>> {
        self.record(tensor.clone().with_requires_grad(true), Op::Leaf, Some(true))
    }

    fn record(&self, value: Tensor, op: Op, needs: Option<bool>) -> Result<Var<'_>> {
        if self.consumed.get() {
            return Err(TensorError::GraphConsumed);
        }
        if let Some(index) = value.data().iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                op: op_name(&op),
                index,
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad =
            needs.unwrap_or_else(|| op.inputs().iter().any(|&i| nodes[i].needs_grad));
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var {
            graph: self,
            id: nodes.len() - 1,
        })
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Var<'_>> {
        self.record(Tensor::from_parts(shape, data), op, None)
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse-mode pass from a scalar loss. Consumes the tape: a second call
    /// without [`Graph::clear`] fails with [`TensorError::GraphConsumed`].
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.consumed.get() {
            return Err(TensorError::GraphConsumed);
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        self.consumed.set(true);
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (id, node) in nodes.iter().enumerate() {
            if !node.needs_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn op_name(op: &Op) -> &'static str {
    use Op::*;
    match op {
        Leaf => "leaf",
        MatMul(..) => "matmul",
        Add(..) => "add",
        Sub(..) => "sub",
        Mul(..) => "mul",
        Scale(..) => "scale",
        AddScalar(..) => "add_scalar",
        AddRow(..) => "add_row",
        Softmax { .. } => "softmax",
        LayerNorm { .. } => "layer_norm",
        Gelu(..) => "gelu",
        Relu(..) => "relu",
        Sqrt(..) => "sqrt",
        RowSums(..) => "row_sums",
        Sum(..) => "sum",
        Mean(..) => "mean",
        Embedding { .. } => "embedding",
        GatherRows { .. } => "gather_rows",
        ConcatRows(..) => "concat_rows",
        SegmentMean { .. } => "segment_mean",
        ReplaceRows { .. } => "replace_rows",
        CrossEntropy { .. } => "cross_entropy",
        Mse { .. } => "mse",
        Attention { .. } => "attention",
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].needs_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    f(slot);
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            accumulate(grads, nodes, *a, |ga| {
                kernels::matmul_a_bt_acc(g, bv.data(), m, n, k, ga)
            });
            accumulate(grads, nodes, *b, |gb| {
                kernels::matmul_at_b_acc(av.data(), g, m, k, n, gb)
            });
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |ga| add_into(ga, g));
            accumulate(grads, nodes, *b, |gb| add_into(gb, g));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |ga| add_into(ga, g));
            accumulate(grads, nodes, *b, |gb| {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y)
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
            });
            accumulate(grads, nodes, *b, |gb| {
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            });
        }
        Op::Scale(a, c) => {
            accumulate(grads, nodes, *a, |ga| {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)
            });
        }
        Op::AddScalar(a) => accumulate(grads, nodes, *a, |ga| add_into(ga, g)),
        Op::AddRow(x, bias) => {
            let cols = nodes[*bias].value.numel();
            accumulate(grads, nodes, *x, |gx| add_into(gx, g));
            accumulate(grads, nodes, *bias, |gb| {
                for row in g.chunks_exact(cols) {
                    add_into(gb, row);
                }
            });
        }
        Op::Softmax { x, outer, n, inner } => {
            let (outer, n, inner) = (*outer, *n, *inner);
            accumulate(grads, nodes, *x, |gx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dotp: f64 = (0..n).map(|j| g[at(j)] * out[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] += out[at(j)] * (g[at(j)] - dotp);
                        }
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            cache,
        } => {
            let gv = nodes[*gain].value.data();
            let d = gv.len();
            accumulate(grads, nodes, *x, |gx| {
                for (r, rs) in cache.rstd.iter().enumerate() {
                    let base = r * d;
                    let mut mean_gh = 0.0;
                    let mut mean_gh_xh = 0.0;
                    for j in 0..d {
                        let gh = g[base + j] * gv[j];
                        mean_gh += gh;
                        mean_gh_xh += gh * cache.xhat[base + j];
                    }
                    mean_gh /= d as f64;
                    mean_gh_xh /= d as f64;
                    for j in 0..d {
                        let gh = g[base + j] * gv[j];
                        gx[base + j] +=
                            rs * (gh - mean_gh - cache.xhat[base + j] * mean_gh_xh);
                    }
                }
            });
            accumulate(grads, nodes, *gain, |gg| {
                for (row_g, row_h) in g.chunks_exact(d).zip(cache.xhat.chunks_exact(d)) {
                    for j in 0..d {
                        gg[j] += row_g[j] * row_h[j];
                    }
                }
            });
            accumulate(grads, nodes, *bias, |gb| {
                for row in g.chunks_exact(d) {
                    add_into(gb, row);
                }
            });
        }
        Op::Gelu(a) => {
            let av = nodes[*a].value.data();
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * kernels::gelu_grad(av[i]);
                }
            });
        }
        Op::Relu(a) => {
            let av = nodes[*a].value.data();
            accumulate(grads, nodes, *a, |ga| {
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            });
        }
        Op::Sqrt(a) => accumulate(grads, nodes, *a, |ga| {
            for i in 0..g.len() {
                ga[i] += g[i] * 0.5 / out[i];
            }
        }),
        Op::RowSums(a) => {
            let cols = nodes[*a].value.cols();
            accumulate(grads, nodes, *a, |ga| {
                for (r, row) in ga.chunks_exact_mut(cols).enumerate() {
                    row.iter_mut().for_each(|v| *v += g[r]);
                }
            });
        }
        Op::Sum(a) => accumulate(grads, nodes, *a, |ga| ga.iter_mut().for_each(|v| *v += g[0])),
        Op::Mean(a) => {
            let n = nodes[*a].value.numel() as f64;
            accumulate(grads, nodes, *a, |ga| {
                ga.iter_mut().for_each(|v| *v += g[0] / n)
            });
        }
        Op::Embedding { table, ids } => {
            let d = nodes[*table].value.cols();
            accumulate(grads, nodes, *table, |gt| {
                for (r, &tok) in ids.iter().enumerate() {
                    add_into(&mut gt[tok * d..(tok + 1) * d], &g[r * d..(r + 1) * d]);
                }
            });
        }
        Op::GatherRows { x, idx } => {
            let d = nodes[*x].value.cols();
            accumulate(grads, nodes, *x, |gx| {
                for (r, &src) in idx.iter().enumerate() {
                    add_into(&mut gx[src * d..(src + 1) * d], &g[r * d..(r + 1) * d]);
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.numel();
                accumulate(grads, nodes, p, |gp| add_into(gp, &g[offset..offset + len]));
                offset += len;
            }
        }
        Op::SegmentMean { x, seg } => {
            let d = nodes[*x].value.cols();
            let inv = 1.0 / *seg as f64;
            accumulate(grads, nodes, *x, |gx| {
                for (r, row) in gx.chunks_exact_mut(d).enumerate() {
                    let src = &g[(r / seg) * d..(r / seg + 1) * d];
                    row.iter_mut().zip(src).for_each(|(a, b)| *a += inv * b);
                }
            });
        }
        Op::ReplaceRows { x, fill, rows } => {
            let d = nodes[*x].value.cols();
            let mut replaced = vec![false; nodes[*x].value.rows()];
            rows.iter().for_each(|&r| replaced[r] = true);
            accumulate(grads, nodes, *x, |gx| {
                for (r, row) in gx.chunks_exact_mut(d).enumerate() {
                    if !replaced[r] {
                        add_into(row, &g[r * d..(r + 1) * d]);
                    }
                }
            });
            accumulate(grads, nodes, *fill, |gf| {
                for &r in rows {
                    add_into(gf, &g[r * d..(r + 1) * d]);
                }
            });
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let n = nodes[*logits].value.cols();
            let scale = g[0] / labels.len() as f64;
            accumulate(grads, nodes, *logits, |gl| {
                for (r, &y) in labels.iter().enumerate() {
                    for j in 0..n {
                        let target = if j == y { 1.0 } else { 0.0 };
                        gl[r * n + j] += scale * (probs[r * n + j] - target);
                    }
                }
            });
        }
        Op::Mse { pred, target } => {
            let pv = nodes[*pred].value.data();
            let scale = 2.0 * g[0] / target.len() as f64;
            accumulate(grads, nodes, *pred, |gp| {
                for i in 0..target.len() {
                    gp[i] += scale * (pv[i] - target[i]);
                }
            });
        }
        Op::Attention {
            q,
            k,
            v,
            shape,
            probs,
        } => {
            let (qv, kv, vv) = (
                nodes[*q].value.data(),
                nodes[*k].value.data(),
                nodes[*v].value.data(),
            );
            let mut dq = vec![0.0; qv.len()];
            let mut dk = vec![0.0; kv.len()];
            let mut dv = vec![0.0; vv.len()];
            kernels::attention_backward(qv, kv, vv, probs, g, shape, &mut dq, &mut dk, &mut dv);
            accumulate(grads, nodes, *q, |gq| add_into(gq, &dq));
            accumulate(grads, nodes, *k, |gk| add_into(gk, &dk));
            accumulate(grads, nodes, *v, |gv| add_into(gv, &dv));
        }
    }
}

fn add_into(acc: &mut [f64], src: &[f64]) {
    acc.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Ref<'g, Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.value().data().to_vec()
    }

    fn check_same_graph(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(TensorError::Usage("operands recorded on different graphs".into()))
        }
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.check_same_graph(&rhs)?;
        let (data, shape) = {
            let (a, b) = (self.value(), rhs.value());
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(TensorError::Dimension {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            (kernels::matmul(a.data(), b.data(), m, k, n), vec![m, n])
        };
        self.graph.push(shape, data, Op::MatMul(self.id, rhs.id))
    }

    fn zip_with(self, rhs: Var<'g>, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        self.check_same_graph(&rhs)?;
        let (a, b) = (self.value(), rhs.value());
        same_shape(name, &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok((a.shape().to_vec(), data))
    }

    pub fn add(self, rhs: Var<'g>) -> Result<Var<'g>> {
        let (shape, data) = self.zip_with(rhs, "add", |x, y| x + y)?;
        self.graph.push(shape, data, Op::Add(self.id, rhs.id))
    }

    pub fn sub(self, rhs: Var<'g>) -> Result<Var<'g>> {
        let (shape, data) = self.zip_with(rhs, "sub", |x, y| x - y)?;
        self.graph.push(shape, data, Op::Sub(self.id, rhs.id))
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        let (shape, data) = self.zip_with(rhs, "mul", |x, y| x * y)?;
        self.graph.push(shape, data, Op::Mul(self.id, rhs.id))
    }

    fn map(self, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'g>> {
        let (shape, data) = {
            let a = self.value();
            (a.shape().to_vec(), a.data().iter().map(|&v| f(v)).collect())
        };
        self.graph.push(shape, data, op)
    }

    pub fn scale(self, c: f64) -> Result<Var<'g>> {
        self.map(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'g>> {
        self.map(Op::AddScalar(self.id), |v| v + c)
    }

    pub fn gelu(self) -> Result<Var<'g>> {
        self.map(Op::Gelu(self.id), kernels::gelu)
    }

    pub fn relu(self) -> Result<Var<'g>> {
        self.map(Op::Relu(self.id), |v| v.max(0.0))
    }

    /// Elementwise square root; inputs must be positive.
    pub fn sqrt(self) -> Result<Var<'g>> {
        if self.value().data().iter().any(|&v| v <= 0.0) {
            return Err(TensorError::Usage("sqrt of a non-positive value".into()));
        }
        self.map(Op::Sqrt(self.id), f64::sqrt)
    }

    /// Adds a `[cols]` vector to every row.
    pub fn add_row(self, bias: Var<'g>) -> Result<Var<'g>> {
        self.check_same_graph(&bias)?;
        let (shape, data) = {
            let (x, b) = (self.value(), bias.value());
            if b.numel() != x.cols() {
                return Err(TensorError::Dimension {
                    op: "add_row",
                    lhs: x.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut data = x.data().to_vec();
            for row in data.chunks_exact_mut(b.numel()) {
                add_into(row, b.data());
            }
            (x.shape().to_vec(), data)
        };
        self.graph.push(shape, data, Op::AddRow(self.id, bias.id))
    }

    /// `x · w + b` for `w: [in×out]`, `b: [out]`.
    pub fn linear(self, weight: Var<'g>, bias: Var<'g>) -> Result<Var<'g>> {
        self.matmul(weight)?.add_row(bias)
    }

    /// Softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        let (shape, data, outer, n, inner) = {
            let x = self.value();
            let shape = x.shape().to_vec();
            if axis >= shape.len() {
                return Err(TensorError::Usage(format!(
                    "softmax axis {axis} out of range for {shape:?}"
                )));
            }
            let outer: usize = shape[..axis].iter().product();
            let n = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let mut data = x.data().to_vec();
            let mut buf = vec![0.0; n];
            for o in 0..outer {
                for i in 0..inner {
                    for j in 0..n {
                        buf[j] = data[(o * n + j) * inner + i];
                    }
                    kernels::softmax_row(&mut buf);
                    for j in 0..n {
                        data[(o * n + j) * inner + i] = buf[j];
                    }
                }
            }
            (shape, data, outer, n, inner)
        };
        self.graph.push(
            shape,
            data,
            Op::Softmax {
                x: self.id,
                outer,
                n,
                inner,
            },
        )
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(self, gain: Var<'g>, bias: Var<'g>, eps: f64) -> Result<Var<'g>> {
        self.check_same_graph(&gain)?;
        self.check_same_graph(&bias)?;
        if eps <= 0.0 {
            return Err(TensorError::Usage("layer_norm eps must be positive".into()));
        }
        let (shape, data, cache) = {
            let (x, gv, bv) = (self.value(), gain.value(), bias.value());
            let d = x.cols();
            if gv.numel() != d || bv.numel() != d {
                return Err(TensorError::Dimension {
                    op: "layer_norm",
                    lhs: x.shape().to_vec(),
                    rhs: gv.shape().to_vec(),
                });
            }
            let (out, cache) = kernels::layer_norm(x.data(), gv.data(), bv.data(), d, eps);
            (x.shape().to_vec(), out, cache)
        };
        self.graph.push(
            shape,
            data,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                cache,
            },
        )
    }

    /// Sum of each row, shape `[rows, 1]`.
    pub fn row_sums(self) -> Result<Var<'g>> {
        let (rows, data) = {
            let x = self.value();
            let data: Vec<f64> = x
                .data()
                .chunks_exact(x.cols())
                .map(|r| r.iter().sum())
                .collect();
            (x.rows(), data)
        };
        self.graph.push(vec![rows, 1], data, Op::RowSums(self.id))
    }

    pub fn sum(self) -> Result<Var<'g>> {
        let s = self.value().data().iter().sum();
        self.graph.push(vec![1], vec![s], Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'g>> {
        let m = {
            let x = self.value();
            x.data().iter().sum::<f64>() / x.numel() as f64
        };
        self.graph.push(vec![1], vec![m], Op::Mean(self.id))
    }

    /// Row lookup `table[ids[r]]` producing `[ids.len(), d]`.
    pub fn embedding(self, ids: &[usize]) -> Result<Var<'g>> {
        let (d, data) = {
            let t = self.value();
            let (vocab, d) = (t.rows(), t.cols());
            if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
                return Err(TensorError::Usage(format!(
                    "embedding id {bad} outside table of {vocab} rows"
                )));
            }
            let mut data = Vec::with_capacity(ids.len() * d);
            ids.iter().for_each(|&i| data.extend_from_slice(t.row(i)));
            (d, data)
        };
        if ids.is_empty() {
            return Err(TensorError::Usage("embedding of an empty id list".into()));
        }
        self.graph.push(
            vec![ids.len(), d],
            data,
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
        )
    }

    /// Selects rows by index (repeats allowed), the graph's slicing primitive.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'g>> {
        if idx.is_empty() {
            return Err(TensorError::Usage("gather of an empty index list".into()));
        }
        let (d, data) = {
            let x = self.value();
            let rows = x.rows();
            if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
                return Err(TensorError::Usage(format!(
                    "row {bad} out of range for {rows} rows"
                )));
            }
            let mut data = Vec::with_capacity(idx.len() * x.cols());
            idx.iter().for_each(|&i| data.extend_from_slice(x.row(i)));
            (x.cols(), data)
        };
        self.graph.push(
            vec![idx.len(), d],
            data,
            Op::GatherRows {
                x: self.id,
                idx: idx.to_vec(),
            },
        )
    }

    /// Contiguous rows `start..start + len`.
    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'g>> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(&idx)
    }

    /// Mean over consecutive groups of `seg` rows.
    pub fn segment_mean(self, seg: usize) -> Result<Var<'g>> {
        let (shape, data) = {
            let x = self.value();
            if seg == 0 || x.rows() % seg != 0 {
                return Err(TensorError::Usage(format!(
                    "segment length {seg} does not divide {} rows",
                    x.rows()
                )));
            }
            let d = x.cols();
            let groups = x.rows() / seg;
            let mut data = vec![0.0; groups * d];
            for r in 0..x.rows() {
                let dst = &mut data[(r / seg) * d..(r / seg + 1) * d];
                dst.iter_mut()
                    .zip(x.row(r))
                    .for_each(|(a, b)| *a += b / seg as f64);
            }
            (vec![groups, d], data)
        };
        self.graph.push(shape, data, Op::SegmentMean { x: self.id, seg })
    }

    /// Copy of `self` with the listed rows overwritten by the `[d]` vector `fill`.
    pub fn replace_rows(self, rows: &[usize], fill: Var<'g>) -> Result<Var<'g>> {
        self.check_same_graph(&fill)?;
        let (shape, data) = {
            let (x, f) = (self.value(), fill.value());
            let d = x.cols();
            if f.numel() != d {
                return Err(TensorError::Dimension {
                    op: "replace_rows",
                    lhs: x.shape().to_vec(),
                    rhs: f.shape().to_vec(),
                });
            }
            if let Some(&bad) = rows.iter().find(|&&r| r >= x.rows()) {
                return Err(TensorError::Usage(format!("row {bad} out of range")));
            }
            let mut data = x.data().to_vec();
            for &r in rows {
                data[r * d..(r + 1) * d].copy_from_slice(f.data());
            }
            (x.shape().to_vec(), data)
        };
        self.graph.push(
            shape,
            data,
            Op::ReplaceRows {
                x: self.id,
                fill: fill.id,
                rows: rows.to_vec(),
            },
        )
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `self`.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'g>> {
        let (loss, probs) = {
            let x = self.value();
            let (rows, n) = (x.rows(), x.cols());
            if labels.len() != rows {
                return Err(TensorError::Usage(format!(
                    "{} labels for {rows} logit rows",
                    labels.len()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
                return Err(TensorError::Usage(format!(
                    "label {bad} outside [0, {n})"
                )));
            }
            let mut probs = x.data().to_vec();
            let mut loss = 0.0;
            for (r, &y) in labels.iter().enumerate() {
                let row = &mut probs[r * n..(r + 1) * n];
                loss += kernels::log_sum_exp(row) - row[y];
                kernels::softmax_row(row);
            }
            (loss / rows as f64, probs)
        };
        self.graph.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Mean squared error against a constant target of identical length.
    pub fn mse(self, target: &[f64]) -> Result<Var<'g>> {
        let loss = {
            let x = self.value();
            if x.numel() != target.len() {
                return Err(TensorError::Dimension {
                    op: "mse",
                    lhs: x.shape().to_vec(),
                    rhs: vec![target.len()],
                });
            }
            x.data()
                .iter()
                .zip(target)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / target.len() as f64
        };
        self.graph.push(
            vec![1],
            vec![loss],
            Op::Mse {
                pred: self.id,
                target: target.to_vec(),
            },
        )
    }

    /// Multi-head self-attention core over `batch = rows / seq` sequences.
    /// `key_mask`, when given, has one flag per row; false keys are ignored.
    pub fn attention(
        self,
        k: Var<'g>,
        v: Var<'g>,
        heads: usize,
        seq: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Var<'g>> {
        self.check_same_graph(&k)?;
        self.check_same_graph(&v)?;
        let (shape, out, probs, ashape) = {
            let (qv, kv, vv) = (self.value(), k.value(), v.value());
            same_shape("attention", &qv, &kv)?;
            same_shape("attention", &qv, &vv)?;
            let (rows, width) = (qv.rows(), qv.cols());
            if heads == 0 || width % heads != 0 || seq == 0 || rows % seq != 0 {
                return Err(TensorError::Usage(format!(
                    "attention over {rows}×{width} with {heads} heads and sequence length {seq}"
                )));
            }
            if let Some(m) = key_mask {
                if m.len() != rows {
                    return Err(TensorError::Usage(format!(
                        "key mask of length {} for {rows} rows",
                        m.len()
                    )));
                }
                for (b, chunk) in m.chunks_exact(seq).enumerate() {
                    if !chunk.iter().any(|&f| f) {
                        return Err(TensorError::Usage(format!(
                            "sequence {b} has no attendable keys"
                        )));
                    }
                }
            }
            let ashape = AttentionShape {
                batch: rows / seq,
                seq,
                heads,
                head_dim: width / heads,
            };
            let (out, probs) =
                kernels::attention_forward(qv.data(), kv.data(), vv.data(), key_mask, &ashape);
            (qv.shape().to_vec(), out, probs, ashape)
        };
        self.graph.push(
            shape,
            out,
            Op::Attention {
                q: self.id,
                k: k.id,
                v: v.id,
                shape: ashape,
                probs,
            },
        )
    }

    /// Attention probabilities `[batch, heads, seq, seq]` when `self` is an attention output.
    pub fn attention_probs(&self) -> Option<Vec<f64>> {
        let nodes = self.graph.nodes.borrow();
        match &nodes[self.id].op {
            Op::Attention { probs, .. } => Some(probs.clone()),
            _ => None,
        }
    }
}

/// Concatenates matrices with equal column counts along the row axis.
pub fn concat_rows<'g>(parts: &[Var<'g>]) -> Result<Var<'g>> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::Usage("concat of zero parts".into()))?;
    let graph = first.graph;
    let cols = first.cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        first.check_same_graph(p)?;
        let v = p.value();
        if v.cols() != cols {
            return Err(TensorError::Dimension {
                op: "concat_rows",
                lhs: first.shape(),
                rhs: v.shape().to_vec(),
            });
        }
        rows += v.rows();
        data.extend_from_slice(v.data());
    }
    graph.push(
        vec![rows, cols],
        data,
        Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
    )
}
