use std::cell::RefCell;
use std::sync::Arc;

use super::linalg::{cholesky, cholesky_inverse, cholesky_logdet, cholesky_solve, gemm};
use super::{check_shape, Tensor};
use crate::error::{Error, Result};

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise unary operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    /// `relu'(0) = 0`.
    Relu,
    Sigmoid,
    Square,
    Sqrt,
    /// `abs'(0) = 0`.
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// Reduction kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

enum Op {
    Leaf,
    Unary(Unary, usize),
    Affine {
        input: usize,
        scale: f64,
    },
    Binary(Binary, usize, usize),
    MatMul(usize, usize),
    /// `A · x` with a shared constant `A`.
    ConstMatMul(Arc<Tensor>, usize),
    Transpose(usize),
    Reshape(usize),
    Reduce {
        kind: Reduce,
        input: usize,
        /// Output index for each input entry.
        map: Vec<usize>,
        /// Mean: entries per output. Max: winning input index per output.
        aux: Vec<usize>,
    },
    Upsample2x(usize),
    ChannelNorm {
        input: usize,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    RowAffine {
        input: usize,
        scale: usize,
        bias: usize,
    },
    LogDetSpd {
        input: usize,
        inverse: Vec<f64>,
    },
    QuadFormInv {
        matrix: usize,
        vector: usize,
        solved: Vec<f64>,
    },
    TotalVariation {
        input: usize,
        delta: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A define-by-run record of tensor operations.
///
/// Nodes are appended in evaluation order, so every parent precedes its
/// children. Not `Sync`: a tape belongs to the thread that built it.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a differentiable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, true)
    }

    /// Records a constant; no gradient is accumulated for it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_node(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push_node(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(
        &self,
        name: &str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        parents: &[usize],
    ) -> Result<Var<'_>> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name.into() });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        Ok(self.push_node(Tensor::from_parts(shape, data), op, requires_grad))
    }

    fn check_owner(&self, v: Var<'_>) {
        assert!(
            std::ptr::eq(self, v.tape),
            "variable belongs to a different tape"
        );
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        self.check_owner(root);
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(root.id + 1, || None);
        grads[root.id] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = Vec::new();
        leaves.resize_with(nodes.len(), || None);

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, node, g, &mut grads, &mut leaves)?;
        }

        for (id, g) in leaves.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite {
                        op: format!("backward (gradient of node {id})"),
                    });
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

/// Leaf gradients produced by [`Tape::backward`]. Immutable and `Send`.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a leaf, or `None` if it was never reached.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`; zeros when `v` is unreachable from the root.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v.node_id())
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }

    /// Number of leaves that received a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, contribution: Vec<f64>) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn backprop(
    nodes: &[Node],
    id: usize,
    node: &Node,
    g: Vec<f64>,
    grads: &mut [Option<Vec<f64>>],
    leaves: &mut [Option<Tensor>],
) -> Result<()> {
    let needs = |p: usize| nodes[p].requires_grad;
    let val = |p: usize| nodes[p].value.data();
    match &node.op {
        Op::Leaf => {
            leaves[id] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
        }
        Op::Unary(kind, x) => {
            let xs = val(*x);
            let ys = node.value.data();
            let gx: Vec<f64> = match kind {
                Unary::Neg => g.iter().map(|v| -v).collect(),
                Unary::Exp => g.iter().zip(ys).map(|(g, y)| g * y).collect(),
                Unary::Log => g.iter().zip(xs).map(|(g, x)| g / x).collect(),
                Unary::Relu => g
                    .iter()
                    .zip(xs)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
                Unary::Sigmoid => g.iter().zip(ys).map(|(g, y)| g * y * (1.0 - y)).collect(),
                Unary::Square => g.iter().zip(xs).map(|(g, x)| 2.0 * g * x).collect(),
                Unary::Sqrt => g.iter().zip(ys).map(|(g, y)| g / (2.0 * y)).collect(),
                Unary::Abs => g
                    .iter()
                    .zip(xs)
                    .map(|(g, &x)| if x == 0.0 { 0.0 } else { g * x.signum() })
                    .collect(),
            };
            accumulate(grads, *x, gx);
        }
        Op::Affine { input, scale } => {
            accumulate(grads, *input, g.iter().map(|v| v * scale).collect());
        }
        Op::Binary(kind, a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let n = g.len();
            let a_at = |i: usize| if av.len() == 1 { av[0] } else { av[i] };
            let b_at = |i: usize| if bv.len() == 1 { bv[0] } else { bv[i] };
            let reduce_to = |full: Vec<f64>, len: usize| {
                if len == 1 && n != 1 {
                    vec![full.iter().sum()]
                } else {
                    full
                }
            };
            if needs(*a) {
                let ga: Vec<f64> = match kind {
                    Binary::Add | Binary::Sub => g.clone(),
                    Binary::Mul => (0..n).map(|i| g[i] * b_at(i)).collect(),
                    Binary::Div => (0..n).map(|i| g[i] / b_at(i)).collect(),
                };
                accumulate(grads, *a, reduce_to(ga, av.len()));
            }
            if needs(*b) {
                let gb: Vec<f64> = match kind {
                    Binary::Add => g.clone(),
                    Binary::Sub => g.iter().map(|v| -v).collect(),
                    Binary::Mul => (0..n).map(|i| g[i] * a_at(i)).collect(),
                    Binary::Div => (0..n)
                        .map(|i| {
                            let bi = b_at(i);
                            -g[i] * a_at(i) / (bi * bi)
                        })
                        .collect(),
                };
                accumulate(grads, *b, reduce_to(gb, bv.len()));
            }
        }
        Op::MatMul(a, b) => {
            let (ash, bsh) = (nodes[*a].value.shape(), nodes[*b].value.shape());
            let (m, k, n) = (ash[0], ash[1], bsh[1]);
            if needs(*a) {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, &g, false, val(*b), true, &mut ga, false);
                accumulate(grads, *a, ga);
            }
            if needs(*b) {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, val(*a), true, &g, false, &mut gb, false);
                accumulate(grads, *b, gb);
            }
        }
        Op::ConstMatMul(a, x) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = nodes[*x].value.numel() / k;
            let mut gx = vec![0.0; k * n];
            gemm(k, m, n, a.data(), true, &g, false, &mut gx, false);
            accumulate(grads, *x, gx);
        }
        Op::Transpose(x) => {
            let sh = nodes[*x].value.shape();
            accumulate(grads, *x, transpose(&g, sh[1], sh[0]));
        }
        Op::Reshape(x) => accumulate(grads, *x, g),
        Op::Reduce {
            kind,
            input,
            map,
            aux,
        } => {
            let n_in = nodes[*input].value.numel();
            let gx: Vec<f64> = match kind {
                Reduce::Sum => map.iter().map(|&o| g[o]).collect(),
                Reduce::Mean => map.iter().map(|&o| g[o] / aux[o] as f64).collect(),
                Reduce::Max => {
                    let mut gx = vec![0.0; n_in];
                    for (o, &winner) in aux.iter().enumerate() {
                        gx[winner] += g[o];
                    }
                    gx
                }
            };
            accumulate(grads, *input, gx);
        }
        Op::Upsample2x(x) => {
            let (c, h, w) = chw(nodes[*x].value.shape());
            accumulate(grads, *x, upsample2x_adjoint(&g, c, h, w));
        }
        Op::ChannelNorm {
            input,
            normalized,
            inv_std,
        } => {
            let c = inv_std.len();
            let p = g.len() / c;
            let mut gx = vec![0.0; g.len()];
            for (ch, inv) in inv_std.iter().enumerate() {
                let rows = ch * p..(ch + 1) * p;
                let gr = &g[rows.clone()];
                let xr = &normalized[rows.clone()];
                let mean_g = gr.iter().sum::<f64>() / p as f64;
                let mean_gx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / p as f64;
                for (o, (gi, xi)) in gx[rows].iter_mut().zip(gr.iter().zip(xr)) {
                    *o = inv * (gi - mean_g - xi * mean_gx);
                }
            }
            accumulate(grads, *input, gx);
        }
        Op::RowAffine { input, scale, bias } => {
            let xs = val(*input);
            let s = val(*scale);
            let c = s.len();
            let p = g.len() / c;
            if needs(*input) {
                let gx = (0..g.len()).map(|i| g[i] * s[i / p]).collect();
                accumulate(grads, *input, gx);
            }
            if needs(*scale) {
                let gs = (0..c)
                    .map(|ch| (ch * p..(ch + 1) * p).map(|i| g[i] * xs[i]).sum())
                    .collect();
                accumulate(grads, *scale, gs);
            }
            if needs(*bias) {
                let gb = (0..c)
                    .map(|ch| g[ch * p..(ch + 1) * p].iter().sum())
                    .collect();
                accumulate(grads, *bias, gb);
            }
        }
        Op::LogDetSpd { input, inverse } => {
            accumulate(grads, *input, inverse.iter().map(|v| v * g[0]).collect());
        }
        Op::QuadFormInv {
            matrix,
            vector,
            solved,
        } => {
            if needs(*vector) {
                accumulate(grads, *vector, solved.iter().map(|s| 2.0 * g[0] * s).collect());
            }
            if needs(*matrix) {
                let n = solved.len();
                let mut gm = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        gm[i * n + j] = -g[0] * solved[i] * solved[j];
                    }
                }
                accumulate(grads, *matrix, gm);
            }
        }
        Op::TotalVariation { input, delta } => {
            let sh = nodes[*input].value.shape();
            let (h, w) = (sh[0], sh[1]);
            let x = val(*input);
            let mut gx = vec![0.0; x.len()];
            for p in 0..h {
                for q in 0..w {
                    let i = p * w + q;
                    let dh = if q + 1 < w { x[i + 1] - x[i] } else { 0.0 };
                    let dv = if p + 1 < h { x[i + w] - x[i] } else { 0.0 };
                    let t = (dh * dh + dv * dv + delta * delta).sqrt();
                    let (a, b) = (g[0] * dh / t, g[0] * dv / t);
                    if q + 1 < w {
                        gx[i + 1] += a;
                        gx[i] -= a;
                    }
                    if p + 1 < h {
                        gx[i + w] += b;
                        gx[i] -= b;
                    }
                }
            }
            accumulate(grads, *input, gx);
        }
    }
    Ok(())
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn chw(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        _ => unreachable!("validated on construction"),
    }
}

/// Bilinear ×2 upsampling of `n` samples, half-pixel centres, clamped edges.
fn upsample_line(src: impl Fn(usize) -> f64, n: usize, mut dst: impl FnMut(usize, f64)) {
    for j in 0..n {
        let prev = src(j.saturating_sub(1));
        let cur = src(j);
        let next = src((j + 1).min(n - 1));
        dst(2 * j, 0.75 * cur + 0.25 * prev);
        dst(2 * j + 1, 0.75 * cur + 0.25 * next);
    }
}

fn upsample_line_adjoint(g: impl Fn(usize) -> f64, n: usize, mut acc: impl FnMut(usize, f64)) {
    for j in 0..n {
        let (even, odd) = (g(2 * j), g(2 * j + 1));
        acc(j, 0.75 * (even + odd));
        acc(j.saturating_sub(1), 0.25 * even);
        acc((j + 1).min(n - 1), 0.25 * odd);
    }
}

fn upsample2x(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut rows = vec![0.0; c * h * w2];
    for ch in 0..c {
        for r in 0..h {
            let base = (ch * h + r) * w;
            let out = (ch * h + r) * w2;
            upsample_line(|j| x[base + j], w, |k, v| rows[out + k] = v);
        }
    }
    let mut out = vec![0.0; c * h2 * w2];
    for ch in 0..c {
        for col in 0..w2 {
            upsample_line(
                |j| rows[(ch * h + j) * w2 + col],
                h,
                |k, v| out[(ch * h2 + k) * w2 + col] = v,
            );
        }
    }
    out
}

fn upsample2x_adjoint(g: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut rows = vec![0.0; c * h * w2];
    for ch in 0..c {
        for col in 0..w2 {
            upsample_line_adjoint(
                |k| g[(ch * h2 + k) * w2 + col],
                h,
                |j, v| rows[(ch * h + j) * w2 + col] += v,
            );
        }
    }
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for r in 0..h {
            let base = (ch * h + r) * w;
            let src = (ch * h + r) * w2;
            upsample_line_adjoint(|k| rows[src + k], w, |j, v| gx[base + j] += v);
        }
    }
    gx
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn symmetrized(data: &[f64], n: usize) -> Vec<f64> {
    let mut s = data.to_vec();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (data[i * n + j] + data[j * n + i]);
            s[i * n + j] = v;
            s[j * n + i] = v;
        }
    }
    s
}

// Fallible ops cannot implement the std operator traits.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn node_id(self) -> NodeId {
        NodeId(self.id)
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    /// Copy of the current value.
    pub fn value(self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Value of a single-entry variable.
    pub fn item(self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.data()[0]
    }

    pub fn requires_grad(self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn with<R>(self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn backward(self) -> Result<Gradients> {
        self.tape.backward(self)
    }

    pub fn unary(self, kind: Unary) -> Result<Var<'t>> {
        let (shape, data) = self.with(|x| -> Result<_> {
            let xs = x.data();
            let data: Vec<f64> = match kind {
                Unary::Neg => xs.iter().map(|v| -v).collect(),
                Unary::Exp => xs.iter().map(|v| v.exp()).collect(),
                Unary::Log => {
                    if let Some(&bad) = xs.iter().find(|&&v| v < 0.0) {
                        return Err(Error::Domain {
                            op: "log",
                            value: bad,
                        });
                    }
                    xs.iter().map(|v| v.ln()).collect()
                }
                Unary::Relu => xs.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
                Unary::Sigmoid => xs.iter().map(|&v| stable_sigmoid(v)).collect(),
                Unary::Square => xs.iter().map(|v| v * v).collect(),
                Unary::Sqrt => {
                    if let Some(&bad) = xs.iter().find(|&&v| v < 0.0) {
                        return Err(Error::Domain {
                            op: "sqrt",
                            value: bad,
                        });
                    }
                    xs.iter().map(|v| v.sqrt()).collect()
                }
                Unary::Abs => xs.iter().map(|v| v.abs()).collect(),
            };
            Ok((x.shape().to_vec(), data))
        })?;
        self.tape.push(
            &format!("{kind:?}").to_lowercase(),
            shape,
            data,
            Op::Unary(kind, self.id),
            &[self.id],
        )
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary(Unary::Neg)
    }
    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(Unary::Exp)
    }
    pub fn log(self) -> Result<Var<'t>> {
        self.unary(Unary::Log)
    }
    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(Unary::Relu)
    }
    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(Unary::Sigmoid)
    }
    pub fn square(self) -> Result<Var<'t>> {
        self.unary(Unary::Square)
    }
    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(Unary::Sqrt)
    }
    pub fn abs(self) -> Result<Var<'t>> {
        self.unary(Unary::Abs)
    }

    /// `scale · x + shift` with constant coefficients.
    pub fn affine(self, scale: f64, shift: f64) -> Result<Var<'t>> {
        let (shape, data) = self.with(|x| {
            (
                x.shape().to_vec(),
                x.data().iter().map(|v| scale * v + shift).collect(),
            )
        });
        self.tape.push(
            "affine",
            shape,
            data,
            Op::Affine {
                input: self.id,
                scale,
            },
            &[self.id],
        )
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        self.affine(s, 0.0)
    }

    pub fn shift(self, c: f64) -> Result<Var<'t>> {
        self.affine(1.0, c)
    }

    fn binary(self, kind: Binary, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.check_owner(other);
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
        let shape = if a.shape() == b.shape() || b.numel() == 1 {
            a.shape().to_vec()
        } else if a.numel() == 1 {
            b.shape().to_vec()
        } else {
            return Err(Error::ShapeMismatch {
                op: "elementwise",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        };
        let (av, bv) = (a.data(), b.data());
        let n = shape.iter().product::<usize>();
        let a_at = |i: usize| if av.len() == 1 { av[0] } else { av[i] };
        let b_at = |i: usize| if bv.len() == 1 { bv[0] } else { bv[i] };
        if kind == Binary::Div {
            if let Some(i) = (0..bv.len()).find(|&i| bv[i] == 0.0) {
                return Err(Error::Domain {
                    op: "div",
                    value: bv[i],
                });
            }
        }
        let data: Vec<f64> = (0..n)
            .map(|i| match kind {
                Binary::Add => a_at(i) + b_at(i),
                Binary::Sub => a_at(i) - b_at(i),
                Binary::Mul => a_at(i) * b_at(i),
                Binary::Div => a_at(i) / b_at(i),
            })
            .collect();
        drop(nodes);
        self.tape.push(
            &format!("{kind:?}").to_lowercase(),
            shape,
            data,
            Op::Binary(kind, self.id, other.id),
            &[self.id, other.id],
        )
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Add, other)
    }
    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Sub, other)
    }
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Mul, other)
    }
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Binary::Div, other)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.check_owner(other);
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
        let (m, k, k2, n) = match (a.shape(), b.shape()) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                })
            }
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut c, false);
        drop(nodes);
        self.tape.push(
            "matmul",
            vec![m, n],
            c,
            Op::MatMul(self.id, other.id),
            &[self.id, other.id],
        )
    }

    /// `A · self` for a constant rank-2 `A` shared between tapes.
    /// `self` may be a matrix or a vector.
    pub fn const_matmul(self, a: &Arc<Tensor>) -> Result<Var<'t>> {
        let (shape, data) = self.with(|x| {
            let (m, k) = match a.shape() {
                [m, k] => (*m, *k),
                s => {
                    return Err(Error::InvalidShape {
                        shape: s.to_vec(),
                        reason: "constant operand must be rank 2".into(),
                    })
                }
            };
            let (rows, n, shape) = match x.shape() {
                [r] => (*r, 1, vec![m]),
                [r, n] => (*r, *n, vec![m, *n]),
                s => (s.iter().product(), 0, s.to_vec()),
            };
            if rows != k || n == 0 {
                return Err(Error::ShapeMismatch {
                    op: "const_matmul",
                    lhs: a.shape().to_vec(),
                    rhs: x.shape().to_vec(),
                });
            }
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, x.data(), false, &mut c, false);
            Ok((shape, c))
        })?;
        self.tape.push(
            "const_matmul",
            shape,
            data,
            Op::ConstMatMul(Arc::clone(a), self.id),
            &[self.id],
        )
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let (shape, data) = self.with(|x| match x.shape() {
            [r, c] => Ok((vec![*c, *r], transpose(x.data(), *r, *c))),
            s => Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "transpose needs rank 2".into(),
            }),
        })?;
        self.tape
            .push("transpose", shape, data, Op::Transpose(self.id), &[self.id])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        check_shape(&shape)?;
        let data = self.with(|x| {
            if shape.iter().product::<usize>() != x.numel() {
                Err(Error::ShapeMismatch {
                    op: "reshape",
                    lhs: x.shape().to_vec(),
                    rhs: shape.clone(),
                })
            } else {
                Ok(x.data().to_vec())
            }
        })?;
        self.tape
            .push("reshape", shape, data, Op::Reshape(self.id), &[self.id])
    }

    /// Reduces over `axes`, dropping them from the shape.
    pub fn reduce(self, kind: Reduce, axes: &[usize]) -> Result<Var<'t>> {
        let (out_shape, data, map, aux) = self.with(|x| -> Result<_> {
            let shape = x.shape();
            let mut reduced = vec![false; shape.len()];
            for &ax in axes {
                if ax >= shape.len() || reduced[ax] {
                    return Err(Error::InvalidShape {
                        shape: shape.to_vec(),
                        reason: format!("invalid reduction axes {axes:?}"),
                    });
                }
                reduced[ax] = true;
            }
            if axes.is_empty() {
                return Err(Error::InvalidShape {
                    shape: shape.to_vec(),
                    reason: "empty reduction".into(),
                });
            }
            let out_shape: Vec<usize> = shape
                .iter()
                .zip(&reduced)
                .filter(|(_, r)| !**r)
                .map(|(d, _)| *d)
                .collect();
            let n_out: usize = out_shape.iter().product();
            // Output stride contributed by each input axis (0 for reduced axes).
            let mut out_stride = vec![0usize; shape.len()];
            let mut s = 1;
            for ax in (0..shape.len()).rev() {
                if !reduced[ax] {
                    out_stride[ax] = s;
                    s *= shape[ax];
                }
            }
            let mut map = Vec::with_capacity(x.numel());
            let mut idx = vec![0usize; shape.len()];
            for _ in 0..x.numel() {
                map.push(idx.iter().zip(&out_stride).map(|(i, s)| i * s).sum());
                for ax in (0..shape.len()).rev() {
                    idx[ax] += 1;
                    if idx[ax] < shape[ax] {
                        break;
                    }
                    idx[ax] = 0;
                }
            }
            let xs = x.data();
            let (data, aux) = match kind {
                Reduce::Sum | Reduce::Mean => {
                    let mut acc = vec![0.0; n_out];
                    let mut count = vec![0usize; n_out];
                    for (v, &o) in xs.iter().zip(&map) {
                        acc[o] += v;
                        count[o] += 1;
                    }
                    if kind == Reduce::Mean {
                        for (a, c) in acc.iter_mut().zip(&count) {
                            *a /= *c as f64;
                        }
                    }
                    (acc, count)
                }
                Reduce::Max => {
                    let mut best = vec![f64::NEG_INFINITY; n_out];
                    let mut arg = vec![0usize; n_out];
                    for (i, (v, &o)) in xs.iter().zip(&map).enumerate() {
                        if *v > best[o] {
                            best[o] = *v;
                            arg[o] = i;
                        }
                    }
                    (best, arg)
                }
            };
            Ok((out_shape, data, map, aux))
        })?;
        self.tape.push(
            "reduce",
            out_shape,
            data,
            Op::Reduce {
                kind,
                input: self.id,
                map,
                aux,
            },
            &[self.id],
        )
    }

    fn all_axes(self) -> Vec<usize> {
        (0..self.shape().len()).collect()
    }

    pub fn sum(self) -> Result<Var<'t>> {
        if self.shape().is_empty() {
            return Ok(self);
        }
        self.reduce(Reduce::Sum, &self.all_axes())
    }

    pub fn mean(self) -> Result<Var<'t>> {
        if self.shape().is_empty() {
            return Ok(self);
        }
        self.reduce(Reduce::Mean, &self.all_axes())
    }

    pub fn max(self) -> Result<Var<'t>> {
        if self.shape().is_empty() {
            return Ok(self);
        }
        self.reduce(Reduce::Max, &self.all_axes())
    }

    /// Bilinear ×2 upsampling of a `[C, H, W]` (or `[H, W]`) tensor,
    /// half-pixel convention with clamped borders.
    pub fn upsample2x(self) -> Result<Var<'t>> {
        let (shape, data) = self.with(|x| {
            let sh = x.shape();
            let (c, h, w) = match sh {
                [_, _] | [_, _, _] => chw(sh),
                _ => {
                    return Err(Error::InvalidShape {
                        shape: sh.to_vec(),
                        reason: "upsample needs rank 2 or 3".into(),
                    })
                }
            };
            let mut out_shape = sh.to_vec();
            let r = out_shape.len();
            out_shape[r - 2] *= 2;
            out_shape[r - 1] *= 2;
            Ok((out_shape, upsample2x(x.data(), c, h, w)))
        })?;
        self.tape
            .push("upsample2x", shape, data, Op::Upsample2x(self.id), &[self.id])
    }

    /// Normalizes each leading-axis channel to zero mean and unit variance
    /// over the remaining axes: `(x - m) / sqrt(v + eps)`.
    pub fn channel_norm(self, eps: f64) -> Result<Var<'t>> {
        let (shape, normalized, inv_std) = self.with(|x| {
            let sh = x.shape();
            let c = sh.first().copied().unwrap_or(1);
            let p = x.numel() / c;
            let mut out = vec![0.0; x.numel()];
            let mut inv_std = vec![0.0; c];
            for ch in 0..c {
                let row = &x.data()[ch * p..(ch + 1) * p];
                let m = row.iter().sum::<f64>() / p as f64;
                let v = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / p as f64;
                let inv = 1.0 / (v + eps).sqrt();
                inv_std[ch] = inv;
                for (o, v) in out[ch * p..(ch + 1) * p].iter_mut().zip(row) {
                    *o = (v - m) * inv;
                }
            }
            (sh.to_vec(), out, inv_std)
        });
        self.tape.push(
            "channel_norm",
            shape,
            normalized.clone(),
            Op::ChannelNorm {
                input: self.id,
                normalized,
                inv_std,
            },
            &[self.id],
        )
    }

    /// `y[c, ..] = x[c, ..] * scale[c] + bias[c]`.
    pub fn row_affine(self, scale: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.tape.check_owner(scale);
        self.tape.check_owner(bias);
        let nodes = self.tape.nodes.borrow();
        let (x, s, b) = (
            &nodes[self.id].value,
            &nodes[scale.id].value,
            &nodes[bias.id].value,
        );
        let c = x.shape().first().copied().unwrap_or(1);
        if s.shape() != [c] || b.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "row_affine",
                lhs: x.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let p = x.numel() / c;
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * s.data()[i / p] + b.data()[i / p])
            .collect();
        let shape = x.shape().to_vec();
        drop(nodes);
        self.tape.push(
            "row_affine",
            shape,
            data,
            Op::RowAffine {
                input: self.id,
                scale: scale.id,
                bias: bias.id,
            },
            &[self.id, scale.id, bias.id],
        )
    }

    /// `log det S` for `S = (A + Aᵀ)/2`, which must be positive definite.
    pub fn logdet_spd(self) -> Result<Var<'t>> {
        let (value, inverse) = self.with(|a| -> Result<_> {
            let n = square_dim(a, "logdet_spd")?;
            let s = symmetrized(a.data(), n);
            let l = cholesky(&s, n)?;
            Ok((cholesky_logdet(&l, n), cholesky_inverse(&l, n)))
        })?;
        self.tape.push(
            "logdet_spd",
            Vec::new(),
            vec![value],
            Op::LogDetSpd {
                input: self.id,
                inverse,
            },
            &[self.id],
        )
    }

    /// `dᵀ S⁻¹ d` for `S = (A + Aᵀ)/2` positive definite; `self` is `A`.
    pub fn quad_form_inv(self, d: Var<'t>) -> Result<Var<'t>> {
        self.tape.check_owner(d);
        let nodes = self.tape.nodes.borrow();
        let (a, dv) = (&nodes[self.id].value, &nodes[d.id].value);
        let n = square_dim(a, "quad_form_inv")?;
        if dv.numel() != n {
            return Err(Error::ShapeMismatch {
                op: "quad_form_inv",
                lhs: a.shape().to_vec(),
                rhs: dv.shape().to_vec(),
            });
        }
        let l = cholesky(&symmetrized(a.data(), n), n)?;
        let solved = cholesky_solve(&l, n, dv.data());
        let value: f64 = solved.iter().zip(dv.data()).map(|(s, d)| s * d).sum();
        drop(nodes);
        self.tape.push(
            "quad_form_inv",
            Vec::new(),
            vec![value],
            Op::QuadFormInv {
                matrix: self.id,
                vector: d.id,
                solved,
            },
            &[self.id, d.id],
        )
    }

    /// Smoothed isotropic total variation of an `[H, W]` image:
    /// `Σ sqrt(dh² + dv² + δ²)` with forward differences and replicated borders.
    pub fn total_variation(self, delta: f64) -> Result<Var<'t>> {
        let value = self.with(|x| match x.shape() {
            [h, w] => Ok(total_variation(x.data(), *h, *w, delta)),
            s => Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: "total variation needs an [H, W] image".into(),
            }),
        })?;
        self.tape.push(
            "total_variation",
            Vec::new(),
            vec![value],
            Op::TotalVariation {
                input: self.id,
                delta,
            },
            &[self.id],
        )
    }
}

pub(crate) fn total_variation(x: &[f64], h: usize, w: usize, delta: f64) -> f64 {
    let mut tv = 0.0;
    for p in 0..h {
        for q in 0..w {
            let i = p * w + q;
            let dh = if q + 1 < w { x[i + 1] - x[i] } else { 0.0 };
            let dv = if p + 1 < h { x[i + w] - x[i] } else { 0.0 };
            tv += (dh * dh + dv * dv + delta * delta).sqrt();
        }
    }
    tv
}

fn square_dim(a: &Tensor, op: &'static str) -> Result<usize> {
    match a.shape() {
        [n, m] if n == m => Ok(*n),
        s => Err(Error::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: s.to_vec(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 0.0, 2.0]);
        let z = tape.leaf(t(&[1], &[0.0]));
        assert_eq!(z.sigmoid().unwrap().item(), 0.5);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[-800.0, 800.0]));
        let y = x.sigmoid().unwrap().value();
        assert_eq!(y.data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let g = x.relu().unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn checked_failures() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, -1.0]));
        let b = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(a.add(b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(a.log(), Err(Error::Domain { .. })));
        assert!(matches!(a.sqrt(), Err(Error::Domain { .. })));
        let zero = tape.leaf(t(&[2], &[1.0, 0.0]));
        assert!(matches!(a.div(zero), Err(Error::Domain { .. })));
        let big = tape.leaf(t(&[1], &[1000.0]));
        assert!(matches!(big.exp(), Err(Error::NonFinite { .. })));
        assert!(matches!(
            a.backward(),
            Err(Error::NonScalarRoot(_))
        ));
    }

    #[test]
    fn scalar_broadcast_sums_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let s = tape.leaf(Tensor::scalar(2.0));
        let y = a.mul(s).unwrap();
        assert_eq!(y.value().data(), &[2.0, 4.0, 6.0]);
        let g = y.sum().unwrap().backward().unwrap();
        assert_eq!(g.wrt(s).data(), &[6.0]);
        assert_eq!(g.wrt(a).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn matmul_hand_arithmetic_and_identity() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(t(&[2, 1], &[1.0, 1.0]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[3.0, 7.0]);
        let i3 = tape.constant(Tensor::eye(3));
        let v = tape.leaf(t(&[3, 1], &[0.5, -2.0, 7.0]));
        assert_eq!(i3.matmul(v).unwrap().value().data(), v.value().data());
        let bad = tape.leaf(t(&[3, 1], &[0.0; 3]));
        assert!(a.matmul(bad).is_err());
    }

    #[test]
    fn reductions() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        assert_eq!(x.sum().unwrap().item(), 6.0);
        let m = tape.leaf(t(&[2, 2], &[1.0, 3.0, 3.0, 5.0]));
        let r = m.reduce(Reduce::Mean, &[0]).unwrap();
        assert_eq!(r.value().data(), &[2.0, 4.0]);
        assert_eq!(r.shape(), vec![2]);
        let mx = m.reduce(Reduce::Max, &[1]).unwrap();
        assert_eq!(mx.value().data(), &[3.0, 5.0]);
        assert!(m.reduce(Reduce::Sum, &[]).is_err());
        assert!(m.reduce(Reduce::Sum, &[2]).is_err());
        let g = mx.sum().unwrap().backward().unwrap();
        assert_eq!(g.wrt(m).data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_is_ones_and_constants_get_nothing() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, -3.0, 0.5, 2.0]));
        let g = x.sum().unwrap().backward().unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0; 4]);

        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(4.0));
        let g = c.backward().unwrap();
        assert!(g.is_empty());
        assert_eq!(g.wrt(c).data(), &[0.0]);
    }

    #[test]
    fn untouched_leaves_get_zero() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let unused = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let g = x.square().unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn root_gradient_is_one() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let g = x.backward().unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0]);
    }

    #[test]
    fn upsample_matches_half_pixel_bilinear() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[0.0, 4.0]));
        let y = x.upsample2x().unwrap().value();
        assert_eq!(y.shape(), &[2, 4]);
        assert_eq!(&y.data()[..4], &[0.0, 1.0, 3.0, 4.0]);
        assert_eq!(&y.data()[..4], &y.data()[4..]);
    }

    #[test]
    fn channel_norm_statistics() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]));
        let y = x.channel_norm(1e-6).unwrap().value();
        for row in y.data().chunks(4) {
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
        }
    }

    #[test]
    fn total_variation_of_constant_is_delta_floor() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![3, 4], 0.7));
        let tv = x.total_variation(1e-6).unwrap().item();
        assert!((tv - 12.0 * 1e-6).abs() < 1e-15);
    }
}
