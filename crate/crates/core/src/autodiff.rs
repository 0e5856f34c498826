//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s together with
//! the forward value. [`Graph::backward`] walks the record in reverse creation
//! order, which is a valid topological order because a node can only refer to
//! nodes created before it.
//!
//! Broadcasting is limited to scalar-with-tensor in the binary elementwise
//! operations; row-wise bias addition and token mixing are explicit operations.
//!
//! ```
//! use blockskip_core::autodiff::Graph;
//! use blockskip_core::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![1.0, -2.0]));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0]);
//! ```

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine { x: usize, scale: f32 },
    Relu(usize),
    Silu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Log(usize),
    Clamp { x: usize, lo: f32, hi: f32 },
    Matmul(usize, usize),
    AddBias(usize, usize),
    LayerNorm { x: usize, rstd: Vec<f32> },
    TokenMix { x: usize, w: usize, tokens: usize },
    Sum(usize),
    Mean(usize),
    L2Norm(usize),
    Index { x: usize, i: usize },
    StraightThrough(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    trainable: bool,
}

/// A single define-by-run computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the trainable leaves.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient of a trainable leaf; `None` when the leaf does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Which binary operand, if any, is a broadcast scalar.
#[derive(Clone, Copy)]
enum Broadcast {
    None,
    Lhs,
    Rhs,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A trainable leaf: [`Graph::backward`] reports its gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Same value as `a`, cut from the graph.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.clone();
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: trainable,
            trainable,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[usize]) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn broadcast(&self, a: Var, b: Var, op: &'static str) -> Result<Broadcast> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() == vb.shape() {
            Ok(Broadcast::None)
        } else if va.is_scalar() {
            Ok(Broadcast::Lhs)
        } else if vb.is_scalar() {
            Ok(Broadcast::Rhs)
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            })
        }
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let mode = self.broadcast(a, b, op)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        Ok(match mode {
            Broadcast::None => va.zip_map(vb, op, f)?,
            Broadcast::Lhs => {
                let s = va.data()[0];
                vb.map(|y| f(s, y))
            }
            Broadcast::Rhs => {
                let s = vb.data()[0];
                va.map(|x| f(x, s))
            }
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    /// `scale * a + shift` with constant coefficients.
    pub fn affine(&mut self, a: Var, scale: f32, shift: f32) -> Var {
        let v = self.nodes[a.0].value.map(|x| scale * x + shift);
        self.push(v, Op::Affine { x: a.0, scale }, &[a.0])
    }

    pub fn scale(&mut self, a: Var, scale: f32) -> Var {
        self.affine(a, scale, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| x.max(0.0));
        self.push(v, Op::Relu(a.0), &[a.0])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a.0), &[a.0])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(f32::tanh);
        self.push(v, Op::Tanh(a.0), &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(sigmoid);
        self.push(v, Op::Sigmoid(a.0), &[a.0])
    }

    /// Natural logarithm. Non-positive inputs give `-inf`/NaN; clamp first.
    pub fn log(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(f32::ln);
        self.push(v, Op::Log(a.0), &[a.0])
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        let v = self.nodes[a.0].value.map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp { x: a.0, lo, hi }, &[a.0])
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let (m, k) = va.dims2("matmul")?;
        let (k2, n) = vb.dims2("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0f32; m * n];
        gemm(m, k, n, va.data(), (k, 1), vb.data(), (n, 1), &mut out, 0.0);
        let v = Tensor::matrix(m, n, out)?;
        Ok(self.push(v, Op::Matmul(a.0, b.0), &[a.0, b.0]))
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let vb = &self.nodes[bias.0].value;
        let (m, n) = vx.dims2("add_bias")?;
        if vb.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: vx.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut out = vx.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let v = Tensor::matrix(m, n, out)?;
        Ok(self.push(v, Op::AddBias(x.0, bias.0), &[x.0, bias.0]))
    }

    /// Row-wise normalisation to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f32) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let (m, n) = vx.dims2("layer_norm")?;
        if n == 0 {
            return Err(Error::EmptyTensor { op: "layer_norm" });
        }
        let mut out = vec![0.0f32; m * n];
        let mut rstd = Vec::with_capacity(m);
        for (row, dst) in vx.data().chunks(n).zip(out.chunks_mut(n)) {
            let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let d = f64::from(v) - mean;
                    d * d
                })
                .sum::<f64>()
                / n as f64;
            let r = 1.0 / (var + f64::from(eps)).sqrt();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = ((f64::from(v) - mean) * r) as f32;
            }
            rstd.push(r as f32);
        }
        let v = Tensor::matrix(m, n, out)?;
        Ok(self.push(v, Op::LayerNorm { x: x.0, rstd }, &[x.0]))
    }

    /// Mixes the rows within each group of `tokens` consecutive rows:
    /// for every sample `i`, `out_i = W · x_i` with `W` of shape `[tokens, tokens]`.
    pub fn token_mix(&mut self, x: Var, w: Var, tokens: usize) -> Result<Var> {
        let vx = &self.nodes[x.0].value;
        let vw = &self.nodes[w.0].value;
        let (rows, d) = vx.dims2("token_mix")?;
        if vw.shape() != [tokens, tokens] || tokens == 0 || rows % tokens != 0 {
            return Err(Error::ShapeMismatch {
                op: "token_mix",
                lhs: vx.shape().to_vec(),
                rhs: vw.shape().to_vec(),
            });
        }
        let mut out = vec![0.0f32; rows * d];
        let block = tokens * d;
        for (src, dst) in vx.data().chunks(block).zip(out.chunks_mut(block)) {
            gemm(tokens, tokens, d, vw.data(), (tokens, 1), src, (d, 1), dst, 0.0);
        }
        let v = Tensor::matrix(rows, d, out)?;
        Ok(self.push(v, Op::TokenMix { x: x.0, w: w.0, tokens }, &[x.0, w.0]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if va.is_empty() {
            return Err(Error::EmptyTensor { op: "sum" });
        }
        let s = va.data().iter().map(|&v| f64::from(v)).sum::<f64>();
        Ok(self.push(Tensor::scalar(s as f32), Op::Sum(a.0), &[a.0]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if va.is_empty() {
            return Err(Error::EmptyTensor { op: "mean" });
        }
        let s = va.data().iter().map(|&v| f64::from(v)).sum::<f64>() / va.len() as f64;
        Ok(self.push(Tensor::scalar(s as f32), Op::Mean(a.0), &[a.0]))
    }

    /// Euclidean norm over all elements. The gradient at the origin is taken as zero.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        if va.is_empty() {
            return Err(Error::EmptyTensor { op: "l2_norm" });
        }
        let n = va.norm();
        Ok(self.push(Tensor::scalar(n as f32), Op::L2Norm(a.0), &[a.0]))
    }

    /// Element `i` of the flattened tensor, as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let va = &self.nodes[a.0].value;
        let Some(&v) = va.data().get(i) else {
            return Err(Error::invalid(format!("index {i} out of range for shape {:?}", va.shape())));
        };
        Ok(self.push(Tensor::scalar(v), Op::Index { x: a.0, i }, &[a.0]))
    }

    /// Takes the value `value` in the forward pass while the gradient flows to
    /// `a` unchanged, as if the op were the identity.
    pub fn straight_through(&mut self, a: Var, value: Tensor) -> Result<Var> {
        self.nodes[a.0].value.check_same_shape(&value, "straight_through")?;
        Ok(self.push(value, Op::StraightThrough(a.0), &[a.0]))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NotScalar {
                op: "backward",
                shape: root.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));
        let mut out = Gradients::default();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if node.trainable {
                out.grads.insert(id, g);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(out)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |id: usize| &self.nodes[id].value;
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.accumulate_binary(grads, a, b, g, |gv, _, _| gv, |gv, _, _| gv);
            }
            &Op::Sub(a, b) => {
                self.accumulate_binary(grads, a, b, g, |gv, _, _| gv, |gv, _, _| -gv);
            }
            &Op::Mul(a, b) => {
                self.accumulate_binary(grads, a, b, g, |gv, _, y| gv * y, |gv, x, _| gv * x);
            }
            &Op::Affine { x, scale } => {
                accumulate(grads, x, g.map(|v| v * scale));
            }
            &Op::Relu(x) => {
                let d = g.zip_map(val(x), "relu_backward", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                accumulate(grads, x, d);
            }
            &Op::Silu(x) => {
                let d = g.zip_map(val(x), "silu_backward", |gv, xv| {
                    let s = sigmoid(xv);
                    gv * s * (1.0 + xv * (1.0 - s))
                })?;
                accumulate(grads, x, d);
            }
            &Op::Tanh(x) => {
                let d = g.zip_map(&node.value, "tanh_backward", |gv, y| gv * (1.0 - y * y))?;
                accumulate(grads, x, d);
            }
            &Op::Sigmoid(x) => {
                let d = g.zip_map(&node.value, "sigmoid_backward", |gv, y| gv * y * (1.0 - y))?;
                accumulate(grads, x, d);
            }
            &Op::Log(x) => {
                let d = g.zip_map(val(x), "log_backward", |gv, xv| gv / xv)?;
                accumulate(grads, x, d);
            }
            &Op::Clamp { x, lo, hi } => {
                let d = g.zip_map(val(x), "clamp_backward", |gv, xv| {
                    if xv >= lo && xv <= hi {
                        gv
                    } else {
                        0.0
                    }
                })?;
                accumulate(grads, x, d);
            }
            &Op::Matmul(a, b) => {
                let (m, k) = val(a).dims2("matmul")?;
                let (_, n) = val(b).dims2("matmul")?;
                if self.needs(a) {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0f32; m * k];
                    gemm(m, n, k, g.data(), (n, 1), val(b).data(), (1, n), &mut da, 0.0);
                    accumulate(grads, a, Tensor::matrix(m, k, da)?);
                }
                if self.needs(b) {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0f32; k * n];
                    gemm(k, m, n, val(a).data(), (1, k), g.data(), (n, 1), &mut db, 0.0);
                    accumulate(grads, b, Tensor::matrix(k, n, db)?);
                }
            }
            &Op::AddBias(x, bias) => {
                if self.needs(x) {
                    accumulate(grads, x, g.clone());
                }
                if self.needs(bias) {
                    let n = val(bias).len();
                    let mut db = vec![0.0f64; n];
                    for row in g.data().chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += f64::from(v);
                        }
                    }
                    accumulate(grads, bias, Tensor::vector(db.into_iter().map(|v| v as f32).collect()));
                }
            }
            Op::LayerNorm { x, rstd } => {
                let (_, n) = node.value.dims2("layer_norm")?;
                let mut dx = vec![0.0f32; node.value.len()];
                for (((y, gy), dst), &r) in node
                    .value
                    .data()
                    .chunks(n)
                    .zip(g.data().chunks(n))
                    .zip(dx.chunks_mut(n))
                    .zip(rstd)
                {
                    let mean_g = gy.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
                    let mean_gy = gy
                        .iter()
                        .zip(y)
                        .map(|(&a, &b)| f64::from(a) * f64::from(b))
                        .sum::<f64>()
                        / n as f64;
                    for ((d, &gv), &yv) in dst.iter_mut().zip(gy).zip(y) {
                        *d = (f64::from(r) * (f64::from(gv) - mean_g - f64::from(yv) * mean_gy)) as f32;
                    }
                }
                accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), dx)?);
            }
            &Op::TokenMix { x, w, tokens } => {
                let (rows, d) = val(x).dims2("token_mix")?;
                let block = tokens * d;
                if self.needs(x) {
                    let mut dx = vec![0.0f32; rows * d];
                    for (gb, dst) in g.data().chunks(block).zip(dx.chunks_mut(block)) {
                        // dX_i = Wᵀ · G_i
                        gemm(tokens, tokens, d, val(w).data(), (1, tokens), gb, (d, 1), dst, 0.0);
                    }
                    accumulate(grads, x, Tensor::matrix(rows, d, dx)?);
                }
                if self.needs(w) {
                    let mut dw = vec![0.0f32; tokens * tokens];
                    for (gb, xb) in g.data().chunks(block).zip(val(x).data().chunks(block)) {
                        // dW += G_i · X_iᵀ
                        gemm(tokens, d, tokens, gb, (d, 1), xb, (1, d), &mut dw, 1.0);
                    }
                    accumulate(grads, w, Tensor::matrix(tokens, tokens, dw)?);
                }
            }
            &Op::Sum(x) => {
                let gv = g.data()[0];
                accumulate(grads, x, Tensor::full(val(x).shape(), gv));
            }
            &Op::Mean(x) => {
                let n = val(x).len() as f32;
                let gv = g.data()[0] / n;
                accumulate(grads, x, Tensor::full(val(x).shape(), gv));
            }
            &Op::L2Norm(x) => {
                let norm = node.value.data()[0];
                let gv = g.data()[0];
                let d = if norm > 0.0 {
                    val(x).map(|v| gv * v / norm)
                } else {
                    Tensor::zeros(val(x).shape())
                };
                accumulate(grads, x, d);
            }
            &Op::Index { x, i } => {
                let mut d = Tensor::zeros(val(x).shape());
                d.data_mut()[i] = g.data()[0];
                accumulate(grads, x, d);
            }
            &Op::StraightThrough(x) => accumulate(grads, x, g.clone()),
        }
        Ok(())
    }

    /// Routes the gradient of a broadcasting binary op to its operands.
    /// `da(g, a, b)` and `db(g, a, b)` are the elementwise partials times `g`.
    fn accumulate_binary(
        &self,
        grads: &mut [Option<Tensor>],
        a: usize,
        b: usize,
        g: &Tensor,
        da: impl Fn(f32, f32, f32) -> f32,
        db: impl Fn(f32, f32, f32) -> f32,
    ) {
        let va = &self.nodes[a].value;
        let vb = &self.nodes[b].value;
        let n = g.len();
        let at = |t: &Tensor, i: usize| if t.is_scalar() && n != 1 { t.data()[0] } else { t.data()[i] };
        for (id, f, this) in [(a, &da as &dyn Fn(f32, f32, f32) -> f32, va), (b, &db, vb)] {
            if !self.needs(id) {
                continue;
            }
            let per: Vec<f32> = (0..n).map(|i| f(g.data()[i], at(va, i), at(vb, i))).collect();
            let d = if this.shape() == g.shape() {
                Tensor::new(g.shape().to_vec(), per).expect("gradient has the output shape")
            } else {
                let s = per.iter().map(|&v| f64::from(v)).sum::<f64>();
                Tensor::scalar(s as f32)
            };
            accumulate(grads, id, d);
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, d: Tensor) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(d.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c = a · b + beta · c` for an `m × k` by `k × n` product with explicit
/// (row, column) strides, so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
    beta: f32,
) {
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index sgemm touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
