//! Reverse-mode differentiation over a fixed operation set.
//!
//! Nodes are appended to a [`Graph`] in creation order, so every input id is
//! strictly smaller than its consumer and the reverse of creation order is a
//! valid topological order for the backward sweep.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, Tensor, NORM_EPS};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `x · wᵀ`
    Linear(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Gelu(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, Vec<f64>),
    Reshape(Var),
    Gather(Var, Arc<[usize]>),
    Concat(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Index(Var, usize),
    Cosine(Var, Var, f64, f64),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Operation tape.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.params
            .iter()
            .filter_map(|&(pid, node)| self.grads[node].as_deref().map(|g| (pid, g)))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[x.0].value.map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    /// Leaf holding a copy of `t`; gradients are reported for it when `requires_grad`.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf bound to a stored parameter. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let rg = t.requires_grad();
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        let v = self.push(value, Op::Leaf, rg);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `x[n×in] · w[out×in]ᵀ`
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, din) = self.value(x).dims2("linear")?;
        let (dout, din2) = self.value(w).dims2("linear")?;
        if din != din2 {
            return Err(Error::dim("linear", self.shape(x), self.shape(w)));
        }
        let mut out = vec![0.0; n * dout];
        tensor::matmul_nt_into(self.data(x), self.data(w), &mut out, n, din, dout);
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::from_parts(vec![n, dout], out), Op::Linear(x, w), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), name, f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.data(b).iter().any(|&v| v == 0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        self.binary(a, b, "div", Op::Div(a, b), |x, y| x / y)
    }

    fn row_broadcast(&mut self, x: Var, r: Var, name: &'static str) -> Result<(usize, usize)> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(r) != [d] || d == 0 {
            return Err(Error::dim(name, self.shape(x), self.shape(r)));
        }
        Ok((self.value(x).len() / d, d))
    }

    /// Adds a `[d]` row vector to every row of `x[..×d]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, d) = self.row_broadcast(x, b, "add_row")?;
        let bd = self.data(b);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % d])
            .collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(value, Op::AddRow(x, b), rg))
    }

    /// Multiplies every row of `x[..×d]` elementwise by a `[d]` vector.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let (_, d) = self.row_broadcast(x, g, "mul_row")?;
        let gd = self.data(g);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gd[i % d])
            .collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        let rg = self.rg(x) || self.rg(g);
        Ok(self.push(value, Op::MulRow(x, g), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    /// `s · x` where `s` is a single-element node.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("scale_by", self.shape(x), self.shape(s)));
        }
        let sv = self.scalar_value(s);
        let value = self.value(x).scale(sv);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(value, Op::ScaleBy(x, s), rg))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.data(x).iter().any(|&v| v <= 0.0) {
            return Err(Error::domain("ln", "non-positive input"));
        }
        Ok(self.unary(x, Op::Ln(x), f64::ln))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), |v| {
            0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh())
        })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).mean();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean over the rows of `x[n×d]`, giving `[d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.value(x).dims2("mean_rows")?;
        if n == 0 {
            return Err(Error::domain("mean_rows", "no rows"));
        }
        let mut out = vec![0.0; d];
        for row in self.data(x).chunks_exact(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(out), Op::MeanRows(x), rg))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::domain("softmax", "empty input"));
        }
        if !self.value(x).is_finite() {
            return Err(Error::domain("softmax", "non-finite logit"));
        }
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.data(x).chunks_exact(d) {
            out.extend(tensor::softmax_raw(row));
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        let rg = self.rg(x);
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    /// Normalises each row (last axis) to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::domain("layer_norm", "empty rows"));
        }
        let rows = self.value(x).len() / d;
        let mut out = Vec::with_capacity(rows * d);
        let mut inv_std = Vec::with_capacity(rows);
        for row in self.data(x).chunks_exact(d) {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            out.extend(row.iter().map(|v| (v - mu) * is));
            inv_std.push(is);
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        let rg = self.rg(x);
        Ok(self.push(value, Op::LayerNormRows(x, inv_std), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `out[i] = x[indices[i]]` over flat storage, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, indices: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != indices.len() {
            return Err(Error::dim("gather", shape, &[indices.len()]));
        }
        let src = self.data(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::contract("gather", format!("index {bad} out of range {}", src.len())));
        }
        let data = indices.iter().map(|&i| src[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Gather(x, indices), rg))
    }

    /// Concatenation along the first axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::contract("concat", "no inputs"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::dim("concat", self.shape(first), s));
            }
            lead += s[0];
            data.extend_from_slice(self.data(x));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(xs.to_vec()), rg))
    }

    /// Concatenation of 2-D tensors along columns.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::contract("concat_cols", "no inputs"))?;
        let (rows, _) = self.value(first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.value(x).dims2("concat_cols")?;
            if r != rows {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(x)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &c) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.data(x)[r * c..(r + 1) * c]);
            }
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor::from_parts(vec![rows, total], data), Op::ConcatCols(xs.to_vec()), rg))
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2("slice_cols")?;
        if start + len > cols || len == 0 {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![rows, len], data), Op::SliceCols(x, start), rg))
    }

    /// Element `i` of the flat storage as a `[1]` node.
    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let v = *self
            .data(x)
            .get(i)
            .ok_or_else(|| Error::contract("index", format!("index {i} out of range")))?;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(v), Op::Index(x, i), rg))
    }

    /// Cosine similarity of two vectors as a `[1]` node.
    ///
    /// If either norm is ≤ [`NORM_EPS`] the result is a constant 0 and no
    /// gradient flows through the pair.
    pub fn cosine_sim(&mut self, u: Var, v: Var) -> Result<Var> {
        let (ud, vd) = (self.data(u), self.data(v));
        if ud.len() != vd.len() {
            return Err(Error::dim("cosine_sim", self.shape(u), self.shape(v)));
        }
        let (uu, vv) = (tensor::dot(ud, ud), tensor::dot(vd, vd));
        let (nu, nv) = (uu.sqrt(), vv.sqrt());
        if nu <= NORM_EPS || nv <= NORM_EPS {
            return Ok(self.scalar(0.0));
        }
        let c = tensor::dot(ud, vd) / (uu * vv).sqrt();
        let rg = self.rg(u) || self.rg(v);
        Ok(self.push(Tensor::scalar(c), Op::Cosine(u, v, nu, nv), rg))
    }

    /// Backpropagates from a single-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        let params = self.nodes[..=loss.0]
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { grads, params })
    }

    /// Runs [`backward`](Self::backward) and adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        store.accumulate(&grads)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        // Gradient buffer for input `v`, or None when it needs no gradient.
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let n = self.nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = dims(&self.nodes[a.0].value);
                let n = self.nodes[b.0].value.shape()[1];
                if let Some(ga) = acc!(a) {
                    tensor::matmul_nt_into(g, self.data(b), ga, m, n, k);
                }
                if let Some(gb) = acc!(b) {
                    tensor::matmul_tn_into(self.data(a), g, gb, m, k, n);
                }
            }
            &Op::Linear(x, w) => {
                let (n, din) = dims(&self.nodes[x.0].value);
                let dout = self.nodes[w.0].value.shape()[0];
                if let Some(gx) = acc!(x) {
                    tensor::matmul_into(g, self.data(w), gx, n, dout, din);
                }
                if let Some(gw) = acc!(w) {
                    tensor::matmul_tn_into(g, self.data(x), gw, n, dout, din);
                }
            }
            &Op::Transpose(x) => {
                let (r, c) = dims(&self.nodes[x.0].value);
                if let Some(gx) = acc!(x) {
                    let t = tensor::transpose_raw(g, c, r);
                    add_into(gx, &t);
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = acc!(a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc!(b) {
                    add_into(gb, g);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = acc!(a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc!(b) {
                    gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v);
                }
            }
            &Op::Mul(a, b) => {
                if let Some(ga) = acc!(a) {
                    let bd = self.data(b);
                    for ((o, gv), bv) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gv * bv;
                    }
                }
                if let Some(gb) = acc!(b) {
                    let ad = self.data(a);
                    for ((o, gv), av) in gb.iter_mut().zip(g).zip(ad) {
                        *o += gv * av;
                    }
                }
            }
            &Op::Div(a, b) => {
                if let Some(ga) = acc!(a) {
                    let bd = self.data(b);
                    for ((o, gv), bv) in ga.iter_mut().zip(g).zip(bd) {
                        *o += gv / bv;
                    }
                }
                if let Some(gb) = acc!(b) {
                    let bd = self.data(b);
                    for (((o, gv), bv), yv) in gb.iter_mut().zip(g).zip(bd).zip(y) {
                        *o -= gv * yv / bv;
                    }
                }
            }
            &Op::AddRow(x, b) => {
                if let Some(gx) = acc!(x) {
                    add_into(gx, g);
                }
                if let Some(gb) = acc!(b) {
                    let d = gb.len();
                    for row in g.chunks_exact(d) {
                        add_into(gb, row);
                    }
                }
            }
            &Op::MulRow(x, r) => {
                let d = self.nodes[r.0].value.len();
                if let Some(gx) = acc!(x) {
                    let rd = self.data(r);
                    for (j, (o, gv)) in gx.iter_mut().zip(g).enumerate() {
                        *o += gv * rd[j % d];
                    }
                }
                if let Some(gr) = acc!(r) {
                    let xd = self.data(x);
                    for (j, (gv, xv)) in g.iter().zip(xd).enumerate() {
                        gr[j % d] += gv * xv;
                    }
                }
            }
            &Op::Scale(x, c) => {
                if let Some(gx) = acc!(x) {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += c * v);
                }
            }
            &Op::AddScalar(x) => {
                if let Some(gx) = acc!(x) {
                    add_into(gx, g);
                }
            }
            &Op::ScaleBy(x, s) => {
                if let Some(gx) = acc!(x) {
                    let sv = self.data(s)[0];
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += sv * v);
                }
                if let Some(gs) = acc!(s) {
                    gs[0] += tensor::dot(g, self.data(x));
                }
            }
            &Op::Exp(x) => {
                if let Some(gx) = acc!(x) {
                    for ((o, gv), yv) in gx.iter_mut().zip(g).zip(y) {
                        *o += gv * yv;
                    }
                }
            }
            &Op::Ln(x) => {
                if let Some(gx) = acc!(x) {
                    let xd = self.data(x);
                    for ((o, gv), xv) in gx.iter_mut().zip(g).zip(xd) {
                        *o += gv / xv;
                    }
                }
            }
            &Op::Sigmoid(x) => {
                if let Some(gx) = acc!(x) {
                    for ((o, gv), yv) in gx.iter_mut().zip(g).zip(y) {
                        *o += gv * yv * (1.0 - yv);
                    }
                }
            }
            &Op::Gelu(x) => {
                if let Some(gx) = acc!(x) {
                    let xd = self.data(x);
                    for ((o, gv), &v) in gx.iter_mut().zip(g).zip(xd) {
                        let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                        *o += gv * d;
                    }
                }
            }
            &Op::Square(x) => {
                if let Some(gx) = acc!(x) {
                    let xd = self.data(x);
                    for ((o, gv), xv) in gx.iter_mut().zip(g).zip(xd) {
                        *o += 2.0 * gv * xv;
                    }
                }
            }
            &Op::Clamp(x, lo, hi) => {
                if let Some(gx) = acc!(x) {
                    let xd = self.data(x);
                    for ((o, gv), &xv) in gx.iter_mut().zip(g).zip(xd) {
                        if xv > lo && xv < hi {
                            *o += gv;
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = acc!(x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            &Op::Mean(x) => {
                if let Some(gx) = acc!(x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|o| *o += s);
                }
            }
            &Op::MeanRows(x) => {
                if let Some(gx) = acc!(x) {
                    let d = g.len();
                    let n = gx.len() / d;
                    for row in gx.chunks_exact_mut(d) {
                        for (o, gv) in row.iter_mut().zip(g) {
                            *o += gv / n as f64;
                        }
                    }
                }
            }
            &Op::SoftmaxRows(x) => {
                if let Some(gx) = acc!(x) {
                    let d = *node.value.shape().last().unwrap();
                    for ((orow, grow), yrow) in gx.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(y.chunks_exact(d)) {
                        let s = tensor::dot(grow, yrow);
                        for ((o, gv), yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += yv * (gv - s);
                        }
                    }
                }
            }
            Op::LayerNormRows(x, inv_std) => {
                if let Some(gx) = acc!(*x) {
                    let d = *node.value.shape().last().unwrap();
                    let rows = gx.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(y.chunks_exact(d));
                    for (((orow, grow), yrow), is) in rows.zip(inv_std) {
                        let mg = grow.iter().sum::<f64>() / d as f64;
                        let mgy = tensor::dot(grow, yrow) / d as f64;
                        for ((o, gv), yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += is * (gv - mg - yv * mgy);
                        }
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(gx) = acc!(x) {
                    add_into(gx, g);
                }
            }
            Op::Gather(x, idx) => {
                if let Some(gx) = acc!(*x) {
                    for (&j, gv) in idx.iter().zip(g) {
                        gx[j] += gv;
                    }
                }
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.nodes[x.0].value.len();
                    if let Some(gx) = acc!(x) {
                        add_into(gx, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(xs) => {
                let total = node.value.shape()[1];
                let mut col = 0;
                for &x in xs {
                    let (rows, c) = dims(&self.nodes[x.0].value);
                    if let Some(gx) = acc!(x) {
                        for r in 0..rows {
                            add_into(&mut gx[r * c..(r + 1) * c], &g[r * total + col..r * total + col + c]);
                        }
                    }
                    col += c;
                }
            }
            &Op::SliceCols(x, start) => {
                let (rows, cols) = dims(&self.nodes[x.0].value);
                let len = node.value.shape()[1];
                if let Some(gx) = acc!(x) {
                    for r in 0..rows {
                        add_into(&mut gx[r * cols + start..r * cols + start + len], &g[r * len..(r + 1) * len]);
                    }
                }
            }
            &Op::Index(x, j) => {
                if let Some(gx) = acc!(x) {
                    gx[j] += g[0];
                }
            }
            &Op::Cosine(u, v, nu, nv) => {
                let c = y[0];
                let (ud, vd) = (self.data(u), self.data(v));
                if let Some(gu) = acc!(u) {
                    for ((o, &a), &b) in gu.iter_mut().zip(ud).zip(vd) {
                        *o += g[0] * (b / (nu * nv) - c * a / (nu * nu));
                    }
                }
                if let Some(gv) = acc!(v) {
                    for ((o, &a), &b) in gv.iter_mut().zip(ud).zip(vd) {
                        *o += g[0] * (a / (nu * nv) - c * b / (nv * nv));
                    }
                }
            }
        }
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, v)| *o += v);
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
