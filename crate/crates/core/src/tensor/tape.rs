use std::borrow::Cow;

use super::kernels;
use super::{PoolKind, Tensor, NORM_EPS};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Gelu(Var),
    Sigmoid(Var),
    Log(Var),
    Abs(Var),
    MaxPool { src: Var, argmax: Vec<usize> },
    MeanPool { src: Var, axis: usize },
    CosineRows { u: Var, m: Var, u_norm: f64, m_norms: Vec<f64> },
    Gather { src: Var, idx: Vec<usize> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run record of a forward computation.
///
/// Nodes are appended in execution order, so every node's inputs precede it
/// and a single reverse sweep visits each node once. Leaves may borrow their
/// values; a fresh tape is built for every forward pass.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records an owned leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a leaf that borrows its value (parameters, cached features).
    pub fn leaf_ref(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Adds vector `b[n]` to every row of `a[m×n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if self.shape(b) != [n] {
            return shape_err("add_row", self.shape(a), self.shape(b));
        }
        let bv = self.value(b).data();
        let mut data = self.value(a).data().to_vec();
        for r in data.chunks_mut(n) {
            for (x, y) in r.iter_mut().zip(bv) {
                *x += y;
            }
        }
        let out = Tensor::new([m, n], data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::AddRow(a, b), ng))
    }

    /// Scales row `i` of `a[m×n]` by `g[i]`.
    pub fn scale_rows(&mut self, a: Var, g: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        if self.shape(g) != [m] {
            return shape_err("scale_rows", self.shape(a), self.shape(g));
        }
        let gv = self.value(g).data();
        let mut data = self.value(a).data().to_vec();
        for (r, &s) in data.chunks_mut(n).zip(gv) {
            for x in r.iter_mut() {
                *x *= s;
            }
        }
        let out = Tensor::new([m, n], data)?;
        let ng = self.ng(&[a, g]);
        Ok(self.push(out, Op::ScaleRows(a, g), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Softmax over the last axis (a vector is one row).
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).softmax_rows();
        let ng = self.ng(&[a]);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = *t.shape().last().unwrap_or(&1);
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: kernels::log_softmax_rows(t.data(), n),
        };
        let ng = self.ng(&[a]);
        self.push(out, Op::LogSoftmaxRows(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).gelu();
        let ng = self.ng(&[a]);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).sigmoid();
        let ng = self.ng(&[a]);
        self.push(out, Op::Sigmoid(a), ng)
    }

    /// Natural log; inputs must be positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Degenerate("log of non-positive value".into()));
        }
        let out = self.value(a).map(f64::ln);
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Log(a), ng))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let ng = self.ng(&[a]);
        self.push(out, Op::Abs(a), ng)
    }

    /// Reduces `axis` of a matrix: max pooling (gradient routed to the first
    /// maximal entry) or mean pooling.
    pub fn pool(&mut self, a: Var, axis: usize, kind: PoolKind) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = match t.shape()[..] {
            [m, n] => (m, n),
            _ => return Err(Error::Axis { axis, rank: t.rank() }),
        };
        let (out, argmax) = kernels::pool(t.data(), m, n, axis, kind)?;
        let ng = self.ng(&[a]);
        let op = match kind {
            PoolKind::Max => Op::MaxPool { src: a, argmax },
            PoolKind::Mean => Op::MeanPool { src: a, axis },
        };
        Ok(self.push(Tensor::vector(out), op, ng))
    }

    /// Cosine similarity of vector `u[d]` with every row of `m[k×d]`.
    pub fn cosine_rows(&mut self, u: Var, m: Var) -> Result<Var> {
        let (k, d) = self.value(m).dims2()?;
        if self.shape(u) != [d] {
            return shape_err("cosine_rows", self.shape(u), self.shape(m));
        }
        let uv = self.value(u).data();
        let mv = self.value(m).data();
        let u_norm = kernels::norm(uv);
        if u_norm <= NORM_EPS {
            return Err(Error::Degenerate("zero-norm vector in cosine similarity".into()));
        }
        let mut m_norms = Vec::with_capacity(k);
        let mut out = Vec::with_capacity(k);
        for row in mv.chunks(d) {
            let rn = kernels::norm(row);
            if rn <= NORM_EPS {
                return Err(Error::Degenerate("zero-norm row in cosine similarity".into()));
            }
            out.push(kernels::dot(uv, row) / (u_norm * rn));
            m_norms.push(rn);
        }
        let ng = self.ng(&[u, m]);
        Ok(self.push(
            Tensor::vector(out),
            Op::CosineRows {
                u,
                m,
                u_norm,
                m_norms,
            },
            ng,
        ))
    }

    /// Scalar cosine similarity of two equal-length vectors.
    pub fn cosine(&mut self, u: Var, v: Var) -> Result<Var> {
        let d = self.value(v).numel();
        let row = self.reshape(v, [1, d])?;
        let c = self.cosine_rows(u, row)?;
        self.reshape(c, Vec::new())
    }

    /// Selects entries of a vector.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 1 || idx.iter().any(|&i| i >= t.numel()) || idx.is_empty() {
            return shape_err("gather", t.shape(), &[idx.len()]);
        }
        let out = Tensor::vector(idx.iter().map(|&i| t.data()[i]).collect());
        let ng = self.ng(&[a]);
        Ok(self.push(
            out,
            Op::Gather {
                src: a,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Single vector entry as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let g = self.gather(a, &[i])?;
        self.reshape(g, Vec::new())
    }

    /// Reverse sweep from a single-element `loss`, seeding d(loss)/d(loss) = 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.map(|data| Tensor {
                    shape: n.value.shape().to_vec(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let at = self.value(*a);
                let bt = self.value(*b);
                let (m, k) = (at.shape()[0], at.shape()[1]);
                let n = bt.shape()[1];
                if self.requires_grad(*a) {
                    let da = kernels::matmul_nt(g, bt.data(), m, n, k);
                    self.accum(*a, &da, grads);
                }
                if self.requires_grad(*b) {
                    let db = kernels::matmul_tn(at.data(), g, m, k, n);
                    self.accum(*b, &db, grads);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let da = kernels::transpose(g, n, m);
                self.accum(*a, &da, grads);
            }
            Op::Reshape(a) => self.accum(*a, g, grads),
            Op::Add(a, b) => {
                self.accum(*a, g, grads);
                self.accum(*b, g, grads);
            }
            Op::Sub(a, b) => {
                self.accum(*a, g, grads);
                if self.requires_grad(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accum(*b, &neg, grads);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.requires_grad(*a) {
                    let da: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    self.accum(*a, &da, grads);
                }
                if self.requires_grad(*b) {
                    let db: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    self.accum(*b, &db, grads);
                }
            }
            Op::AddRow(a, b) => {
                self.accum(*a, g, grads);
                if self.requires_grad(*b) {
                    let n = self.shape(*b)[0];
                    let mut db = vec![0.0; n];
                    for r in g.chunks(n) {
                        for (d, v) in db.iter_mut().zip(r) {
                            *d += v;
                        }
                    }
                    self.accum(*b, &db, grads);
                }
            }
            Op::ScaleRows(a, s) => {
                let n = self.shape(*a)[1];
                let sv = self.value(*s).data();
                if self.requires_grad(*a) {
                    let mut da = g.to_vec();
                    for (r, &f) in da.chunks_mut(n).zip(sv) {
                        for x in r.iter_mut() {
                            *x *= f;
                        }
                    }
                    self.accum(*a, &da, grads);
                }
                if self.requires_grad(*s) {
                    let av = self.value(*a).data();
                    let ds: Vec<f64> = g
                        .chunks(n)
                        .zip(av.chunks(n))
                        .map(|(gr, ar)| kernels::dot(gr, ar))
                        .collect();
                    self.accum(*s, &ds, grads);
                }
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accum(*a, &da, grads);
            }
            Op::Sum(a) => {
                let da = vec![g[0]; self.value(*a).numel()];
                self.accum(*a, &da, grads);
            }
            Op::SoftmaxRows(a) => {
                let n = *self.shape(*a).last().unwrap_or(&1);
                let mut da = vec![0.0; g.len()];
                for ((d, gr), yr) in da.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                    let s = kernels::dot(gr, yr);
                    for ((dv, gv), yv) in d.iter_mut().zip(gr).zip(yr) {
                        *dv = yv * (gv - s);
                    }
                }
                self.accum(*a, &da, grads);
            }
            Op::LogSoftmaxRows(a) => {
                let n = *self.shape(*a).last().unwrap_or(&1);
                let mut da = vec![0.0; g.len()];
                for ((d, gr), yr) in da.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                    let s: f64 = gr.iter().sum();
                    for ((dv, gv), yv) in d.iter_mut().zip(gr).zip(yr) {
                        *dv = gv - yv.exp() * s;
                    }
                }
                self.accum(*a, &da, grads);
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let da: Vec<f64> = g.iter().zip(x).map(|(gv, &xv)| gv * kernels::gelu_grad(xv)).collect();
                self.accum(*a, &da, grads);
            }
            Op::Sigmoid(a) => {
                let da: Vec<f64> = g.iter().zip(out).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                self.accum(*a, &da, grads);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let da: Vec<f64> = g.iter().zip(x).map(|(gv, xv)| gv / xv).collect();
                self.accum(*a, &da, grads);
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                let da: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else if xv < 0.0 { -gv } else { 0.0 })
                    .collect();
                self.accum(*a, &da, grads);
            }
            Op::MaxPool { src, argmax } => {
                let mut da = vec![0.0; self.value(*src).numel()];
                for (&idx, gv) in argmax.iter().zip(g) {
                    da[idx] += gv;
                }
                self.accum(*src, &da, grads);
            }
            Op::MeanPool { src, axis } => {
                let (m, n) = (self.shape(*src)[0], self.shape(*src)[1]);
                let mut da = vec![0.0; m * n];
                if *axis == 0 {
                    let c = 1.0 / m as f64;
                    for r in da.chunks_mut(n) {
                        for (d, gv) in r.iter_mut().zip(g) {
                            *d = gv * c;
                        }
                    }
                } else {
                    let c = 1.0 / n as f64;
                    for (r, gv) in da.chunks_mut(n).zip(g) {
                        r.fill(gv * c);
                    }
                }
                self.accum(*src, &da, grads);
            }
            Op::CosineRows {
                u,
                m,
                u_norm,
                m_norms,
            } => {
                let uv = self.value(*u).data();
                let mv = self.value(*m).data();
                let d = uv.len();
                if self.requires_grad(*u) {
                    let mut du = vec![0.0; d];
                    for (((row, &rn), &c), &gv) in mv.chunks(d).zip(m_norms).zip(out).zip(g) {
                        let a = gv / (u_norm * rn);
                        let b = gv * c / (u_norm * u_norm);
                        for ((dv, &rv), &xv) in du.iter_mut().zip(row).zip(uv) {
                            *dv += a * rv - b * xv;
                        }
                    }
                    self.accum(*u, &du, grads);
                }
                if self.requires_grad(*m) {
                    let mut dm = vec![0.0; mv.len()];
                    for ((((drow, row), &rn), &c), &gv) in
                        dm.chunks_mut(d).zip(mv.chunks(d)).zip(m_norms).zip(out).zip(g)
                    {
                        let a = gv / (u_norm * rn);
                        let b = gv * c / (rn * rn);
                        for ((dv, &rv), &xv) in drow.iter_mut().zip(row).zip(uv) {
                            *dv = a * xv - b * rv;
                        }
                    }
                    self.accum(*m, &dm, grads);
                }
            }
            Op::Gather { src, idx } => {
                let mut da = vec![0.0; self.value(*src).numel()];
                for (&i, gv) in idx.iter().zip(g) {
                    da[i] += gv;
                }
                self.accum(*src, &da, grads);
            }
        }
    }

    fn accum(&self, v: Var, delta: &[f64], grads: &mut [Option<Vec<f64>>]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta.to_vec()),
        }
    }
}
