//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every op in execution order; [`Var`] is a cheap handle
//! to a recorded value. Calling [`Tape::backward`] walks the tape in reverse
//! and returns the adjoint of every node that depends on a gradient-requiring
//! leaf.
//!
//! Broadcasting is limited to a one-element operand against any shape. Row and
//! column broadcasts exist only as the explicitly named ops
//! [`Var::add_row`] and [`Var::mul_rows`].

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, round_to_precision, Tensor};

const NORM_GUARD: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MulRows(usize, usize),
    Gelu(usize),
    Relu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    L2Normalize {
        x: usize,
        norms: Vec<f64>,
    },
    RowMaxDev(usize, Vec<usize>),
    RowMinDev(usize, Vec<usize>),
    Sum(usize),
    Mean(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    Reshape(usize),
    Gather(usize, Vec<usize>),
    PairwiseDist(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed ops. Confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` when `v` does not require
    /// gradients or is not upstream of the loss.
    pub fn get(&self, v: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub(crate) fn get_id(&self, id: usize) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

fn matrix_dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn require_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::dim(op, t.shape(), &[]));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `x·Φ(x)` with the Gaussian CDF.
pub fn gelu_scalar(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    std_normal_cdf(x) + x * std_normal_pdf(x)
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

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that receives a gradient.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(&self, mut value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        round_to_precision(value.data_mut());
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Propagates adjoints from a scalar `loss` back to every upstream node.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = loss.id;
        if nodes[root].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[root].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        if nodes[root].requires_grad {
            grads[root] = Some(vec![1.0]);
        }
        for id in (0..=root).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, &mut grads, id, &g);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                g.map(|data| {
                    Tensor::new(nodes[id].value.shape().to_vec(), data)
                        .expect("gradient buffer sized from node value")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], id: usize) -> Option<&'a mut [f64]> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

fn accumulate_broadcast(dst: &mut [f64], g: &[f64], factor: Option<&[f64]>, sign: f64) {
    // dst is either full-size or a single element receiving the reduction.
    if dst.len() == g.len() {
        match factor {
            None => dst.iter_mut().zip(g).for_each(|(d, &gv)| *d += sign * gv),
            Some(f) if f.len() == 1 => dst.iter_mut().zip(g).for_each(|(d, &gv)| *d += sign * gv * f[0]),
            Some(f) => dst
                .iter_mut()
                .zip(g)
                .zip(f)
                .for_each(|((d, &gv), &fv)| *d += sign * gv * fv),
        }
    } else {
        let s: f64 = match factor {
            None => g.iter().sum(),
            Some(f) if f.len() == 1 => g.iter().sum::<f64>() * f[0],
            Some(f) => g.iter().zip(f).map(|(a, b)| a * b).sum(),
        };
        dst[0] += sign * s;
    }
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (m, k) = matrix_dims(&nodes[a].value);
            let n = out.cols();
            let av = nodes[a].value.clone();
            let bv = nodes[b].value.clone();
            if let Some(da) = slot(nodes, grads, a) {
                gemm_nt(g, bv.data(), da, m, n, k);
            }
            if let Some(db) = slot(nodes, grads, b) {
                gemm_tn(av.data(), g, db, m, k, n);
            }
        }
        &Op::MatMulNT(a, b) => {
            let (m, k) = matrix_dims(&nodes[a].value);
            let n = out.cols();
            let av = nodes[a].value.clone();
            let bv = nodes[b].value.clone();
            if let Some(da) = slot(nodes, grads, a) {
                gemm_nn(g, bv.data(), da, m, n, k);
            }
            if let Some(db) = slot(nodes, grads, b) {
                gemm_tn(g, av.data(), db, m, n, k);
            }
        }
        &Op::Add(a, b) => {
            if let Some(da) = slot(nodes, grads, a) {
                accumulate_broadcast(da, g, None, 1.0);
            }
            if let Some(db) = slot(nodes, grads, b) {
                accumulate_broadcast(db, g, None, 1.0);
            }
        }
        &Op::Sub(a, b) => {
            if let Some(da) = slot(nodes, grads, a) {
                accumulate_broadcast(da, g, None, 1.0);
            }
            if let Some(db) = slot(nodes, grads, b) {
                accumulate_broadcast(db, g, None, -1.0);
            }
        }
        &Op::Mul(a, b) => {
            let av = nodes[a].value.clone();
            let bv = nodes[b].value.clone();
            if let Some(da) = slot(nodes, grads, a) {
                accumulate_broadcast(da, g, Some(bv.data()), 1.0);
            }
            if let Some(db) = slot(nodes, grads, b) {
                accumulate_broadcast(db, g, Some(av.data()), 1.0);
            }
        }
        &Op::Scale(a, c) => {
            if let Some(da) = slot(nodes, grads, a) {
                da.iter_mut().zip(g).for_each(|(d, &gv)| *d += c * gv);
            }
        }
        &Op::AddRow(x, b) => {
            let cols = out.cols();
            if let Some(dx) = slot(nodes, grads, x) {
                dx.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
            }
            if let Some(db) = slot(nodes, grads, b) {
                for row in g.chunks(cols) {
                    db.iter_mut().zip(row).for_each(|(d, &gv)| *d += gv);
                }
            }
        }
        &Op::MulRows(x, w) => {
            let cols = out.cols();
            let xv = nodes[x].value.clone();
            let wv = nodes[w].value.clone();
            if let Some(dx) = slot(nodes, grads, x) {
                for (i, (drow, grow)) in dx.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                    let wi = wv.data()[i];
                    drow.iter_mut().zip(grow).for_each(|(d, &gv)| *d += gv * wi);
                }
            }
            if let Some(dw) = slot(nodes, grads, w) {
                for (i, (xrow, grow)) in xv.data().chunks(cols).zip(g.chunks(cols)).enumerate() {
                    dw[i] += xrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        &Op::Gelu(a) => {
            let av = nodes[a].value.clone();
            if let Some(da) = slot(nodes, grads, a) {
                for ((d, &gv), &x) in da.iter_mut().zip(g).zip(av.data()) {
                    *d += gv * gelu_grad(x);
                }
            }
        }
        &Op::Relu(a) => {
            let av = nodes[a].value.clone();
            if let Some(da) = slot(nodes, grads, a) {
                for ((d, &gv), &x) in da.iter_mut().zip(g).zip(av.data()) {
                    if x > 0.0 {
                        *d += gv;
                    }
                }
            }
        }
        &Op::Softmax(a) => {
            let cols = out.cols();
            let y = out.clone();
            if let Some(da) = slot(nodes, grads, a) {
                for ((drow, grow), yrow) in da.chunks_mut(cols).zip(g.chunks(cols)).zip(y.data().chunks(cols)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += yv * (gv - dot);
                    }
                }
            }
        }
        &Op::LogSoftmax(a) => {
            let cols = out.cols();
            let y = out.clone();
            if let Some(da) = slot(nodes, grads, a) {
                for ((drow, grow), yrow) in da.chunks_mut(cols).zip(g.chunks(cols)).zip(y.data().chunks(cols)) {
                    let gsum: f64 = grow.iter().sum();
                    for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += gv - yv.exp() * gsum;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let cols = out.cols();
            let gv = nodes[*gamma].value.clone();
            if let Some(dbeta) = slot(nodes, grads, *beta) {
                for row in g.chunks(cols) {
                    dbeta.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                }
            }
            if let Some(dgamma) = slot(nodes, grads, *gamma) {
                for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                    for ((d, &gvv), &h) in dgamma.iter_mut().zip(grow).zip(hrow) {
                        *d += gvv * h;
                    }
                }
            }
            if let Some(dx) = slot(nodes, grads, *x) {
                let n = cols as f64;
                let mut dxhat = vec![0.0; cols];
                for (r, ((drow, grow), hrow)) in dx
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(xhat.chunks(cols))
                    .enumerate()
                {
                    for ((dh, &gvv), &gm) in dxhat.iter_mut().zip(grow).zip(gv.data()) {
                        *dh = gvv * gm;
                    }
                    let mean_dh = dxhat.iter().sum::<f64>() / n;
                    let mean_dh_h = dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((d, &dh), &h) in drow.iter_mut().zip(&dxhat).zip(hrow) {
                        *d += rstd[r] * (dh - mean_dh - h * mean_dh_h);
                    }
                }
            }
        }
        Op::L2Normalize { x, norms } => {
            let cols = out.cols();
            let y = out.clone();
            if let Some(dx) = slot(nodes, grads, *x) {
                for (r, ((drow, grow), yrow)) in dx
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(y.data().chunks(cols))
                    .enumerate()
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += (gv - yv * dot) / norms[r];
                    }
                }
            }
        }
        Op::RowMaxDev(a, arg) => {
            let cols = out.cols();
            if let Some(da) = slot(nodes, grads, *a) {
                for (r, (drow, grow)) in da.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                    let total: f64 = grow.iter().sum();
                    drow.iter_mut().zip(grow).for_each(|(d, &gv)| *d -= gv);
                    drow[arg[r]] += total;
                }
            }
        }
        Op::RowMinDev(a, arg) => {
            let cols = out.cols();
            if let Some(da) = slot(nodes, grads, *a) {
                for (r, (drow, grow)) in da.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                    let total: f64 = grow.iter().sum();
                    drow.iter_mut().zip(grow).for_each(|(d, &gv)| *d += gv);
                    drow[arg[r]] -= total;
                }
            }
        }
        &Op::Sum(a) => {
            if let Some(da) = slot(nodes, grads, a) {
                da.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        &Op::Mean(a) => {
            if let Some(da) = slot(nodes, grads, a) {
                let n = da.len() as f64;
                da.iter_mut().for_each(|d| *d += g[0] / n);
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.numel();
                if let Some(dp) = slot(nodes, grads, p) {
                    dp.iter_mut().zip(&g[offset..offset + n]).for_each(|(d, &gv)| *d += gv);
                }
                offset += n;
            }
        }
        Op::ConcatCols(parts) => {
            let total_cols = out.cols();
            let mut col0 = 0;
            for &p in parts {
                let pc = nodes[p].value.cols();
                if let Some(dp) = slot(nodes, grads, p) {
                    for (drow, grow) in dp.chunks_mut(pc).zip(g.chunks(total_cols)) {
                        drow.iter_mut().zip(&grow[col0..col0 + pc]).for_each(|(d, &gv)| *d += gv);
                    }
                }
                col0 += pc;
            }
        }
        &Op::SliceRows(a, start) => {
            let cols = out.cols();
            if let Some(da) = slot(nodes, grads, a) {
                let off = start * cols;
                da[off..off + g.len()].iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
            }
        }
        &Op::SliceCols(a, start) => {
            let width = out.cols();
            let src_cols = nodes[a].value.cols();
            if let Some(da) = slot(nodes, grads, a) {
                for (drow, grow) in da.chunks_mut(src_cols).zip(g.chunks(width)) {
                    drow[start..start + width].iter_mut().zip(grow).for_each(|(d, &gv)| *d += gv);
                }
            }
        }
        &Op::Reshape(a) => {
            if let Some(da) = slot(nodes, grads, a) {
                da.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv);
            }
        }
        Op::Gather(a, idx) => {
            if let Some(da) = slot(nodes, grads, *a) {
                for (&i, &gv) in idx.iter().zip(g) {
                    da[i] += gv;
                }
            }
        }
        &Op::PairwiseDist(x) => {
            let xv = nodes[x].value.clone();
            let (b, d) = matrix_dims(&xv);
            let dist = out.clone();
            if let Some(dx) = slot(nodes, grads, x) {
                for i in 0..b {
                    for j in 0..b {
                        let dij = dist.data()[i * b + j];
                        let gij = g[i * b + j];
                        if i == j || dij == 0.0 || gij == 0.0 {
                            continue;
                        }
                        let scale = gij / dij;
                        for c in 0..d {
                            let diff = xv.data()[i * d + c] - xv.data()[j * d + c];
                            dx[i * d + c] += scale * diff;
                            dx[j * d + c] -= scale * diff;
                        }
                    }
                }
            }
        }
    }
}

fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    if b.numel() == 1 {
        let y = b.data()[0];
        let data = a.data().iter().map(|&x| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    if a.numel() == 1 {
        let x = a.data()[0];
        let data = b.data().iter().map(|&y| f(x, y)).collect();
        return Tensor::new(b.shape().to_vec(), data);
    }
    Err(Error::dim(op, a.shape(), b.shape()))
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes cannot be combined"
        );
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs);
        let a = self.value();
        let b = rhs.value();
        let (m, k) = require_rank2("matmul", &a)?;
        let (k2, n) = require_rank2("matmul", &b)?;
        if k != k2 {
            return Err(Error::dim("matmul", a.shape(), b.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(a.data(), b.data(), &mut out, m, k, n);
        Ok(self.tape.push(Tensor::new(vec![m, n], out)?, Op::MatMul(self.id, rhs.id), &[self.id, rhs.id]))
    }

    /// `self · rhsᵀ`.
    pub fn matmul_t(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs);
        let a = self.value();
        let b = rhs.value();
        let (m, k) = require_rank2("matmul_t", &a)?;
        let (n, k2) = require_rank2("matmul_t", &b)?;
        if k != k2 {
            return Err(Error::dim("matmul_t", a.shape(), b.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(a.data(), b.data(), &mut out, m, k, n);
        Ok(self.tape.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(self.id, rhs.id), &[self.id, rhs.id]))
    }

    pub fn add(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs);
        let out = broadcast_binary("add", &self.value(), &rhs.value(), |x, y| x + y)?;
        Ok(self.tape.push(out, Op::Add(self.id, rhs.id), &[self.id, rhs.id]))
    }

    pub fn sub(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs);
        let out = broadcast_binary("sub", &self.value(), &rhs.value(), |x, y| x - y)?;
        Ok(self.tape.push(out, Op::Sub(self.id, rhs.id), &[self.id, rhs.id]))
    }

    /// Hadamard product (or scalar product when either side has one element).
    pub fn mul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs);
        let out = broadcast_binary("mul", &self.value(), &rhs.value(), |x, y| x * y)?;
        Ok(self.tape.push(out, Op::Mul(self.id, rhs.id), &[self.id, rhs.id]))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|&x| c * x).collect();
        let out = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.tape.push(out, Op::Scale(self.id, c), &[self.id])
    }

    /// Adds a bias vector of length `cols` to every row.
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(bias);
        let x = self.value();
        let b = bias.value();
        let cols = x.cols();
        if b.numel() != cols {
            return Err(Error::dim("add_row", x.shape(), b.shape()));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(cols) {
            row.iter_mut().zip(b.data()).for_each(|(v, &bv)| *v += bv);
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.tape.push(out, Op::AddRow(self.id, bias.id), &[self.id, bias.id]))
    }

    /// Scales row `i` by `weights[i]`.
    pub fn mul_rows(&self, weights: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(weights);
        let x = self.value();
        let w = weights.value();
        let (rows, cols) = matrix_dims(&x);
        if w.numel() != rows {
            return Err(Error::dim("mul_rows", x.shape(), w.shape()));
        }
        let mut data = x.data().to_vec();
        for (row, &wv) in data.chunks_mut(cols).zip(w.data()) {
            row.iter_mut().for_each(|v| *v *= wv);
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.tape.push(out, Op::MulRows(self.id, weights.id), &[self.id, weights.id]))
    }

    fn map(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let a = self.value();
        let data = a.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.tape.push(out, op, &[self.id])
    }

    pub fn gelu(&self) -> Var<'t> {
        self.map(Op::Gelu(self.id), gelu_scalar)
    }

    pub fn relu(&self) -> Var<'t> {
        self.map(Op::Relu(self.id), |x| x.max(0.0))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let a = self.value();
        let cols = a.cols();
        if a.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax_rows: NaN in input".into()));
        }
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(out, Op::Softmax(self.id), &[self.id]))
    }

    pub fn log_softmax_rows(&self) -> Result<Var<'t>> {
        let a = self.value();
        let cols = a.cols();
        if a.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("log_softmax_rows: NaN in input".into()));
        }
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(out, Op::LogSoftmax(self.id), &[self.id]))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (length `cols`).
    pub fn layer_norm(&self, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.same_tape(gamma);
        self.same_tape(beta);
        let x = self.value();
        let gv = gamma.value();
        let bv = beta.value();
        let cols = x.cols();
        if gv.numel() != cols || bv.numel() != cols {
            return Err(Error::dim("layer_norm", x.shape(), gv.shape()));
        }
        let n = cols as f64;
        let mut xhat = x.data().to_vec();
        let mut rstd = Vec::with_capacity(x.rows());
        let mut data = vec![0.0; x.numel()];
        for (hrow, orow) in xhat.chunks_mut(cols).zip(data.chunks_mut(cols)) {
            let mean = hrow.iter().sum::<f64>() / n;
            let var = hrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, (h, o)) in hrow.iter_mut().zip(orow.iter_mut()).enumerate() {
                *h = (*h - mean) * r;
                *o = *h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            rstd,
        };
        Ok(self.tape.push(out, op, &[self.id, gamma.id, beta.id]))
    }

    /// Divides each row by its L2 norm (guarded below by 1e-12).
    pub fn l2_normalize_rows(&self) -> Var<'t> {
        let x = self.value();
        let cols = x.cols();
        let mut data = x.data().to_vec();
        let mut norms = Vec::with_capacity(x.rows());
        for row in data.chunks_mut(cols) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_GUARD);
            norms.push(n);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.tape.push(out, Op::L2Normalize { x: self.id, norms }, &[self.id])
    }

    /// `out[i][j] = max_j' a[i][j'] − a[i][j]`.
    pub fn row_max_deviation(&self) -> Var<'t> {
        let a = self.value();
        let cols = a.cols();
        let mut data = a.data().to_vec();
        let mut arg = Vec::with_capacity(a.rows());
        for row in data.chunks_mut(cols) {
            let (idx, max) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
            arg.push(idx);
            row.iter_mut().for_each(|v| *v = max - *v);
        }
        let out = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.tape.push(out, Op::RowMaxDev(self.id, arg), &[self.id])
    }

    /// `out[i][j] = a[i][j] − min_j' a[i][j']`.
    pub fn row_min_deviation(&self) -> Var<'t> {
        let a = self.value();
        let cols = a.cols();
        let mut data = a.data().to_vec();
        let mut arg = Vec::with_capacity(a.rows());
        for row in data.chunks_mut(cols) {
            let (idx, min) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc });
            arg.push(idx);
            row.iter_mut().for_each(|v| *v -= min);
        }
        let out = Tensor::new(a.shape().to_vec(), data).expect("same shape");
        self.tape.push(out, Op::RowMinDev(self.id, arg), &[self.id])
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'t> {
        let a = self.value();
        let s = a.data().iter().sum::<f64>() / a.numel() as f64;
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id), &[self.id])
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (rows, cols) = require_rank2("slice_rows", &a)?;
        if start > end || end > rows {
            return Err(Error::dim("slice_rows", a.shape(), &[start, end]));
        }
        let data = a.data()[start * cols..end * cols].to_vec();
        let out = Tensor::new(vec![end - start, cols], data)?;
        Ok(self.tape.push(out, Op::SliceRows(self.id, start), &[self.id]))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (rows, cols) = require_rank2("slice_cols", &a)?;
        if start > end || end > cols {
            return Err(Error::dim("slice_cols", a.shape(), &[start, end]));
        }
        let mut data = Vec::with_capacity(rows * (end - start));
        for row in a.data().chunks(cols) {
            data.extend_from_slice(&row[start..end]);
        }
        let out = Tensor::new(vec![rows, end - start], data)?;
        Ok(self.tape.push(out, Op::SliceCols(self.id, start), &[self.id]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let out = (*a).clone().reshape(shape.to_vec())?;
        Ok(self.tape.push(out, Op::Reshape(self.id), &[self.id]))
    }

    /// Picks elements by flat row-major index into a vector.
    pub fn gather(&self, indices: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if let Some(&bad) = indices.iter().find(|&&i| i >= a.numel()) {
            return Err(Error::dim("gather", a.shape(), &[bad]));
        }
        let data = indices.iter().map(|&i| a.data()[i]).collect();
        let out = Tensor::new(vec![indices.len()], data)?;
        Ok(self.tape.push(out, Op::Gather(self.id, indices.to_vec()), &[self.id]))
    }

    /// Euclidean distance between every pair of rows; zero-distance pairs get a zero subgradient.
    pub fn pairwise_distances(&self) -> Result<Var<'t>> {
        let x = self.value();
        let (b, _) = require_rank2("pairwise_distances", &x)?;
        let mut out = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                if i != j {
                    let s: f64 = x.row(i).iter().zip(x.row(j)).map(|(p, q)| (p - q) * (p - q)).sum();
                    out[i * b + j] = s.sqrt();
                }
            }
        }
        Ok(self.tape.push(Tensor::new(vec![b, b], out)?, Op::PairwiseDist(self.id), &[self.id]))
    }
}

/// Stacks matrices with equal column counts.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat_rows of zero tensors".into()))?;
    let cols = first.value().cols();
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        first.same_tape(p);
        let v = p.value();
        if v.cols() != cols {
            return Err(Error::dim("concat_rows", first.value().shape(), v.shape()));
        }
        rows += v.rows();
        data.extend_from_slice(v.data());
    }
    let out = Tensor::new(vec![rows, cols], data)?;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    Ok(first.tape.push(out, Op::ConcatRows(ids.clone()), &ids))
}

/// Joins matrices with equal row counts side by side.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat_cols of zero tensors".into()))?;
    let rows = first.value().rows();
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    for (p, v) in parts.iter().zip(&values) {
        first.same_tape(p);
        if v.rows() != rows {
            return Err(Error::dim("concat_cols", values[0].shape(), v.shape()));
        }
    }
    let total: usize = values.iter().map(|v| v.cols()).sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for v in &values {
            data.extend_from_slice(v.row(r));
        }
    }
    let out = Tensor::new(vec![rows, total], data)?;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    Ok(first.tape.push(out, Op::ConcatCols(ids.clone()), &ids))
}
