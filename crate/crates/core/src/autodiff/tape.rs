//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse creation order, which is a valid topological
//! order because inputs always precede their consumers.

use super::kernel::{gemm_acc, View};
use super::param::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(#[allow(dead_code)] ParamId),
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        alpha: f64,
    },
    Binary(Binary, Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Unary(Unary, Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Mean {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Sum(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Reshape(Var),
    /// Scalar node with caller-supplied local gradients, one buffer per input.
    Custom {
        inputs: Vec<Var>,
        local: Vec<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records a computation graph for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
}

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(format!("expected 2-D node, got {s:?}"))),
        }
    }

    /// Accumulated gradient of a leaf or parameter node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Copies the node value out as a detached tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Adds a leaf; gradients are tracked when the tensor requires them.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Adds a constant leaf that never receives gradient.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, value)?;
        Ok(self.leaf(&t))
    }

    /// Copy of `v` cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    /// Places a parameter on the tape once; later calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let t = &store.get(id).tensor;
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(id), true);
        self.params.push((id, v));
        v
    }

    /// Parameters touched by this tape together with their accumulated gradients.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.nodes[v.0].grad.as_deref().map(|g| (id, g)))
    }

    /// Adds every parameter gradient on this tape into the store's grad buffers.
    pub fn write_param_grads(&self, store: &mut ParamStore) {
        for (id, g) in self.param_grads() {
            store.get_mut(id).tensor.accumulate_grad(g);
        }
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool, alpha: f64) -> Result<Var> {
        let (ra, ca) = self.dims2(a)?;
        let (rb, cb) = self.dims2(b)?;
        let (m, k) = if trans_a { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if trans_b { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions disagree: {m}x{k} by {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = View::new(self.value(a), ra, ca).t_if(trans_a);
            let bv = View::new(self.value(b), rb, cb).t_if(trans_b);
            gemm_acc(&mut out, n, alpha, av, bv);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            vec![m, n],
            out,
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                alpha,
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false, 1.0)
    }

    /// `alpha * a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var, alpha: f64) -> Result<Var> {
        self.matmul_impl(a, b, false, true, alpha)
    }

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{op:?} operands differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (x, y) = (self.value(a), self.value(b));
        let out: Vec<f64> = match op {
            Binary::Add => x.iter().zip(y).map(|(p, q)| p + q).collect(),
            Binary::Sub => x.iter().zip(y).map(|(p, q)| p - q).collect(),
            Binary::Mul => x.iter().zip(y).map(|(p, q)| p * q).collect(),
        };
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.value(bias).len() != n {
            return Err(Error::dim(format!(
                "bias of length {} for {m}x{n} input",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(o, v)| *o += v);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(vec![m, n], out, Op::AddRowBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Scale(x, s), rg)
    }

    pub fn unary(&mut self, op: Unary, x: Var) -> Var {
        let out = match op {
            Unary::Relu => self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            Unary::Sigmoid => self.value(x).iter().map(|&v| sigmoid(v)).collect(),
        };
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Unary(op, x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = split_axis(self.shape(x), axis)?;
        let src = self.value(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Arithmetic mean along `axis`; the axis is kept with extent 1.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = split_axis(self.shape(x), axis)?;
        if len == 0 {
            return Err(Error::Domain("mean over a zero-length axis".into()));
        }
        let src = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut shape = self.shape(x).to_vec();
        shape[axis] = 1;
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Mean { x, outer, len, inner }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    /// Per-row layer normalisation with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::dim("layer_norm affine size mismatch"));
        }
        let src = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mu) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            vec![m, n],
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start + len > n || len == 0 {
            return Err(Error::dim(format!("column slice {start}..{} of {n}", start + len)));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![m, len], out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        let (m, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p)?;
            if pm != m {
                return Err(Error::dim("concat_cols row counts differ"));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p);
            for r in 0..m {
                out[r * n + off..r * n + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![m, n], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Selects rows of a 2-D node, in the given order.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if rows.is_empty() {
            return Err(Error::dim("gather of zero rows"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::dim(format!("row {bad} out of range for {m} rows")));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![rows.len(), n],
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape(x)
            )));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Reshape(x), rg))
    }

    /// Scalar node whose value and local gradients are supplied by the caller.
    ///
    /// During backward, input `i` receives `upstream * local[i]`. Losses whose
    /// gradient is defined directly (rather than derived from the value) are
    /// built on this.
    pub fn custom(&mut self, inputs: &[Var], value: f64, local: Vec<Vec<f64>>) -> Result<Var> {
        if inputs.len() != local.len() {
            return Err(Error::dim("custom node needs one gradient buffer per input"));
        }
        for (&v, g) in inputs.iter().zip(&local) {
            if self.value(v).len() != g.len() {
                return Err(Error::dim("custom node gradient has the wrong length"));
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            vec![1],
            vec![value],
            Op::Custom {
                inputs: inputs.to_vec(),
                local,
            },
            rg,
        ))
    }

    /// Accumulates d`loss`/d(node) into every reachable leaf and parameter.
    ///
    /// Calling it again without clearing adds the gradients a second time.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar seed, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf | Op::Param(_) => {
                    let node = &mut self.nodes[i];
                    match &mut node.grad {
                        Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v),
                        None => node.grad = Some(g),
                    }
                }
                op => self.propagate(op, i, &g, &mut grads),
            }
        }
        Ok(())
    }

    fn propagate(&self, op: &Op, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i];
        match *op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                alpha,
            } => {
                let (ra, ca) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let (rb, cb) = (nodes[b.0].shape[0], nodes[b.0].shape[1]);
                let (m, n) = (out.shape[0], out.shape[1]);
                let dc = View::new(g, m, n);
                let av = View::new(&nodes[a.0].value, ra, ca);
                let bv = View::new(&nodes[b.0].value, rb, cb);
                if let Some(ga) = slot(nodes, grads, a) {
                    if trans_a {
                        // A^T is m x k, so dA = alpha * op(B) * dC^T.
                        gemm_acc(ga, ca, alpha, bv.t_if(trans_b), dc.t());
                    } else {
                        gemm_acc(ga, ca, alpha, dc, bv.t_if(trans_b).t());
                    }
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    if trans_b {
                        gemm_acc(gb, cb, alpha, dc.t(), av.t_if(trans_a));
                    } else {
                        gemm_acc(gb, cb, alpha, av.t_if(trans_a).t(), dc);
                    }
                }
            }
            Op::Binary(kind, a, b) => {
                let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
                if let Some(ga) = slot(nodes, grads, a) {
                    match kind {
                        Binary::Add | Binary::Sub => ga.iter_mut().zip(g).for_each(|(s, d)| *s += d),
                        Binary::Mul => {
                            for ((s, d), q) in ga.iter_mut().zip(g).zip(y) {
                                *s += d * q;
                            }
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    match kind {
                        Binary::Add => gb.iter_mut().zip(g).for_each(|(s, d)| *s += d),
                        Binary::Sub => gb.iter_mut().zip(g).for_each(|(s, d)| *s -= d),
                        Binary::Mul => {
                            for ((s, d), p) in gb.iter_mut().zip(g).zip(x) {
                                *s += d * p;
                            }
                        }
                    }
                }
            }
            Op::AddRowBias(x, bias) => {
                let n = out.shape[1];
                if let Some(gx) = slot(nodes, grads, x) {
                    gx.iter_mut().zip(g).for_each(|(s, d)| *s += d);
                }
                if let Some(gb) = slot(nodes, grads, bias) {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(s, d)| *s += d);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = slot(nodes, grads, x) {
                    gx.iter_mut().zip(g).for_each(|(acc, d)| *acc += d * s);
                }
            }
            Op::Unary(kind, x) => {
                if let Some(gx) = slot(nodes, grads, x) {
                    let y = &out.value;
                    match kind {
                        Unary::Relu => {
                            for ((acc, d), v) in gx.iter_mut().zip(g).zip(y) {
                                if *v > 0.0 {
                                    *acc += d;
                                }
                            }
                        }
                        Unary::Sigmoid => {
                            for ((acc, d), v) in gx.iter_mut().zip(g).zip(y) {
                                *acc += d * v * (1.0 - v);
                            }
                        }
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                if let Some(gx) = slot(nodes, grads, x) {
                    let y = &out.value;
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..len {
                                gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Mean { x, outer, len, inner } => {
                if let Some(gx) = slot(nodes, grads, x) {
                    let w = 1.0 / len as f64;
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                gx[(o * len + j) * inner + i] += g[o * inner + i] * w;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(nodes, grads, x) {
                    gx.iter_mut().for_each(|acc| *acc += g[0]);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                ref xhat,
                ref rstd,
            } => {
                let n = out.shape[1];
                let gam = &nodes[gamma.0].value;
                if let Some(gg) = slot(nodes, grads, gamma) {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            gg[c] += grow[c] * hrow[c];
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, beta) {
                    for grow in g.chunks(n) {
                        gb.iter_mut().zip(grow).for_each(|(s, d)| *s += d);
                    }
                }
                if let Some(gx) = slot(nodes, grads, x) {
                    let nf = n as f64;
                    for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for c in 0..n {
                            let d = grow[c] * gam[c];
                            sum_d += d;
                            sum_dh += d * hrow[c];
                        }
                        for c in 0..n {
                            let d = grow[c] * gam[c];
                            gx[r * n + c] += rstd[r] / nf * (nf * d - sum_d - hrow[c] * sum_dh);
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let len = out.shape[1];
                let n = nodes[x.0].shape[1];
                if let Some(gx) = slot(nodes, grads, x) {
                    for (r, grow) in g.chunks(len).enumerate() {
                        for (acc, d) in gx[r * n + start..r * n + start + len].iter_mut().zip(grow) {
                            *acc += d;
                        }
                    }
                }
            }
            Op::ConcatCols(ref parts) => {
                let n = out.shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p.0].shape[1];
                    if let Some(gp) = slot(nodes, grads, p) {
                        for (r, grow) in g.chunks(n).enumerate() {
                            for (acc, d) in gp[r * w..(r + 1) * w].iter_mut().zip(&grow[off..off + w]) {
                                *acc += d;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::GatherRows { x, ref rows } => {
                let n = out.shape[1];
                if let Some(gx) = slot(nodes, grads, x) {
                    for (k, &r) in rows.iter().enumerate() {
                        for (acc, d) in gx[r * n..(r + 1) * n].iter_mut().zip(&g[k * n..(k + 1) * n]) {
                            *acc += d;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot(nodes, grads, x) {
                    gx.iter_mut().zip(g).for_each(|(s, d)| *s += d);
                }
            }
            Op::Custom {
                ref inputs,
                ref local,
            } => {
                for (&v, lg) in inputs.iter().zip(local) {
                    if let Some(gv) = slot(nodes, grads, v) {
                        gv.iter_mut().zip(lg).for_each(|(s, d)| *s += g[0] * d);
                    }
                }
            }
        }
    }
}
