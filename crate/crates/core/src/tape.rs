//! Dynamic reverse-mode autodiff.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and applies each local vector-Jacobian product.
//! All traced values are 2-D (`rows x cols`); scalars are `1 x 1`.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Softplus(Var),
    SumAll(Var),
    SumRows(Var),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    StackRows(Rc<[Var]>),
    GatherRows(Var, Rc<[usize]>),
    ScatterAddRows(Var, Rc<[usize]>),
    RowDot(Var, Var),
    SegmentSoftmax(Var, Rc<[usize]>, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BroadcastRows(Var),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    rows: usize,
    cols: usize,
    op: Op,
    requires_grad: bool,
}

/// A single-writer recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn dims(t: &Tensor) -> Result<(usize, usize)> {
    t.dims2()
}

fn mismatch(op: &'static str, expected: &[usize], found: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        expected: expected.to_vec(),
        found: found.to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let (rows, cols) = (value.shape()[0], value.shape()[1]);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf: gradients are accumulated for it by `backward`.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        dims(&t)?;
        Ok(self.push(t, Op::Leaf, true))
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        dims(&t)?;
        Ok(self.push(t, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        let n = self.node(v);
        Tensor::new(vec![n.rows, n.cols], g.clone()).ok()
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    // ---- forward operations ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(mismatch("matmul", &[k, n], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(mismatch(name, &[sa.0, sa.1], &[sb.0, sb.1]));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![sa.0, sa.1], out)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// `a[m,n] + b[1,n]` with `b` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let sb = self.shape(b);
        if sb != (1, n) {
            return Err(mismatch("add_row", &[1, n], &[sb.0, sb.1]));
        }
        let bv = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, x) in row.iter_mut().zip(bv) {
                *o += x;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddRow(a, b), rg))
    }

    /// `a[m,n] * c[m,1]`: row `r` of `a` scaled by `c[r]`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let sc = self.shape(c);
        if sc != (m, 1) {
            return Err(mismatch("mul_col", &[m, 1], &[sc.0, sc.1]));
        }
        let cv = self.value(c).data();
        let mut out = self.value(a).data().to_vec();
        if n > 0 {
            for (row, s) in out.chunks_mut(n).zip(cv) {
                for o in row.iter_mut() {
                    *o *= s;
                }
            }
        }
        let rg = self.rg(&[a, c]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MulCol(a, c), rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (m, n) = self.shape(a);
        let out: Vec<f64> = self.value(a).data().iter().map(|x| f(*x)).collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(vec![m, n], out).expect("same shape"), op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, math::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, math::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, math::ln, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, math::sqrt, Op::Sqrt(a))
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, math::softplus, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Sum of every entry, as a `1 x 1` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Column sums: `[m,n] -> [1,n]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (_, n) = self.shape(a);
        let mut out = vec![0.0; n];
        if n > 0 {
            for row in self.value(a).data().chunks(n) {
                for (o, x) in out.iter_mut().zip(row) {
                    *o += x;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::row(out), Op::SumRows(a), rg)
    }

    /// Row-wise mean: `[m,n] -> [1,n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, _) = self.shape(a);
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / m.max(1) as f64)
    }

    /// `[a | b]` along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, na) = self.shape(a);
        let (mb, nb) = self.shape(b);
        if m != mb {
            return Err(mismatch("concat_cols", &[m, nb], &[mb, nb]));
        }
        let mut out = Vec::with_capacity(m * (na + nb));
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for r in 0..m {
            out.extend_from_slice(&av[r * na..(r + 1) * na]);
            out.extend_from_slice(&bv[r * nb..(r + 1) * nb]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, na + nb], out)?,
            Op::ConcatCols(a, b),
            rg,
        ))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if start > end || end > n {
            return Err(Error::invalid(format!(
                "slice_cols {start}..{end} out of range for {n} columns"
            )));
        }
        let w = end - start;
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&av[r * n + start..r * n + end]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![m, w], out)?, Op::SliceCols(a, start), rg))
    }

    /// The rows of every input in order; all inputs share a column count.
    pub fn stack_rows(&mut self, vs: &[Var]) -> Result<Var> {
        let Some(&first) = vs.first() else {
            return Err(Error::Empty("stack_rows inputs"));
        };
        let n = self.shape(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &v in vs {
            let (m, c) = self.shape(v);
            if c != n {
                return Err(mismatch("stack_rows", &[m, n], &[m, c]));
            }
            out.extend_from_slice(self.value(v).data());
            rows += m;
        }
        let rg = self.rg(vs);
        Ok(self.push(Tensor::new(vec![rows, n], out)?, Op::StackRows(vs.into()), rg))
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if start > end || end > m {
            return Err(Error::invalid(format!(
                "slice_rows {start}..{end} out of range for {m} rows"
            )));
        }
        let out = self.value(a).data()[start * n..end * n].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![end - start, n], out)?, Op::SliceRows(a, start), rg))
    }

    /// Row `idx[k]` of `a` becomes row `k` of the output.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Result<Var> {
        let (m, n) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::invalid(format!("gather_rows index {bad} >= {m}")));
        }
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx.iter() {
            out.extend_from_slice(&av[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[a]);
        let k = idx.len();
        Ok(self.push(Tensor::new(vec![k, n], out)?, Op::GatherRows(a, idx), rg))
    }

    /// Row `k` of `a` is added into row `idx[k]` of a zero `[n_out, n]` output.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Rc<[usize]>, n_out: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if idx.len() != m {
            return Err(mismatch("scatter_add_rows", &[idx.len(), n], &[m, n]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_out) {
            return Err(Error::invalid(format!(
                "scatter_add_rows index {bad} >= {n_out}"
            )));
        }
        let av = self.value(a).data();
        let mut out = vec![0.0; n_out * n];
        for (k, &i) in idx.iter().enumerate() {
            for c in 0..n {
                out[i * n + c] += av[k * n + c];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(vec![n_out, n], out)?,
            Op::ScatterAddRows(a, idx),
            rg,
        ))
    }

    /// Row-wise dot product: `[m,n] x [m,n] -> [m,1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(mismatch("row_dot", &[sa.0, sa.1], &[sb.0, sb.1]));
        }
        let (m, n) = sa;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<f64> = (0..m)
            .map(|r| {
                av[r * n..(r + 1) * n]
                    .iter()
                    .zip(&bv[r * n..(r + 1) * n])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::column(out), Op::RowDot(a, b), rg))
    }

    /// Softmax of a column of scores within groups: entry `k` is normalized
    /// against every entry sharing `segment[k]`. Max-shifted per group.
    pub fn segment_softmax(
        &mut self,
        scores: Var,
        segment: Rc<[usize]>,
        n_segments: usize,
    ) -> Result<Var> {
        let (m, c) = self.shape(scores);
        if c != 1 || segment.len() != m {
            return Err(mismatch("segment_softmax", &[segment.len(), 1], &[m, c]));
        }
        if let Some(&bad) = segment.iter().find(|&&s| s >= n_segments) {
            return Err(Error::invalid(format!(
                "segment id {bad} >= {n_segments}"
            )));
        }
        let sv = self.value(scores).data();
        let mut max = vec![f64::NEG_INFINITY; n_segments];
        for (k, &s) in segment.iter().enumerate() {
            max[s] = max[s].max(sv[k]);
        }
        let mut out: Vec<f64> = segment
            .iter()
            .enumerate()
            .map(|(k, &s)| math::exp(sv[k] - max[s]))
            .collect();
        let mut total = vec![0.0; n_segments];
        for (k, &s) in segment.iter().enumerate() {
            total[s] += out[k];
        }
        for (k, &s) in segment.iter().enumerate() {
            out[k] /= total[s];
        }
        let rg = self.rg(&[scores]);
        Ok(self.push(
            Tensor::column(out),
            Op::SegmentSoftmax(scores, segment, n_segments),
            rg,
        ))
    }

    /// Per-row layer normalization with `[1,n]` gain and bias.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.shape(x);
        for p in [gain, bias] {
            let s = self.shape(p);
            if s != (1, n) {
                return Err(mismatch("layer_norm_rows", &[1, n], &[s.0, s.1]));
            }
        }
        if n == 0 {
            return Err(Error::Empty("layer_norm_rows"));
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / math::sqrt(var + eps);
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = gv[c] * h + bv[c];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Repeat a `[1,n]` row `m` times.
    pub fn broadcast_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        let (r, n) = self.shape(a);
        if r != 1 {
            return Err(mismatch("broadcast_rows", &[1, n], &[r, n]));
        }
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(av);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::BroadcastRows(a), rg))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a).clone().reshape(vec![rows, cols])?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    // ---- reverse pass ------------------------------------------------------

    /// Back-propagate from a `1 x 1` loss. Gradients of trainable leaves are
    /// added to their buffers, so calling this twice without
    /// [`zero_grad`](Self::zero_grad) accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            let (r, c) = self.shape(loss);
            return Err(mismatch("backward", &[1, 1], &[r, c]));
        }
        let n_nodes = loss.0 + 1;
        let mut g: Vec<Option<Vec<f64>>> = vec![None; n_nodes];
        g[loss.0] = Some(vec![1.0]);

        for idx in (0..n_nodes).rev() {
            let Some(gy) = g[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = self.grads.len().max(idx + 1);
                self.grads.resize(slot, None);
                match &mut self.grads[idx] {
                    Some(acc) => acc.iter_mut().zip(&gy).for_each(|(a, d)| *a += d),
                    none => *none = Some(gy),
                }
                continue;
            }
            self.local_vjp(idx, &gy, &mut g);
        }
        Ok(())
    }

    fn local_vjp(&self, idx: usize, gy: &[f64], g: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let (m, n) = (node.rows, node.cols);
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (_, k) = self.shape(*a);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.requires_grad(*a) {
                    // dA += dY B^T
                    let ga = acc(g, *a, m * k);
                    gemm(
                        (m, n, k),
                        (gy, n, 1),
                        (bv, 1, n),
                        (ga, k, 1),
                        1.0,
                    );
                }
                if self.requires_grad(*b) {
                    // dB += A^T dY
                    let gb = acc(g, *b, k * n);
                    gemm(
                        (k, m, n),
                        (av, 1, k),
                        (gy, n, 1),
                        (gb, n, 1),
                        1.0,
                    );
                }
            }
            Op::Add(a, b) => {
                add_into(self, g, *a, gy, 1.0);
                add_into(self, g, *b, gy, 1.0);
            }
            Op::Sub(a, b) => {
                add_into(self, g, *a, gy, 1.0);
                add_into(self, g, *b, gy, -1.0);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.requires_grad(*a) {
                    let ga = acc(g, *a, gy.len());
                    for k in 0..gy.len() {
                        ga[k] += gy[k] * bv[k];
                    }
                }
                if self.requires_grad(*b) {
                    let gb = acc(g, *b, gy.len());
                    for k in 0..gy.len() {
                        gb[k] += gy[k] * av[k];
                    }
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b).data();
                if self.requires_grad(*a) {
                    let ga = acc(g, *a, gy.len());
                    for k in 0..gy.len() {
                        ga[k] += gy[k] / bv[k];
                    }
                }
                if self.requires_grad(*b) {
                    let gb = acc(g, *b, gy.len());
                    for k in 0..gy.len() {
                        gb[k] -= gy[k] * y[k] / bv[k];
                    }
                }
            }
            Op::AddRow(a, b) => {
                add_into(self, g, *a, gy, 1.0);
                if self.requires_grad(*b) {
                    let gb = acc(g, *b, n);
                    for row in gy.chunks(n) {
                        for (o, d) in gb.iter_mut().zip(row) {
                            *o += d;
                        }
                    }
                }
            }
            Op::MulCol(a, c) => {
                let av = self.value(*a).data();
                let cv = self.value(*c).data();
                if self.requires_grad(*a) {
                    let ga = acc(g, *a, m * n);
                    for r in 0..m {
                        for k in r * n..(r + 1) * n {
                            ga[k] += gy[k] * cv[r];
                        }
                    }
                }
                if self.requires_grad(*c) {
                    let gc = acc(g, *c, m);
                    for r in 0..m {
                        let s: f64 = (r * n..(r + 1) * n).map(|k| gy[k] * av[k]).sum();
                        gc[r] += s;
                    }
                }
            }
            Op::Scale(a, s) => add_into(self, g, *a, gy, *s),
            Op::AddScalar(a) | Op::Reshape(a) => add_into(self, g, *a, gy, 1.0),
            Op::Tanh(a) => {
                if self.requires_grad(*a) {
                    let ga = acc(g, *a, gy.len());
                    for k in 0..gy.len() {
                        ga[k] += gy[k] * (1.0 - y[k] * y[k]);
                    }
                }
            }
            Op::Exp(a) => {
                if self.requires_grad(*a) {
                    let ga = acc(g, *a, gy.len());
                    for k in 0..gy.len() {
                        ga[k] += gy[k] * y[k];
                    }
                }
            }
            Op::Ln(a) => {
                if self.requires_grad(*a) {
                    let av = self.value(*a).data();
                    let ga = acc(g, *a, gy.len());
                    for k in 0..gy.len() {
                        ga[k] += gy[k] / av[k];
                    }
                }
            }
            Op::Sqrt(a) => {
                if self.requires_grad(*a) {
                    let ga = acc(g, *a, gy.len());
                    for k in 0..gy.len() {
                        ga[k] += gy[k] * 0.5 / y[k];
                    }
                }
            }
            Op::Softplus(a) => {
                if self.requires_grad(*a) {
                    let av = self.value(*a).data();
                    let ga = acc(g, *a, gy.len());
                    for k in 0..gy.len() {
                        ga[k] += gy[k] * math::sigmoid(av[k]);
                    }
                }
            }
            Op::SumAll(a) => {
                if self.requires_grad(*a) {
                    let len = self.value(*a).len();
                    let ga = acc(g, *a, len);
                    for o in ga.iter_mut() {
                        *o += gy[0];
                    }
                }
            }
            Op::SumRows(a) | Op::BroadcastRows(a) => {
                // These two are adjoint to each other.
                if self.requires_grad(*a) {
                    let (ra, na) = self.shape(*a);
                    let ga = acc(g, *a, ra * na);
                    if matches!(node.op, Op::SumRows(_)) {
                        for row in ga.chunks_mut(na.max(1)) {
                            for (o, d) in row.iter_mut().zip(gy) {
                                *o += d;
                            }
                        }
                    } else {
                        for row in gy.chunks(na.max(1)) {
                            for (o, d) in ga.iter_mut().zip(row) {
                                *o += d;
                            }
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (_, na) = self.shape(*a);
                let (_, nb) = self.shape(*b);
                if self.requires_grad(*a) {
                    let ga = acc(g, *a, m * na);
                    for r in 0..m {
                        for c in 0..na {
                            ga[r * na + c] += gy[r * n + c];
                        }
                    }
                }
                if self.requires_grad(*b) {
                    let gb = acc(g, *b, m * nb);
                    for r in 0..m {
                        for c in 0..nb {
                            gb[r * nb + c] += gy[r * n + na + c];
                        }
                    }
                }
            }
            Op::SliceCols(a, start) => {
                if self.requires_grad(*a) {
                    let (_, na) = self.shape(*a);
                    let ga = acc(g, *a, m * na);
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * na + start + c] += gy[r * n + c];
                        }
                    }
                }
            }
            Op::StackRows(vs) => {
                let mut offset = 0;
                for &v in vs.iter() {
                    let len = self.shape(v).0 * n;
                    if self.requires_grad(v) {
                        let gv = acc(g, v, len);
                        for (o, d) in gv.iter_mut().zip(&gy[offset..offset + len]) {
                            *o += d;
                        }
                    }
                    offset += len;
                }
            }
            Op::SliceRows(a, start) => {
                if self.requires_grad(*a) {
                    let (ra, _) = self.shape(*a);
                    let ga = acc(g, *a, ra * n);
                    for (o, d) in ga[start * n..(start + m) * n].iter_mut().zip(gy) {
                        *o += d;
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                if self.requires_grad(*a) {
                    let (ra, _) = self.shape(*a);
                    let ga = acc(g, *a, ra * n);
                    for (k, &i) in idx.iter().enumerate() {
                        for c in 0..n {
                            ga[i * n + c] += gy[k * n + c];
                        }
                    }
                }
            }
            Op::ScatterAddRows(a, idx) => {
                if self.requires_grad(*a) {
                    let ga = acc(g, *a, idx.len() * n);
                    for (k, &i) in idx.iter().enumerate() {
                        for c in 0..n {
                            ga[k * n + c] += gy[i * n + c];
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                let (_, w) = self.shape(*a);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.requires_grad(*a) {
                    let ga = acc(g, *a, m * w);
                    for r in 0..m {
                        for c in 0..w {
                            ga[r * w + c] += gy[r] * bv[r * w + c];
                        }
                    }
                }
                if self.requires_grad(*b) {
                    let gb = acc(g, *b, m * w);
                    for r in 0..m {
                        for c in 0..w {
                            gb[r * w + c] += gy[r] * av[r * w + c];
                        }
                    }
                }
            }
            Op::SegmentSoftmax(a, segment, n_segments) => {
                if self.requires_grad(*a) {
                    let mut dot = vec![0.0; *n_segments];
                    for (k, &s) in segment.iter().enumerate() {
                        dot[s] += y[k] * gy[k];
                    }
                    let ga = acc(g, *a, m);
                    for (k, &s) in segment.iter().enumerate() {
                        ga[k] += y[k] * (gy[k] - dot[s]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                if self.requires_grad(*x) {
                    let gx = acc(g, *x, m * n);
                    let mut dxhat = vec![0.0; n];
                    for r in 0..m {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..n {
                            let d = gy[r * n + c] * gv[c];
                            dxhat[c] = d;
                            mean_d += d;
                            mean_dx += d * xhat[r * n + c];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for c in 0..n {
                            gx[r * n + c] +=
                                inv_std[r] * (dxhat[c] - mean_d - xhat[r * n + c] * mean_dx);
                        }
                    }
                }
                if self.requires_grad(*gain) {
                    let gg = acc(g, *gain, n);
                    for r in 0..m {
                        for c in 0..n {
                            gg[c] += gy[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if self.requires_grad(*bias) {
                    let gb = acc(g, *bias, n);
                    for r in 0..m {
                        for c in 0..n {
                            gb[c] += gy[r * n + c];
                        }
                    }
                }
            }
        }
    }
}

fn acc(g: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    g[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(tape: &Tape, g: &mut [Option<Vec<f64>>], v: Var, gy: &[f64], s: f64) {
    if !tape.requires_grad(v) {
        return;
    }
    match &mut g[v.0] {
        Some(gv) => gv.iter_mut().zip(gy).for_each(|(o, d)| *o += s * d),
        none => *none = Some(gy.iter().map(|d| s * d).collect()),
    }
}

/// `out[m,n] = a[m,k] b[k,n]` for row-major buffers.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm((m, k, n), (a, k, 1), (b, n, 1), (out, n, 1), 0.0);
}

/// `c = beta * c + a b` where each operand is `(buffer, row stride, column
/// stride)` and `dims = (m, k, n)`.
fn gemm(
    dims: (usize, usize, usize),
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    c: (&mut [f64], usize, usize),
    beta: f64,
) {
    let (m, k, n) = dims;
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c.0[i * c.1 + j * c.2] *= beta;
            }
        }
        return;
    }
    assert!(a.0.len() >= span(m, k, a.1, a.2));
    assert!(b.0.len() >= span(k, n, b.1, b.2));
    assert!(c.0.len() >= span(m, n, c.1, c.2));
    // SAFETY: the assertions above keep every strided access in bounds and
    // `c` is a unique borrow, so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.0.as_mut_ptr(),
            c.1 as isize,
            c.2 as isize,
        );
    }
}
