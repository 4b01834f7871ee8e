//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every differentiable operation appends a node holding its output value and
//! enough saved state for its vector-Jacobian product. `backward` walks the
//! nodes in exact reverse execution order and accumulates gradients, so
//! values used several times (shared embeddings) sum their contributions.

use std::collections::{BTreeMap, HashMap};

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{kernels, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One scored position for [`Graph::log_prob_pick`]: the log-softmax over
/// columns `lo..hi` of `row`, evaluated at absolute column `target`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PickSpec {
    pub row: usize,
    pub lo: usize,
    pub hi: usize,
    pub target: usize,
    pub weight: f64,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(Var),
    Gather { src: Var, rows: Vec<usize> },
    ScatterAdd { base: Var, x: Var, rows: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SumRows(Var),
    MeanRows(Var),
    SumAll(Var),
    PickEntries { x: Var, idx: Vec<(usize, usize)> },
    LogProbPick { logits: Var, specs: Vec<PickSpec>, probs: Vec<Vec<f64>> },
    BceWithLogits { logits: Var, labels: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Multiply-accumulate counts by scope, for cost instrumentation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MacCounter {
    pub total: u64,
    pub by_scope: BTreeMap<&'static str, u64>,
}

impl MacCounter {
    pub fn scope(&self, name: &str) -> u64 {
        self.by_scope.get(name).copied().unwrap_or(0)
    }
}

/// The tape.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    record: bool,
    param_vars: HashMap<ParamId, Var>,
    macs: MacCounter,
    scope: Option<&'static str>,
    non_finite: Option<&'static str>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    /// A graph that records operations for backpropagation.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            record: true,
            param_vars: HashMap::new(),
            macs: MacCounter::default(),
            scope: None,
            non_finite: None,
        }
    }

    /// A graph that only evaluates values; `backward` is rejected.
    pub fn inference() -> Self {
        Graph { record: false, ..Graph::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn macs(&self) -> &MacCounter {
        &self.macs
    }

    /// Attributes subsequent matmul cost to `scope` (in addition to the total).
    pub fn set_scope(&mut self, scope: Option<&'static str>) -> Option<&'static str> {
        std::mem::replace(&mut self.scope, scope)
    }

    /// Error if any operation produced a NaN or infinity (checked in debug builds).
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some(op) => Err(Error::NonFinite(op)),
            None => Ok(()),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Var {
        if cfg!(debug_assertions) && self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(name);
        }
        let op = if self.record { op } else { Op::Constant };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn count(&mut self, macs: u64) {
        self.macs.total += macs;
        if let Some(s) = self.scope {
            *self.macs.by_scope.entry(s).or_insert(0) += macs;
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, "constant")
    }

    /// Leaf for a stored parameter; repeated requests return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), "param");
        self.param_vars.insert(id, v);
        v
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dimensions {m}x{k} · {k2}x{n}");
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.count((m * k * n) as u64);
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), "matmul")
    }

    /// a · bᵀ
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        assert_eq!(k, k2, "matmul_bt inner dimensions {m}x{k} · ({n}x{k2})ᵀ");
        let mut out = vec![0.0; m * n];
        kernels::matmul_bt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.count((m * k * n) as u64);
        self.push(Tensor::matrix(m, n, out), Op::MatMulBt(a, b), "matmul_bt")
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shapes differ");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b), "mul")
    }

    /// x[T×D] + bias[1×D] broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let mut t = self.value(x).clone();
        let b = self.value(bias).data();
        assert_eq!(b.len(), t.cols(), "bias length");
        let c = t.cols();
        for row in t.data_mut().chunks_mut(c) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        self.push(t, Op::AddRow(x, bias), "add_row")
    }

    /// x[T×D] scaled row-wise by g[T×1].
    pub fn mul_col(&mut self, x: Var, g: Var) -> Var {
        let mut t = self.value(x).clone();
        let gv = self.value(g).data();
        assert_eq!(gv.len(), t.rows(), "column scale length");
        let c = t.cols();
        for (row, &s) in t.data_mut().chunks_mut(c).zip(gv) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        self.push(t, Op::MulCol(x, g), "mul_col")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.map(x, |v| v * c);
        self.push(t, Op::Scale(x, c), "scale")
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.map(x, kernels::gelu);
        self.push(t, Op::Gelu(x), "gelu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, kernels::sigmoid);
        self.push(t, Op::Sigmoid(x), "sigmoid")
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, kernels::log_sigmoid);
        self.push(t, Op::LogSigmoid(x), "log_sigmoid")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xt = self.value(x);
        let (rows, cols) = (xt.rows(), xt.cols());
        let mut xhat = vec![0.0; rows * cols];
        let mut out = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for r in 0..rows {
            rstd[r] = kernels::layer_norm_row(
                xt.row(r),
                g,
                b,
                EPS,
                &mut xhat[r * cols..(r + 1) * cols],
                &mut out[r * cols..(r + 1) * cols],
            );
        }
        let t = Tensor::matrix(rows, cols, out);
        self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, "layer_norm")
    }

    /// Row-wise softmax; `keep`, when given, is a row-major mask of the same
    /// size where `false` entries receive probability zero.
    pub fn softmax_rows(&mut self, x: Var, keep: Option<&[bool]>) -> Var {
        let mut t = self.value(x).clone();
        let c = t.cols();
        for (r, row) in t.data_mut().chunks_mut(c).enumerate() {
            kernels::softmax_in_place(row, keep.map(|k| &k[r * c..(r + 1) * c]));
        }
        self.push(t, Op::Softmax(x), "softmax")
    }

    /// Rows `rows[i]` of `src`, stacked. Embedding lookup is this op.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Var {
        let s = self.value(src);
        let c = s.cols();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            assert!(r < s.rows(), "gather row {r} out of {}", s.rows());
            out.extend_from_slice(s.row(r));
        }
        let t = Tensor::matrix(rows.len(), c, out);
        self.push(t, Op::Gather { src, rows: rows.to_vec() }, "gather")
    }

    /// base with x[i] added into row rows[i].
    pub fn scatter_add_rows(&mut self, base: Var, x: Var, rows: &[usize]) -> Var {
        let mut t = self.value(base).clone();
        let xv = self.value(x);
        assert_eq!(xv.rows(), rows.len());
        for (i, &r) in rows.iter().enumerate() {
            for (o, &v) in t.row_mut(r).iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        self.push(t, Op::ScatterAdd { base, x, rows: rows.to_vec() }, "scatter_add")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.value(x);
        assert!(start + len <= s.cols());
        let mut out = Vec::with_capacity(s.rows() * len);
        for r in 0..s.rows() {
            out.extend_from_slice(&s.row(r)[start..start + len]);
        }
        let t = Tensor::matrix(s.rows(), len, out);
        self.push(t, Op::SliceCols { x, start }, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), rows, "concat_cols row counts differ");
                out.extend_from_slice(t.row(r));
            }
        }
        let t = Tensor::matrix(rows, total, out);
        self.push(t, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows column counts differ");
            out.extend_from_slice(t.data());
            rows += t.rows();
        }
        let t = Tensor::matrix(rows, cols, out);
        self.push(t, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    pub fn sum_rows(&mut self, x: Var) -> Var {
        let s = self.value(x);
        let c = s.cols();
        let mut out = vec![0.0; c];
        for r in 0..s.rows() {
            for (o, &v) in out.iter_mut().zip(s.row(r)) {
                *o += v;
            }
        }
        self.push(Tensor::matrix(1, c, out), Op::SumRows(x), "sum_rows")
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let s = self.value(x);
        let (n, c) = (s.rows(), s.cols());
        let mut out = vec![0.0; c];
        for r in 0..n {
            for (o, &v) in out.iter_mut().zip(s.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        self.push(Tensor::matrix(1, c, out), Op::MeanRows(x), "mean_rows")
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), "sum_all")
    }

    /// Column vector of selected entries x[r][c].
    pub fn pick_entries(&mut self, x: Var, idx: &[(usize, usize)]) -> Var {
        let s = self.value(x);
        let out = idx.iter().map(|&(r, c)| s.get(r, c)).collect::<Vec<_>>();
        let t = Tensor::matrix(idx.len(), 1, out);
        self.push(t, Op::PickEntries { x, idx: idx.to_vec() }, "pick_entries")
    }

    /// Σ weight · log softmax(logits[row][lo..hi])[target − lo] over `specs`.
    pub fn log_prob_pick(&mut self, logits: Var, specs: &[PickSpec]) -> Var {
        let l = self.value(logits);
        let mut total = 0.0;
        let mut probs = Vec::with_capacity(specs.len());
        for s in specs {
            assert!(s.lo <= s.target && s.target < s.hi && s.hi <= l.cols(), "pick spec {s:?}");
            let slice = &l.row(s.row)[s.lo..s.hi];
            let lse = kernels::logsumexp(slice);
            total += s.weight * (slice[s.target - s.lo] - lse);
            if self.record {
                probs.push(slice.iter().map(|&v| (v - lse).exp()).collect());
            }
        }
        let op = Op::LogProbPick { logits, specs: specs.to_vec(), probs };
        self.push(Tensor::scalar(total), op, "log_prob_pick")
    }

    /// Σ_c BCE(label_c, sigmoid(logit_c)), computed stably from logits.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Var {
        let z = self.value(logits).data();
        assert_eq!(z.len(), labels.len());
        let loss: f64 = z.iter().zip(labels).map(|(&zi, &y)| -(y * kernels::log_sigmoid(zi) + (1.0 - y) * kernels::log_sigmoid(-zi))).sum();
        let op = Op::BceWithLogits { logits, labels: labels.to_vec() };
        self.push(Tensor::scalar(loss), op, "bce_with_logits")
    }

    /// Backpropagates from a scalar and returns gradients for every parameter
    /// reachable from it; unreachable parameters have no entry (zero).
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        if !self.record {
            return Err(Error::Contract("backward on an inference graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.check_finite()?;
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        let mut out = store.empty_gradients();

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, &dy, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) {
        let dyd = dy.data();
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => match &mut out.grads[id.0] {
                Some(g) => g.add_assign(dy),
                slot => *slot = Some(dy.clone()),
            },
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.value(*b).cols();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |g| kernels::matmul_bt(dyd, bv, g, m, n, k));
                self.acc(grads, *b, |g| kernels::matmul_at(av, dyd, g, m, k, n));
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.value(*b).rows();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |g| kernels::matmul(dyd, bv, g, m, n, k));
                self.acc(grads, *b, |g| kernels::matmul_at(dyd, av, g, m, n, k));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |g| add_into(g, dyd));
                self.acc(grads, *b, |g| add_into(g, dyd));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |g| add_into(g, dyd));
                self.acc(grads, *b, |g| g.iter_mut().zip(dyd).for_each(|(g, d)| *g -= d));
            }
            Op::AddRow(x, bias) => {
                self.acc(grads, *x, |g| add_into(g, dyd));
                let c = dy.cols();
                self.acc(grads, *bias, |g| {
                    for row in dyd.chunks(c) {
                        add_into(g, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += dyd[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |g| {
                    for i in 0..g.len() {
                        g[i] += dyd[i] * av[i];
                    }
                });
            }
            Op::MulCol(x, s) => {
                let c = dy.cols();
                let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                self.acc(grads, *x, |g| {
                    for (r, (grow, drow)) in g.chunks_mut(c).zip(dyd.chunks(c)).enumerate() {
                        for (gi, di) in grow.iter_mut().zip(drow) {
                            *gi += di * sv[r];
                        }
                    }
                });
                self.acc(grads, *s, |g| {
                    for (r, gr) in g.iter_mut().enumerate() {
                        *gr += kernels::dot(&dyd[r * c..(r + 1) * c], &xv[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::Scale(x, c) => self.acc(grads, *x, |g| g.iter_mut().zip(dyd).for_each(|(g, d)| *g += c * d)),
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |g| {
                    for i in 0..g.len() {
                        g[i] += dyd[i] * kernels::gelu_grad(xv[i]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                self.acc(grads, *x, |g| {
                    for i in 0..g.len() {
                        g[i] += dyd[i] * yv[i] * (1.0 - yv[i]);
                    }
                });
            }
            Op::LogSigmoid(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |g| {
                    for i in 0..g.len() {
                        g[i] += dyd[i] * kernels::sigmoid(-xv[i]);
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = dy.cols();
                let gv = self.value(*gamma).data();
                self.acc(grads, *gamma, |g| {
                    for (drow, hrow) in dyd.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            g[j] += drow[j] * hrow[j];
                        }
                    }
                });
                self.acc(grads, *beta, |g| {
                    for drow in dyd.chunks(c) {
                        add_into(g, drow);
                    }
                });
                self.acc(grads, *x, |g| {
                    let mut dxhat = vec![0.0; c];
                    for (r, grow) in g.chunks_mut(c).enumerate() {
                        let drow = &dyd[r * c..(r + 1) * c];
                        let hrow = &xhat[r * c..(r + 1) * c];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..c {
                            dxhat[j] = drow[j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * hrow[j];
                        }
                        mean_d /= c as f64;
                        mean_dh /= c as f64;
                        for j in 0..c {
                            grow[j] += rstd[r] * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let c = dy.cols();
                let yv = node.value.data();
                self.acc(grads, *x, |g| {
                    for (r, grow) in g.chunks_mut(c).enumerate() {
                        let yrow = &yv[r * c..(r + 1) * c];
                        let drow = &dyd[r * c..(r + 1) * c];
                        let s = kernels::dot(yrow, drow);
                        for j in 0..c {
                            grow[j] += yrow[j] * (drow[j] - s);
                        }
                    }
                });
            }
            Op::Gather { src, rows } => {
                let c = dy.cols();
                self.acc(grads, *src, |g| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut g[r * c..(r + 1) * c], &dyd[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::ScatterAdd { base, x, rows } => {
                let c = dy.cols();
                self.acc(grads, *base, |g| add_into(g, dyd));
                self.acc(grads, *x, |g| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut g[i * c..(i + 1) * c], &dyd[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let len = dy.cols();
                let c = self.value(*x).cols();
                self.acc(grads, *x, |g| {
                    for (r, drow) in dyd.chunks(len).enumerate() {
                        add_into(&mut g[r * c + start..r * c + start + len], drow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = dy.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc(grads, p, |g| {
                        for (r, grow) in g.chunks_mut(w).enumerate() {
                            add_into(grow, &dyd[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, |g| add_into(g, &dyd[offset..offset + n]));
                    offset += n;
                }
            }
            Op::SumRows(x) | Op::MeanRows(x) => {
                let scale = if matches!(node.op, Op::MeanRows(_)) { 1.0 / self.value(*x).rows() as f64 } else { 1.0 };
                let c = dy.cols();
                self.acc(grads, *x, |g| {
                    for grow in g.chunks_mut(c) {
                        for (gi, di) in grow.iter_mut().zip(dyd) {
                            *gi += di * scale;
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let d = dyd[0];
                self.acc(grads, *x, |g| g.iter_mut().for_each(|v| *v += d));
            }
            Op::PickEntries { x, idx } => {
                let c = self.value(*x).cols();
                self.acc(grads, *x, |g| {
                    for (i, &(r, col)) in idx.iter().enumerate() {
                        g[r * c + col] += dyd[i];
                    }
                });
            }
            Op::LogProbPick { logits, specs, probs } => {
                let c = self.value(*logits).cols();
                let d = dyd[0];
                self.acc(grads, *logits, |g| {
                    for (s, p) in specs.iter().zip(probs) {
                        let base = s.row * c;
                        for (j, &pj) in p.iter().enumerate() {
                            g[base + s.lo + j] -= d * s.weight * pj;
                        }
                        g[base + s.target] += d * s.weight;
                    }
                });
            }
            Op::BceWithLogits { logits, labels } => {
                let z = self.value(*logits).data();
                let d = dyd[0];
                self.acc(grads, *logits, |g| {
                    for i in 0..g.len() {
                        g[i] += d * (kernels::sigmoid(z[i]) - labels[i]);
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().expect("initialized").data_mut());
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Mean masked cross-entropy of `logits[T×V]` against `targets`, over the
/// positions where `mask` is true. Targets at masked positions are ignored.
pub fn cross_entropy_from_logits(g: &mut Graph, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let v = g.value(logits).cols();
    let t = g.value(logits).rows();
    if targets.len() != t || mask.len() != t {
        return Err(Error::Dimension(format!(
            "{t} logit rows but {} targets and {} mask entries",
            targets.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Argument("cross-entropy with every position masked".into()));
    }
    let mut specs = Vec::with_capacity(count);
    for (row, (&target, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        if target >= v {
            return Err(Error::Index(format!("target {target} outside vocabulary of {v}")));
        }
        specs.push(PickSpec { row, lo: 0, hi: v, target, weight: -1.0 / count as f64 });
    }
    Ok(g.log_prob_pick(logits, &specs))
}
