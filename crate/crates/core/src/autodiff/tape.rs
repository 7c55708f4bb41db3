use std::collections::HashMap;
use std::sync::Arc;

use super::params::{GradBuffer, ParamId, ParameterStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Arc<[usize]>),
    ScatterAdd {
        x: Var,
        src: Arc<[usize]>,
        dst: Arc<[usize]>,
    },
    SegmentSum(Var, Arc<[usize]>),
    SegmentMean(Var, Arc<[usize]>),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    MeanRows(Var),
    SumCols(Var),
    Softmax(Var),
    LogSoftmax(Var),
    PairwiseSqDist(Var, Var),
    PickCols(Var, Arc<[usize]>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-threaded record of executed primitives for reverse-mode
/// differentiation. Nodes are appended in execution order, which is a
/// topological order by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    kink_tracking: bool,
    kink_signature: u64,
    kink_zeros: usize,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

fn check_ptr(op: &'static str, ptr: &[usize], rows: usize) -> Result<()> {
    let ok = !ptr.is_empty()
        && ptr[0] == 0
        && *ptr.last().unwrap() == rows
        && ptr.windows(2).all(|w| w[0] <= w[1]);
    if ok {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "{op}: segment offsets do not partition {rows} rows"
        )))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a fingerprint of every relu activation pattern so a
    /// finite-difference probe can tell when it straddles a kink.
    pub fn track_kinks(&mut self, on: bool) {
        self.kink_tracking = on;
    }

    pub fn kink_signature(&self) -> (u64, usize) {
        (self.kink_signature, self.kink_zeros)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.kink_signature = 0;
        self.kink_zeros = 0;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericFault(name.to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    /// Loads a parameter onto the tape. Repeated loads of the same parameter
    /// return the same variable.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let v = self.push("param", store.value(id).clone(), Op::Param(id), true)?;
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn param_named(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        let id = store.require(name)?;
        self.param(store, id)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(dim_err("matmul", ta, tb));
        }
        let mut out = Tensor::zeros(ta.rows(), tb.cols());
        gemm(ta, false, tb, false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", out, Op::MatMul(a, b), rg)
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(dim_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_vec(ta.rows(), ta.cols(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(name, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        x: Var,
        r: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(r));
        if tr.rows() != 1 || tr.cols() != tx.cols() {
            return Err(dim_err(name, tx, tr));
        }
        let mut out = tx.clone();
        let rv = tr.data();
        for row in 0..out.rows() {
            for (o, &b) in out.row_slice_mut(row).iter_mut().zip(rv) {
                *o = f(*o, b);
            }
        }
        let rg = self.rg(x) || self.rg(r);
        self.push(name, out, op, rg)
    }

    /// `x + r` with the `1 × n` row `r` broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, r, Op::AddRow(x, r), |a, b| a + b)
    }

    /// `x ⊙ r` with the `1 × n` row `r` broadcast over every row of `x`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, r, Op::MulRow(x, r), |a, b| a * b)
    }

    /// Multiplies `x` by the `1 × 1` variable `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        if ts.len() != 1 {
            return Err(dim_err("scale_by", tx, ts));
        }
        let k = ts.item();
        let out = tx.map(|v| v * k);
        let rg = self.rg(x) || self.rg(s);
        self.push("scale_by", out, Op::ScaleBy(x, s), rg)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * k);
        let rg = self.rg(x);
        self.push("scale", out, Op::Scale(x, k), rg)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + k);
        let rg = self.rg(x);
        self.push("add_scalar", out, Op::AddScalar(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if self.kink_tracking {
            let mut h = self.kink_signature;
            let mut zeros = 0;
            for &v in t.data() {
                let state: u64 = if v > 0.0 {
                    1
                } else if v == 0.0 {
                    zeros += 1;
                    2
                } else {
                    3
                };
                h = (h ^ state).wrapping_mul(0x0000_0100_0000_01b3);
            }
            self.kink_signature = h;
            self.kink_zeros += zeros;
        }
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push("relu", out, Op::Relu(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        let rg = self.rg(x);
        self.push("exp", out, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::ln);
        let rg = self.rg(x);
        self.push("log", out, Op::Log(x), rg)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::sqrt);
        let rg = self.rg(x);
        self.push("sqrt", out, Op::Sqrt(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push("square", out, Op::Square(x), rg)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &x in xs {
            let t = self.value(x);
            if t.rows() != rows {
                return Err(dim_err("concat_cols", self.value(first), t));
            }
            cols += t.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &x in xs {
            let t = &self.nodes[x.0].value;
            let c = t.cols();
            for r in 0..rows {
                out.row_slice_mut(r)[off..off + c].copy_from_slice(t.row_slice(r));
            }
            off += c;
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push("concat_cols", out, Op::ConcatCols(xs.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let t = self.value(x);
            if t.cols() != cols {
                return Err(dim_err("concat_rows", self.value(first), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push("concat_rows", out, Op::ConcatRows(xs.to_vec()), rg)
    }

    /// Row selection: output row `i` is row `idx[i]` of `x`.
    pub fn gather(&mut self, x: Var, idx: impl Into<Arc<[usize]>>) -> Result<Var> {
        let idx: Arc<[usize]> = idx.into();
        let t = self.value(x);
        let mut out = Tensor::zeros(idx.len(), t.cols());
        for (i, &r) in idx.iter().enumerate() {
            if r >= t.rows() {
                return Err(Error::Contract(format!(
                    "gather: row {r} out of range for {} rows",
                    t.rows()
                )));
            }
            out.row_slice_mut(i).copy_from_slice(t.row_slice(r));
        }
        let rg = self.rg(x);
        self.push("gather", out, Op::Gather(x, idx), rg)
    }

    /// `out[dst[e]] += x[src[e]]` for every edge `e`; `out` has `n_out` rows.
    pub fn scatter_add(
        &mut self,
        x: Var,
        src: impl Into<Arc<[usize]>>,
        dst: impl Into<Arc<[usize]>>,
        n_out: usize,
    ) -> Result<Var> {
        let (src, dst): (Arc<[usize]>, Arc<[usize]>) = (src.into(), dst.into());
        if src.len() != dst.len() {
            return Err(Error::Dimension {
                op: "scatter_add",
                lhs: vec![src.len()],
                rhs: vec![dst.len()],
            });
        }
        let t = self.value(x);
        let c = t.cols();
        let mut out = Tensor::zeros(n_out, c);
        for (&s, &d) in src.iter().zip(dst.iter()) {
            if s >= t.rows() || d >= n_out {
                return Err(Error::Contract(format!(
                    "scatter_add: edge {s}->{d} out of range"
                )));
            }
            let (o, i) = (out.row_slice_mut(d), t.row_slice(s));
            for k in 0..c {
                o[k] += i[k];
            }
        }
        let rg = self.rg(x);
        self.push("scatter_add", out, Op::ScatterAdd { x, src, dst }, rg)
    }

    fn segment_reduce(&self, op: &'static str, x: Var, ptr: &[usize], mean: bool) -> Result<Tensor> {
        let t = self.value(x);
        check_ptr(op, ptr, t.rows())?;
        let g = ptr.len() - 1;
        let c = t.cols();
        let mut out = Tensor::zeros(g, c);
        for s in 0..g {
            let o = out.row_slice_mut(s);
            for r in ptr[s]..ptr[s + 1] {
                for (a, b) in o.iter_mut().zip(t.row_slice(r)) {
                    *a += b;
                }
            }
            let n = ptr[s + 1] - ptr[s];
            if mean && n > 0 {
                let inv = 1.0 / n as f64;
                o.iter_mut().for_each(|a| *a *= inv);
            }
        }
        Ok(out)
    }

    /// Sums contiguous row segments `ptr[s]..ptr[s+1]`.
    pub fn segment_sum(&mut self, x: Var, ptr: impl Into<Arc<[usize]>>) -> Result<Var> {
        let ptr: Arc<[usize]> = ptr.into();
        let out = self.segment_reduce("segment_sum", x, &ptr, false)?;
        let rg = self.rg(x);
        self.push("segment_sum", out, Op::SegmentSum(x, ptr), rg)
    }

    /// Averages contiguous row segments; an empty segment yields zeros.
    pub fn segment_mean(&mut self, x: Var, ptr: impl Into<Arc<[usize]>>) -> Result<Var> {
        let ptr: Arc<[usize]> = ptr.into();
        let out = self.segment_reduce("segment_mean", x, &ptr, true)?;
        let rg = self.rg(x);
        self.push("segment_mean", out, Op::SegmentMean(x, ptr), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push("sum", Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::Contract("mean of empty tensor".into()));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        self.push("mean", Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// Sum over axis 0: `m × n → 1 × n`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let mut out = Tensor::zeros(1, t.cols());
        for r in 0..t.rows() {
            out.data_mut().iter_mut().zip(t.row_slice(r)).for_each(|(a, b)| *a += b);
        }
        let rg = self.rg(x);
        self.push("sum_rows", out, Op::SumRows(x), rg)
    }

    /// Mean over axis 0: `m × n → 1 × n`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rows() == 0 {
            return Err(Error::Contract("mean_rows of zero rows".into()));
        }
        let mut out = Tensor::zeros(1, t.cols());
        for r in 0..t.rows() {
            out.data_mut().iter_mut().zip(t.row_slice(r)).for_each(|(a, b)| *a += b);
        }
        out.scale_assign(1.0 / t.rows() as f64);
        let rg = self.rg(x);
        self.push("mean_rows", out, Op::MeanRows(x), rg)
    }

    /// Sum over axis 1: `m × n → m × 1`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
        let out = Tensor::from_vec(t.rows(), 1, data)?;
        let rg = self.rg(x);
        self.push("sum_cols", out, Op::SumCols(x), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if !t.is_finite() {
            return Err(Error::NumericFault("softmax input".into()));
        }
        let mut out = t.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_slice_mut(r));
        }
        let rg = self.rg(x);
        self.push("softmax", out, Op::Softmax(x), rg)
    }

    /// Row-wise log-softmax, `x - max - ln Σ exp(x - max)`.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let mut out = t.clone();
        for r in 0..out.rows() {
            let row = out.row_slice_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v = *v - m - lse);
        }
        let rg = self.rg(x);
        self.push("log_softmax", out, Op::LogSoftmax(x), rg)
    }

    /// `out[i][j] = ‖a_i − b_j‖²` for `a: m × d`, `b: n × d`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(dim_err("pairwise_sq_dist", ta, tb));
        }
        let mut out = Tensor::zeros(ta.rows(), tb.rows());
        for i in 0..ta.rows() {
            let ai = ta.row_slice(i);
            for j in 0..tb.rows() {
                let d = ai
                    .iter()
                    .zip(tb.row_slice(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                out.set(i, j, d);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push("pairwise_sq_dist", out, Op::PairwiseSqDist(a, b), rg)
    }

    /// Picks `x[i][idx[i]]` for each row: `m × n → m × 1`.
    pub fn pick_cols(&mut self, x: Var, idx: impl Into<Arc<[usize]>>) -> Result<Var> {
        let idx: Arc<[usize]> = idx.into();
        let t = self.value(x);
        if idx.len() != t.rows() || idx.iter().any(|&c| c >= t.cols()) {
            return Err(Error::Contract(format!(
                "pick_cols: {} indices for a {:?} tensor",
                idx.len(),
                t.shape()
            )));
        }
        let data = idx.iter().enumerate().map(|(r, &c)| t.get(r, c)).collect();
        let out = Tensor::from_vec(t.rows(), 1, data)?;
        let rg = self.rg(x);
        self.push("pick_cols", out, Op::PickCols(x, idx), rg)
    }

    /// Per-segment population standard deviation, `sqrt(var + eps)`, with
    /// the segment statistics broadcast back through `row_segment`.
    pub fn segment_std(
        &mut self,
        x: Var,
        ptr: &Arc<[usize]>,
        row_segment: &Arc<[usize]>,
        eps: f64,
    ) -> Result<Var> {
        let mu = self.segment_mean(x, ptr.clone())?;
        let mu_rows = self.gather(mu, row_segment.clone())?;
        let centered = self.sub(x, mu_rows)?;
        let sq = self.square(centered)?;
        let var = self.segment_mean(sq, ptr.clone())?;
        let var = self.add_scalar(var, eps)?;
        self.sqrt(var)
    }

    /// Backpropagates from the scalar `loss`, accumulating into the store's
    /// gradient slots. Clears the tape.
    pub fn backward(&mut self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        let mut buf = GradBuffer::zeros_like(store);
        self.backward_into(loss, &mut buf)?;
        store.accumulate(&buf);
        Ok(())
    }

    /// Backpropagates from the scalar `loss` into `buffer` (`+=`). Clears the tape.
    pub fn backward_into(&mut self, loss: Var, buffer: &mut GradBuffer) -> Result<()> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, g, &mut grads, buffer)?;
        }
        self.clear();
        Ok(())
    }

    fn propagate(
        &self,
        i: usize,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        buffer: &mut GradBuffer,
    ) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let acc = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| match &mut grads[v.0] {
            Some(e) => e.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                buffer.get_mut(*id).add_assign(&g);
            }
            Op::MatMul(a, b) => {
                if need(*a) {
                    let mut ga = Tensor::zeros(val(*a).rows(), val(*a).cols());
                    gemm(&g, false, val(*b), true, &mut ga, false);
                    acc(*a, ga, grads);
                }
                if need(*b) {
                    let mut gb = Tensor::zeros(val(*b).rows(), val(*b).cols());
                    gemm(val(*a), true, &g, false, &mut gb, false);
                    acc(*b, gb, grads);
                }
            }
            Op::Add(a, b) => {
                if need(*a) {
                    acc(*a, g.clone(), grads);
                }
                if need(*b) {
                    acc(*b, g, grads);
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    acc(*a, g.clone(), grads);
                }
                if need(*b) {
                    acc(*b, g.map(|v| -v), grads);
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    acc(*a, zip(&g, val(*b), |x, y| x * y), grads);
                }
                if need(*b) {
                    acc(*b, zip(&g, val(*a), |x, y| x * y), grads);
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if need(*a) {
                    acc(*a, zip(&g, tb, |x, y| x / y), grads);
                }
                if need(*b) {
                    let data = g
                        .data()
                        .iter()
                        .zip(ta.data().iter().zip(tb.data()))
                        .map(|(gv, (av, bv))| -gv * av / (bv * bv))
                        .collect();
                    acc(*b, Tensor::from_vec(tb.rows(), tb.cols(), data)?, grads);
                }
            }
            Op::AddRow(x, r) => {
                if need(*r) {
                    acc(*r, col_sums(&g), grads);
                }
                if need(*x) {
                    acc(*x, g, grads);
                }
            }
            Op::MulRow(x, r) => {
                let (tx, tr) = (val(*x), val(*r));
                if need(*x) {
                    let mut gx = g.clone();
                    for row in 0..gx.rows() {
                        gx.row_slice_mut(row)
                            .iter_mut()
                            .zip(tr.data())
                            .for_each(|(a, b)| *a *= b);
                    }
                    acc(*x, gx, grads);
                }
                if need(*r) {
                    acc(*r, col_sums(&zip(&g, tx, |a, b| a * b)), grads);
                }
            }
            Op::ScaleBy(x, s) => {
                let k = val(*s).item();
                if need(*x) {
                    acc(*x, g.map(|v| v * k), grads);
                }
                if need(*s) {
                    let d: f64 = g.data().iter().zip(val(*x).data()).map(|(a, b)| a * b).sum();
                    acc(*s, Tensor::scalar(d), grads);
                }
            }
            Op::Scale(x, k) => acc(*x, g.map(|v| v * k), grads),
            Op::AddScalar(x) => acc(*x, g, grads),
            Op::Relu(x) => {
                // Subgradient 0 at exactly 0.
                acc(*x, zip(&g, val(*x), |a, b| if b > 0.0 { a } else { 0.0 }), grads)
            }
            Op::Exp(x) => acc(*x, zip(&g, &node.value, |a, y| a * y), grads),
            Op::Log(x) => acc(*x, zip(&g, val(*x), |a, b| a / b), grads),
            Op::Sqrt(x) => acc(*x, zip(&g, &node.value, |a, y| a * 0.5 / y), grads),
            Op::Square(x) => acc(*x, zip(&g, val(*x), |a, b| 2.0 * a * b), grads),
            Op::ConcatCols(xs) => {
                let mut off = 0;
                for &x in xs {
                    let c = val(x).cols();
                    if need(x) {
                        let mut gx = Tensor::zeros(g.rows(), c);
                        for r in 0..g.rows() {
                            gx.row_slice_mut(r).copy_from_slice(&g.row_slice(r)[off..off + c]);
                        }
                        acc(x, gx, grads);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let t = val(x);
                    let n = t.len();
                    if need(x) {
                        let gx = Tensor::from_vec(t.rows(), t.cols(), g.data()[off..off + n].to_vec())?;
                        acc(x, gx, grads);
                    }
                    off += n;
                }
            }
            Op::Gather(x, idx) => {
                let t = val(*x);
                let mut gx = Tensor::zeros(t.rows(), t.cols());
                for (i, &r) in idx.iter().enumerate() {
                    gx.row_slice_mut(r)
                        .iter_mut()
                        .zip(g.row_slice(i))
                        .for_each(|(a, b)| *a += b);
                }
                acc(*x, gx, grads);
            }
            Op::ScatterAdd { x, src, dst } => {
                let t = val(*x);
                let mut gx = Tensor::zeros(t.rows(), t.cols());
                for (&s, &d) in src.iter().zip(dst.iter()) {
                    gx.row_slice_mut(s)
                        .iter_mut()
                        .zip(g.row_slice(d))
                        .for_each(|(a, b)| *a += b);
                }
                acc(*x, gx, grads);
            }
            Op::SegmentSum(x, ptr) | Op::SegmentMean(x, ptr) => {
                let mean = matches!(node.op, Op::SegmentMean(..));
                let t = val(*x);
                let mut gx = Tensor::zeros(t.rows(), t.cols());
                for s in 0..ptr.len() - 1 {
                    let n = ptr[s + 1] - ptr[s];
                    let k = if mean && n > 0 { 1.0 / n as f64 } else { 1.0 };
                    for r in ptr[s]..ptr[s + 1] {
                        gx.row_slice_mut(r)
                            .iter_mut()
                            .zip(g.row_slice(s))
                            .for_each(|(a, b)| *a = b * k);
                    }
                }
                acc(*x, gx, grads);
            }
            Op::SumAll(x) => {
                let t = val(*x);
                acc(*x, Tensor::filled(t.rows(), t.cols(), g.item()), grads);
            }
            Op::MeanAll(x) => {
                let t = val(*x);
                let k = g.item() / t.len() as f64;
                acc(*x, Tensor::filled(t.rows(), t.cols(), k), grads);
            }
            Op::SumRows(x) | Op::MeanRows(x) => {
                let t = val(*x);
                let k = if matches!(node.op, Op::MeanRows(_)) {
                    1.0 / t.rows() as f64
                } else {
                    1.0
                };
                let mut gx = Tensor::zeros(t.rows(), t.cols());
                for r in 0..t.rows() {
                    gx.row_slice_mut(r)
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, b)| *a = b * k);
                }
                acc(*x, gx, grads);
            }
            Op::SumCols(x) => {
                let t = val(*x);
                let mut gx = Tensor::zeros(t.rows(), t.cols());
                for r in 0..t.rows() {
                    let k = g.get(r, 0);
                    gx.row_slice_mut(r).iter_mut().for_each(|a| *a = k);
                }
                acc(*x, gx, grads);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (yv, gv)) in gx.row_slice_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(*x, gx, grads);
            }
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let mut gx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                    let gsum: f64 = gr.iter().sum();
                    for (o, (yv, gv)) in gx.row_slice_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = gv - yv.exp() * gsum;
                    }
                }
                acc(*x, gx, grads);
            }
            Op::PairwiseSqDist(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let d = ta.cols();
                let mut ga = Tensor::zeros(ta.rows(), d);
                let mut gb = Tensor::zeros(tb.rows(), d);
                for i in 0..ta.rows() {
                    for j in 0..tb.rows() {
                        let k = 2.0 * g.get(i, j);
                        if k == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            let diff = k * (ta.get(i, c) - tb.get(j, c));
                            ga.data_mut()[i * d + c] += diff;
                            gb.data_mut()[j * d + c] -= diff;
                        }
                    }
                }
                if need(*a) {
                    acc(*a, ga, grads);
                }
                if need(*b) {
                    acc(*b, gb, grads);
                }
            }
            Op::PickCols(x, idx) => {
                let t = val(*x);
                let mut gx = Tensor::zeros(t.rows(), t.cols());
                for (r, &c) in idx.iter().enumerate() {
                    gx.set(r, c, g.get(r, 0));
                }
                acc(*x, gx, grads);
            }
        }
        Ok(())
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("zip of equal shapes")
}

fn col_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        out.data_mut().iter_mut().zip(g.row_slice(r)).for_each(|(a, b)| *a += b);
    }
    out
}

/// Stable in-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}
