//! Append-only computation record with reverse-mode differentiation.

use std::collections::HashMap;

use super::{gemm, mismatch, ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    /// right operand is a single row repeated over every row of the left.
    Row,
    /// right operand is a single column repeated over every column.
    Col,
}

/// Window layout for [`Tape::unfold`]: row index is
/// `(outer * steps + t) * inner + i`, windows run along `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnfoldSpec {
    pub outer: usize,
    pub steps: usize,
    pub inner: usize,
    pub width: usize,
}

enum Op {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    MatMul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    L1(Var, Var),
    Gather(Var, Vec<usize>),
    Unfold(Var, UnfoldSpec),
    Reshape(Var),
    RepeatRows(Var, usize),
    TileRows(Var),
    WeightedSum(Var, Var),
    /// Scalar output whose local derivatives were computed in the forward pass.
    Custom(Vec<(Var, Tensor)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-writer record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<(u64, usize), Var>,
    backward_done: bool,
}

/// Result of [`Tape::backward`]: one optional gradient per node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<(u64, usize), Var>,
}

impl Gradients {
    /// Gradient w.r.t. `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients for every parameter of `store`, in store order; `None` for
    /// parameters that were never bound or do not reach the loss.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        store
            .ids()
            .map(|id| {
                self.params
                    .get(&(store.uid(), id.index()))
                    .and_then(|v| self.grads[v.0].clone())
            })
            .collect()
    }

    pub fn param(&self, store: &ParamStore, id: ParamId) -> Tensor {
        self.params
            .get(&(store.uid(), id.index()))
            .and_then(|v| self.grads[v.0].clone())
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }
}

fn check(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn bcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape() == b.shape() {
        Ok(Bcast::Same)
    } else if b.rows() == 1 && b.numel() == a.cols() {
        Ok(Bcast::Row)
    } else if b.cols() == 1 && b.rows() == a.rows() {
        Ok(Bcast::Col)
    } else {
        Err(mismatch(
            op,
            format!("{:?} with {:?}", a.shape(), b.shape()),
        ))
    }
}

fn zip_bcast(a: &Tensor, b: &Tensor, kind: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let cols = a.cols();
    let bd = b.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let y = match kind {
                Bcast::Same => bd[i],
                Bcast::Row => bd[i % cols],
                Bcast::Col => bd[i / cols],
            };
            f(x, y)
        })
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Reduces a full-shape gradient down to the shape of a broadcast operand.
fn reduce_bcast(g: &Tensor, b: &Tensor, kind: Bcast) -> Tensor {
    match kind {
        Bcast::Same => g.clone(),
        Bcast::Row => {
            let cols = g.cols();
            let mut out = vec![0.0; cols];
            for (i, v) in g.data().iter().enumerate() {
                out[i % cols] += v;
            }
            Tensor::new(b.shape().to_vec(), out).expect("row shape")
        }
        Bcast::Col => {
            let cols = g.cols();
            let out = g.data().chunks(cols).map(|r| r.iter().sum()).collect();
            Tensor::new(b.shape().to_vec(), out).expect("col shape")
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let ng = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, ng)
    }

    /// A differentiable leaf not tied to any parameter store.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the current value of `v` into a fresh constant; gradient does
    /// not flow back through the copy.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Binds a stored parameter as a differentiable leaf. Binding the same
    /// parameter twice returns the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id.index());
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.var(store.get(id).clone());
        self.params.insert(key, v);
        v
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let kind = bcast_kind(name, va, vb)?;
        let out = check(name, zip_bcast(va, vb, kind, f))?;
        Ok(self.derived(out, make(a, b, kind), &[a, b]))
    }

    /// `a + b`; `b` may be a row vector or a column broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul_elementwise", a, b, |x, y| x * y, Op::Mul)
    }

    /// `[.., k] x [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.shape().len() != 2 || va.cols() != vb.shape()[0] {
            return Err(mismatch(
                "matmul",
                format!("{:?} x {:?}", va.shape(), vb.shape()),
            ));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, &mut out, false);
        let mut shape = if va.shape().len() <= 1 {
            vec![]
        } else {
            va.shape()[..va.shape().len() - 1].to_vec()
        };
        if shape.is_empty() {
            shape.push(1);
        }
        shape.push(n);
        let out = check("matmul", Tensor::new(shape, out)?)?;
        Ok(self.derived(out, Op::MatMul(a, b), &[a, b]))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = check(name, self.value(a).map(f))?;
        Ok(self.derived(out, op, &[a]))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    /// Concatenates along the last axis; all inputs must share `rows()`.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| mismatch("concat_last_axis", "no inputs"))?;
        let rows = self.value(*first).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(mismatch("concat_last_axis", "row counts differ"));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data);
        Ok(self.derived(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks inputs along rows; all inputs must share `cols()`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| mismatch("concat_rows", "no inputs"))?;
        let cols = self.value(*first).cols();
        if parts.iter().any(|p| self.value(*p).cols() != cols) {
            return Err(mismatch("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let rows = data.len() / cols;
        let out = Tensor::matrix(rows, cols, data);
        Ok(self.derived(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if len == 0 || start + len > va.rows() {
            return Err(mismatch(
                "slice",
                format!("rows {start}..{} of {}", start + len, va.rows()),
            ));
        }
        let c = va.cols();
        let out = Tensor::matrix(len, c, va.data()[start * c..(start + len) * c].to_vec());
        Ok(self.derived(out, Op::SliceRows(a, start), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        if len == 0 || start + len > va.cols() {
            return Err(mismatch(
                "slice",
                format!("cols {start}..{} of {}", start + len, va.cols()),
            ));
        }
        let rows = va.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&va.row(r)[start..start + len]);
        }
        let out = Tensor::matrix(rows, len, data);
        Ok(self.derived(out, Op::SliceCols(a, start), &[a]))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let c = va.cols();
        let mut data = Vec::with_capacity(va.numel());
        for row in va.data().chunks(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|x| x - lse));
        }
        let out = check(
            "log_softmax_last_axis",
            Tensor::new(va.shape().to_vec(), data)?,
        )?;
        Ok(self.derived(out, Op::LogSoftmax(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = check("sum", Tensor::scalar(self.value(a).sum()))?;
        Ok(self.derived(out, Op::Sum(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let out = check("mean", Tensor::scalar(va.sum() / va.numel() as f64))?;
        Ok(self.derived(out, Op::Mean(a), &[a]))
    }

    /// `sum |a - b|` as a scalar.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(
                "l1_distance",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let d: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        let out = check("l1_distance", Tensor::scalar(d))?;
        Ok(self.derived(out, Op::L1(a, b), &[a, b]))
    }

    /// Selects rows of `a` (embedding lookup, permutation).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let rows = va.rows();
        if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
            return Err(mismatch("gather_rows", format!("index out of {rows} rows")));
        }
        let c = va.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(va.row(i));
        }
        let out = Tensor::matrix(idx.len(), c, data);
        Ok(self.derived(out, Op::Gather(a, idx.to_vec()), &[a]))
    }

    /// Zero-padded sliding windows of odd `width` along the step axis of
    /// `spec`; output row `r` is the concatenation of the window rows.
    pub fn unfold(&mut self, a: Var, spec: UnfoldSpec) -> Result<Var> {
        let va = self.value(a);
        if spec.width % 2 == 0 {
            return Err(mismatch("unfold", "window width must be odd"));
        }
        if va.rows() != spec.outer * spec.steps * spec.inner {
            return Err(mismatch(
                "unfold",
                format!("{} rows vs layout {:?}", va.rows(), spec),
            ));
        }
        let c = va.cols();
        let n = va.rows();
        let mut data = vec![0.0; n * spec.width * c];
        for_each_window(spec, |r, j, src| {
            let dst = r * spec.width * c + j * c;
            data[dst..dst + c].copy_from_slice(va.row(src));
        });
        let out = Tensor::matrix(n, spec.width * c, data);
        Ok(self.derived(out, Op::Unfold(a, spec), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.derived(out, Op::Reshape(a), &[a]))
    }

    /// Each row repeated `times` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let va = self.value(a);
        let c = va.cols();
        let mut data = Vec::with_capacity(va.numel() * times);
        for r in 0..va.rows() {
            for _ in 0..times {
                data.extend_from_slice(va.row(r));
            }
        }
        let out = Tensor::matrix(va.rows() * times, c, data);
        Ok(self.derived(out, Op::RepeatRows(a, times), &[a]))
    }

    /// The whole matrix stacked `times` times.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let va = self.value(a);
        let mut data = Vec::with_capacity(va.numel() * times);
        for _ in 0..times {
            data.extend_from_slice(va.data());
        }
        let out = Tensor::matrix(va.rows() * times, va.cols(), data);
        Ok(self.derived(out, Op::TileRows(a), &[a]))
    }

    /// `weights [B, T]`, `values [B*T, M]` -> `[B, M]` with
    /// `out[b] = sum_t weights[b, t] * values[b*T + t]`.
    pub fn weighted_sum(&mut self, weights: Var, values: Var) -> Result<Var> {
        let (w, v) = (self.value(weights), self.value(values));
        let (b, t) = (w.rows(), w.cols());
        if v.rows() != b * t {
            return Err(mismatch(
                "weighted_sum",
                format!("{:?} with {:?}", w.shape(), v.shape()),
            ));
        }
        let m = v.cols();
        let mut data = vec![0.0; b * m];
        for bi in 0..b {
            let o = &mut data[bi * m..(bi + 1) * m];
            for ti in 0..t {
                let wt = w.at(bi, ti);
                for (x, y) in o.iter_mut().zip(v.row(bi * t + ti)) {
                    *x += wt * y;
                }
            }
        }
        let out = check("weighted_sum", Tensor::matrix(b, m, data))?;
        Ok(self.derived(out, Op::WeightedSum(weights, values), &[weights, values]))
    }

    /// Records a scalar computed outside the tape together with its
    /// derivatives w.r.t. each input.
    pub fn custom_scalar(&mut self, value: f64, locals: Vec<(Var, Tensor)>) -> Result<Var> {
        for (v, g) in &locals {
            if self.value(*v).shape() != g.shape() {
                return Err(mismatch("custom", "local gradient shape"));
            }
        }
        let inputs: Vec<Var> = locals.iter().map(|(v, _)| *v).collect();
        let out = check("custom", Tensor::scalar(value))?;
        Ok(self.derived(out, Op::Custom(locals), &inputs))
    }

    /// Reverse pass from a scalar loss. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let seed = Tensor::full(lv.shape(), 1.0);
        self.backward_done = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(seed);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
            params: self.params.clone(),
        })
    }

    /// Clears the record so it can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.backward_done = false;
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let ng = |v: &Var| self.nodes[v.0].needs_grad;
        let val = |v: &Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, k) | Op::Sub(a, b, k) => {
                if ng(a) {
                    accumulate(grads, *a, g.clone());
                }
                if ng(b) {
                    let mut gb = reduce_bcast(g, val(b), *k);
                    if matches!(node.op, Op::Sub(..)) {
                        gb.scale_assign(-1.0);
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b, k) => {
                let (va, vb) = (val(a), val(b));
                if ng(a) {
                    accumulate(grads, *a, zip_bcast(g, vb, *k, |x, y| x * y));
                }
                if ng(b) {
                    let full = zip_bcast(g, va, Bcast::Same, |x, y| x * y);
                    accumulate(grads, *b, reduce_bcast(&full, vb, *k));
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(a), val(b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if ng(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, vb.data(), true, &mut ga, false);
                    accumulate(
                        grads,
                        *a,
                        Tensor::new(va.shape().to_vec(), ga).expect("shape"),
                    );
                }
                if ng(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), true, g.data(), false, &mut gb, false);
                    accumulate(
                        grads,
                        *b,
                        Tensor::new(vb.shape().to_vec(), gb).expect("shape"),
                    );
                }
            }
            Op::Tanh(a) => {
                let out = &node.value;
                let ga = zip_bcast(g, out, Bcast::Same, |gv, y| gv * (1.0 - y * y));
                accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let out = &node.value;
                let ga = zip_bcast(g, out, Bcast::Same, |gv, y| gv * y * (1.0 - y));
                accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga = zip_bcast(
                    g,
                    val(a),
                    Bcast::Same,
                    |gv, x| if x > 0.0 { gv } else { 0.0 },
                );
                accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = zip_bcast(g, &node.value, Bcast::Same, |gv, y| gv * y);
                accumulate(grads, *a, ga);
            }
            Op::Scale(a, c) => {
                let c = *c;
                accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let pv = val(p);
                    let c = pv.cols();
                    if ng(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(
                                &g.data()[r * total + offset..r * total + offset + c],
                            );
                        }
                        accumulate(
                            grads,
                            *p,
                            Tensor::new(pv.shape().to_vec(), d).expect("shape"),
                        );
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = val(p);
                    let n = pv.numel();
                    if ng(p) {
                        let d = g.data()[offset..offset + n].to_vec();
                        accumulate(
                            grads,
                            *p,
                            Tensor::new(pv.shape().to_vec(), d).expect("shape"),
                        );
                    }
                    offset += n;
                }
            }
            Op::SliceRows(a, start) => {
                let va = val(a);
                let c = va.cols();
                let mut d = vec![0.0; va.numel()];
                d[start * c..start * c + g.numel()].copy_from_slice(g.data());
                accumulate(
                    grads,
                    *a,
                    Tensor::new(va.shape().to_vec(), d).expect("shape"),
                );
            }
            Op::SliceCols(a, start) => {
                let va = val(a);
                let (c, len) = (va.cols(), g.cols());
                let mut d = vec![0.0; va.numel()];
                for r in 0..va.rows() {
                    d[r * c + start..r * c + start + len].copy_from_slice(g.row(r));
                }
                accumulate(
                    grads,
                    *a,
                    Tensor::new(va.shape().to_vec(), d).expect("shape"),
                );
            }
            Op::LogSoftmax(a) => {
                let out = &node.value;
                let c = out.cols();
                let mut d = Vec::with_capacity(out.numel());
                for (grow, orow) in g.data().chunks(c).zip(out.data().chunks(c)) {
                    let gs: f64 = grow.iter().sum();
                    d.extend(grow.iter().zip(orow).map(|(gv, y)| gv - y.exp() * gs));
                }
                accumulate(
                    grads,
                    *a,
                    Tensor::new(out.shape().to_vec(), d).expect("shape"),
                );
            }
            Op::Sum(a) => {
                accumulate(grads, *a, Tensor::full(val(a).shape(), g.item()));
            }
            Op::Mean(a) => {
                let va = val(a);
                accumulate(
                    grads,
                    *a,
                    Tensor::full(va.shape(), g.item() / va.numel() as f64),
                );
            }
            Op::L1(a, b) => {
                let s = g.item();
                let sign = zip_bcast(val(a), val(b), Bcast::Same, |x, y| {
                    if x > y {
                        s
                    } else if x < y {
                        -s
                    } else {
                        0.0
                    }
                });
                if ng(b) {
                    accumulate(grads, *b, sign.map(|x| -x));
                }
                if ng(a) {
                    accumulate(grads, *a, sign);
                }
            }
            Op::Gather(a, idx) => {
                let va = val(a);
                let c = va.cols();
                let mut d = vec![0.0; va.numel()];
                for (r, &src) in idx.iter().enumerate() {
                    for (x, y) in d[src * c..(src + 1) * c].iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
                accumulate(
                    grads,
                    *a,
                    Tensor::new(va.shape().to_vec(), d).expect("shape"),
                );
            }
            Op::Unfold(a, spec) => {
                let va = val(a);
                let c = va.cols();
                let mut d = vec![0.0; va.numel()];
                let gd = g.data();
                for_each_window(*spec, |r, j, src| {
                    let from = r * spec.width * c + j * c;
                    for (x, y) in d[src * c..(src + 1) * c]
                        .iter_mut()
                        .zip(&gd[from..from + c])
                    {
                        *x += y;
                    }
                });
                accumulate(
                    grads,
                    *a,
                    Tensor::new(va.shape().to_vec(), d).expect("shape"),
                );
            }
            Op::Reshape(a) => {
                let ga = g.clone().reshaped(val(a).shape()).expect("reshape back");
                accumulate(grads, *a, ga);
            }
            Op::RepeatRows(a, times) => {
                let va = val(a);
                let c = va.cols();
                let mut d = vec![0.0; va.numel()];
                for (r, row) in g.data().chunks(c).enumerate() {
                    let dst = r / times;
                    for (x, y) in d[dst * c..(dst + 1) * c].iter_mut().zip(row) {
                        *x += y;
                    }
                }
                accumulate(
                    grads,
                    *a,
                    Tensor::new(va.shape().to_vec(), d).expect("shape"),
                );
            }
            Op::TileRows(a) => {
                let va = val(a);
                let n = va.numel();
                let mut d = vec![0.0; n];
                for chunk in g.data().chunks(n) {
                    for (x, y) in d.iter_mut().zip(chunk) {
                        *x += y;
                    }
                }
                accumulate(
                    grads,
                    *a,
                    Tensor::new(va.shape().to_vec(), d).expect("shape"),
                );
            }
            Op::WeightedSum(w, v) => {
                let (wv, vv) = (val(w), val(v));
                let (b, t, m) = (wv.rows(), wv.cols(), vv.cols());
                if ng(w) {
                    let mut d = vec![0.0; b * t];
                    for bi in 0..b {
                        for ti in 0..t {
                            d[bi * t + ti] = g
                                .row(bi)
                                .iter()
                                .zip(vv.row(bi * t + ti))
                                .map(|(x, y)| x * y)
                                .sum();
                        }
                    }
                    accumulate(
                        grads,
                        *w,
                        Tensor::new(wv.shape().to_vec(), d).expect("shape"),
                    );
                }
                if ng(v) {
                    let mut d = vec![0.0; b * t * m];
                    for bi in 0..b {
                        for ti in 0..t {
                            let wt = wv.at(bi, ti);
                            let dst = &mut d[(bi * t + ti) * m..(bi * t + ti + 1) * m];
                            for (x, y) in dst.iter_mut().zip(g.row(bi)) {
                                *x = wt * y;
                            }
                        }
                    }
                    accumulate(
                        grads,
                        *v,
                        Tensor::new(vv.shape().to_vec(), d).expect("shape"),
                    );
                }
            }
            Op::Custom(locals) => {
                let s = g.item();
                for (v, local) in locals {
                    if ng(v) {
                        accumulate(grads, *v, local.map(|x| x * s));
                    }
                }
            }
        }
    }
}

/// Calls `f(out_row, window_slot, src_row)` for every in-range window entry.
fn for_each_window(spec: UnfoldSpec, mut f: impl FnMut(usize, usize, usize)) {
    let half = spec.width / 2;
    for o in 0..spec.outer {
        for t in 0..spec.steps {
            for i in 0..spec.inner {
                let r = (o * spec.steps + t) * spec.inner + i;
                for j in 0..spec.width {
                    let st = t as isize + j as isize - half as isize;
                    if st < 0 || st >= spec.steps as isize {
                        continue;
                    }
                    let src = (o * spec.steps + st as usize) * spec.inner + i;
                    f(r, j, src);
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
