//! Define-by-run reverse-mode differentiation over dense 2-D matrices.
//!
//! Trainable values live in a [`ParamStore`]. A forward pass records onto a
//! fresh [`Tape`]; [`Tape::backward`] walks the tape in reverse creation order
//! (which is a topological order) and [`Gradients::accumulate_into`] adds the
//! parameter gradients to the store. Nothing is differentiated through nodes
//! that do not depend on a parameter or a grad-requiring leaf.
//!
//! There is no implicit broadcasting. Row-wise scaling and bias addition have
//! their own ops.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::matrix::{gemm, gemm_into, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Matrix,
    pub grad: Matrix,
}

/// Named parameters in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name `{name}`");
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].grad
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Linear { x: Var, w: Var, b: Var },
    Concat(Var, Var),
    MeanRows(Var),
    SumAll(Var),
    Log(Var),
    Exp(Var),
    Relu(Var),
    Sqrt(Var),
    PoolRows(Var, usize),
    ScaleRows { x: Var, s: Var },
    Column(Var, usize),
    CrossEntropy { logits: Var, label: usize },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> Error {
    Error::Shape {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that is never differentiated.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A free-standing value whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Brings a stored parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = gemm(self.value(a), false, self.value(b), false)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.value(a), self.value(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// `x · w + b` with `b` (1×out) added to every row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != wv.rows() {
            return Err(shape_err("linear", xv, wv));
        }
        if bv.shape() != (1, wv.cols()) {
            return Err(shape_err("linear bias", wv, bv));
        }
        let mut out = Matrix::zeros(xv.rows(), wv.cols());
        for r in 0..out.rows() {
            out.row_mut(r).copy_from_slice(bv.row(0));
        }
        gemm_into(1.0, xv, false, wv, false, 1.0, &mut out);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    /// `[a, b]` along the feature (column) axis.
    pub fn concat_last_axis(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hcat(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    /// Column means as a 1×D row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.rows() as f64;
        let out = Matrix::from_fn(1, x.cols(), |_, c| (0..x.rows()).map(|r| x.get(r, c)).sum::<f64>() / n);
        let rg = self.rg(&[a]);
        self.push(out, Op::MeanRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::filled(1, 1, self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::SumAll(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        self.push(out, Op::Log(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::sqrt);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sqrt(a), rg)
    }

    /// Non-overlapping mean over runs of `ratio` consecutive rows.
    pub fn pool_rows(&mut self, a: Var, ratio: usize) -> Result<Var> {
        let x = self.value(a);
        if ratio == 0 || x.rows() % ratio != 0 {
            return Err(Error::FrameRate {
                frames: x.rows(),
                target: if ratio == 0 { 0 } else { x.rows() / ratio },
            });
        }
        let mut out = Matrix::zeros(x.rows() / ratio, x.cols());
        for t in 0..out.rows() {
            let dst = out.row_mut(t);
            for r in 0..ratio {
                for (d, s) in dst.iter_mut().zip(x.row(t * ratio + r)) {
                    *d += s;
                }
            }
            dst.iter_mut().for_each(|d| *d /= ratio as f64);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::PoolRows(a, ratio), rg))
    }

    /// Multiplies row `t` of `x` (T×D) by `s[t]` (s is T×1).
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        if sv.shape() != (xv.rows(), 1) {
            return Err(shape_err("scale_rows", xv, sv));
        }
        let mut out = xv.clone();
        for t in 0..out.rows() {
            let k = sv.get(t, 0);
            out.row_mut(t).iter_mut().for_each(|v| *v *= k);
        }
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::ScaleRows { x, s }, rg))
    }

    /// Column `j` as a T×1 matrix.
    pub fn column(&mut self, a: Var, j: usize) -> Var {
        let out = self.value(a).columns(j, j + 1);
        let rg = self.rg(&[a]);
        self.push(out, Op::Column(a, j), rg)
    }

    /// `-log softmax(logits)[label]` for a 1×C row, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits);
        if z.rows() != 1 {
            return Err(Error::InvalidParam(format!(
                "cross_entropy expects a single row of logits, got {:?}",
                z.shape()
            )));
        }
        if label >= z.cols() {
            return Err(Error::InvalidLabel(format!("{label} for {} classes", z.cols())));
        }
        let row = z.row(0);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let out = Matrix::filled(1, 1, lse - row[label]);
        let rg = self.rg(&[logits]);
        Ok(self.push(out, Op::CrossEntropy { logits, label }, rg))
    }

    /// Reverse sweep from a 1×1 `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match node.op {
            Op::Constant | Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if wants(a) {
                    let slot = slot(grads, a, val(a));
                    gemm_into(1.0, g, false, val(b), true, 1.0, slot);
                }
                if wants(b) {
                    let slot = slot(grads, b, val(b));
                    gemm_into(1.0, val(a), true, g, false, 1.0, slot);
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    slot(grads, a, g).axpy(1.0, g);
                }
                if wants(b) {
                    slot(grads, b, g).axpy(1.0, g);
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    slot(grads, a, g).axpy(1.0, g);
                }
                if wants(b) {
                    slot(grads, b, g).axpy(-1.0, g);
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    let d = g.zip_map(val(b), |x, y| x * y);
                    slot(grads, a, g).axpy(1.0, &d);
                }
                if wants(b) {
                    let d = g.zip_map(val(a), |x, y| x * y);
                    slot(grads, b, g).axpy(1.0, &d);
                }
            }
            Op::Scale(a, c) => slot(grads, a, g).axpy(c, g),
            Op::AddScalar(a) => slot(grads, a, g).axpy(1.0, g),
            Op::Transpose(a) => {
                let gt = g.transpose();
                slot(grads, a, &gt).axpy(1.0, &gt);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let ga = slot(grads, a, y);
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((o, &p), &q) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o += p * (q - dot);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                if wants(x) {
                    let slot = slot(grads, x, val(x));
                    gemm_into(1.0, g, false, val(w), true, 1.0, slot);
                }
                if wants(w) {
                    let slot = slot(grads, w, val(w));
                    gemm_into(1.0, val(x), true, g, false, 1.0, slot);
                }
                if wants(b) {
                    let gb = slot(grads, b, val(b));
                    for r in 0..g.rows() {
                        for (o, v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let split = val(a).cols();
                if wants(a) {
                    let part = g.columns(0, split);
                    slot(grads, a, &part).axpy(1.0, &part);
                }
                if wants(b) {
                    let part = g.columns(split, g.cols());
                    slot(grads, b, &part).axpy(1.0, &part);
                }
            }
            Op::MeanRows(a) => {
                let x = val(a);
                let n = x.rows() as f64;
                let ga = slot(grads, a, x);
                for r in 0..x.rows() {
                    for (o, v) in ga.row_mut(r).iter_mut().zip(g.row(0)) {
                        *o += v / n;
                    }
                }
            }
            Op::SumAll(a) => {
                let s = g.get(0, 0);
                let ga = slot(grads, a, val(a));
                ga.as_mut_slice().iter_mut().for_each(|o| *o += s);
            }
            Op::Log(a) => {
                let d = g.zip_map(val(a), |q, x| q / x);
                slot(grads, a, &d).axpy(1.0, &d);
            }
            Op::Exp(a) => {
                let d = g.zip_map(&node.value, |q, y| q * y);
                slot(grads, a, &d).axpy(1.0, &d);
            }
            Op::Relu(a) => {
                let d = g.zip_map(val(a), |q, x| if x > 0.0 { q } else { 0.0 });
                slot(grads, a, &d).axpy(1.0, &d);
            }
            Op::Sqrt(a) => {
                let d = g.zip_map(&node.value, |q, y| q / (2.0 * y));
                slot(grads, a, &d).axpy(1.0, &d);
            }
            Op::PoolRows(a, ratio) => {
                let x = val(a);
                let ga = slot(grads, a, x);
                for r in 0..x.rows() {
                    for (o, v) in ga.row_mut(r).iter_mut().zip(g.row(r / ratio)) {
                        *o += v / ratio as f64;
                    }
                }
            }
            Op::ScaleRows { x, s } => {
                let (xv, sv) = (val(x), val(s));
                if wants(x) {
                    let gx = slot(grads, x, xv);
                    for t in 0..xv.rows() {
                        let k = sv.get(t, 0);
                        for (o, v) in gx.row_mut(t).iter_mut().zip(g.row(t)) {
                            *o += k * v;
                        }
                    }
                }
                if wants(s) {
                    let gs = slot(grads, s, sv);
                    for t in 0..xv.rows() {
                        let dot: f64 = xv.row(t).iter().zip(g.row(t)).map(|(p, q)| p * q).sum();
                        gs.as_mut_slice()[t] += dot;
                    }
                }
            }
            Op::Column(a, j) => {
                let x = val(a);
                let ga = slot(grads, a, x);
                for r in 0..x.rows() {
                    ga.row_mut(r)[j] += g.get(r, 0);
                }
            }
            Op::CrossEntropy { logits, label } => {
                let z = val(logits);
                let s = g.get(0, 0);
                let row = z.row(0);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
                let gz = slot(grads, logits, z);
                for (c, o) in gz.row_mut(0).iter_mut().enumerate() {
                    let p = (row[c] - m).exp() / denom;
                    *o += s * (p - if c == label { 1.0 } else { 0.0 });
                }
            }
        }
    }
}

/// Gradient slot for `v`, allocated as zeros shaped like `like` on first use.
fn slot<'a>(grads: &'a mut [Option<Matrix>], v: Var, like: &Matrix) -> &'a mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(like.rows(), like.cols()))
}

/// Result of one reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` was reached.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds every parameter gradient on `tape` into `store`.
    pub fn accumulate_into(&self, tape: &Tape, store: &mut ParamStore) {
        for (i, node) in tape.nodes.iter().enumerate().take(self.grads.len()) {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.grads[i]) {
                store.get_mut(*id).grad.axpy(1.0, g);
            }
        }
    }
}

/// Per-parameter finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `(parameter name, relative error)`.
    pub per_param: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param.iter().map(|p| p.1).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_param.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Compares analytic gradients against central differences with step `h`.
///
/// `f` must build a scalar loss from the current parameter values. The error
/// for a parameter is `max_i |analytic_i - numeric_i| / max_i |numeric_i|`
/// (denominator floored at 1e-8). Gradients in `store` are overwritten.
pub fn gradcheck<F>(store: &mut ParamStore, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss)?.accumulate_into(&tape, store);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        Ok(tape.value(loss).get(0, 0))
    };

    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    let mut per_param = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.value(id).len();
        let mut max_diff = 0.0f64;
        let mut max_num = 0.0f64;
        for i in 0..n {
            let orig = store.value(id).as_slice()[i];
            store.value_mut(id).as_mut_slice()[i] = orig + h;
            let plus = eval(store)?;
            store.value_mut(id).as_mut_slice()[i] = orig - h;
            let minus = eval(store)?;
            store.value_mut(id).as_mut_slice()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = store.grad(id).as_slice()[i];
            max_diff = max_diff.max((analytic - numeric).abs());
            max_num = max_num.max(numeric.abs());
        }
        per_param.push((store.get(id).name.clone(), max_diff / max_num.max(1e-8)));
    }
    Ok(GradCheckReport { per_param })
}
