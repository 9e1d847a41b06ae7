//! Reverse-mode automatic differentiation on a recorded tape.
//!
//! A [`Graph`] records operations eagerly: each node stores its forward
//! value at creation time, and operands always precede their consumers, so
//! the insertion order is a topological order. [`Graph::backward`] walks the
//! tape once in reverse.
//!
//! All row-wise loss ops (`softmax_ce`, `kl_target`, `kl_logits`) treat a
//! `[m x c]` input as `m` independent examples and return an `[m]` vector.
//! Because examples never interact, the gradient of the summed loss with
//! respect to a batched input holds every per-example input gradient.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `x[m x in] * w[out x in]^T + b[out]`
    Affine { x: Var, w: Var, b: Var },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    SumAll(Var),
    MeanAll(Var),
    /// `out[i] = x[i, idx[i]]`
    Pick { x: Var, idx: Vec<usize> },
    SoftmaxCe { logits: Var, labels: Vec<usize> },
    KlTarget { logits: Var, target: Tensor },
    KlLogits { p: Var, q: Var },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Tape of operations with cached forward values.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node of a graph.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zero when the root does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.shape().len() != 2 {
            return Err(Error::shape(format!("weight must be 2-D, got {:?}", wv.shape())));
        }
        let (out, inp) = (wv.shape()[0], wv.shape()[1]);
        if xv.cols() != inp {
            return Err(Error::shape(format!(
                "input width {} does not match layer input {inp}",
                xv.cols()
            )));
        }
        if bv.len() != out {
            return Err(Error::shape(format!("bias length {} != {out}", bv.len())));
        }
        let m = xv.rows();
        let mut data = Vec::with_capacity(m * out);
        for _ in 0..m {
            data.extend_from_slice(bv.data());
        }
        gemm(
            m,
            inp,
            out,
            xv.data(),
            inp as isize,
            1,
            wv.data(),
            1,
            inp as isize,
            1.0,
            &mut data,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Op::Affine { x, w, b }, Tensor::from_raw(vec![m, out], data), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.rg(a);
        self.push(Op::Relu(a), value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(Op::Scale(a, s), value, rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v * v);
        let rg = self.rg(a);
        self.push(Op::Square(a), value, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Op::SumAll(a), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Op::MeanAll(a), Tensor::scalar(s), rg)
    }

    /// Selects one column per row.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (m, c) = (xv.rows(), xv.cols());
        check_labels(idx, m, c)?;
        let data = idx.iter().enumerate().map(|(i, &j)| xv.row(i)[j]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Op::Pick { x, idx: idx.to_vec() },
            Tensor::from_raw(vec![m], data),
            rg,
        ))
    }

    /// Per-row cross-entropy `-log softmax(z_i)[y_i]`, via log-sum-exp.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let (m, c) = (z.rows(), z.cols());
        check_labels(labels, m, c)?;
        let data = (0..m)
            .map(|i| {
                let row = z.row(i);
                log_sum_exp(row) - row[labels[i]]
            })
            .collect();
        let rg = self.rg(logits);
        Ok(self.push(
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
            },
            Tensor::from_raw(vec![m], data),
            rg,
        ))
    }

    /// Per-row `KL(t_i || softmax(z_i))` against a fixed probability target.
    pub fn kl_target(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let z = self.value(logits);
        let (m, c) = (z.rows(), z.cols());
        if target.rows() != m || target.cols() != c {
            return Err(Error::shape(format!(
                "target {:?} vs logits {:?}",
                target.shape(),
                z.shape()
            )));
        }
        let mut lsm = vec![0.0; c];
        let data = (0..m)
            .map(|i| {
                log_softmax_into(z.row(i), &mut lsm);
                kl_with_log_q(target.row(i), &lsm)
            })
            .collect();
        let rg = self.rg(logits);
        Ok(self.push(
            Op::KlTarget {
                logits,
                target: target.as_matrix(),
            },
            Tensor::from_raw(vec![m], data),
            rg,
        ))
    }

    /// Per-row `KL(softmax(a_i) || softmax(b_i))`, differentiable in both
    /// arguments.
    pub fn kl_logits(&mut self, p: Var, q: Var) -> Result<Var> {
        let (a, b) = (self.value(p), self.value(q));
        if a.rows() != b.rows() || a.cols() != b.cols() {
            return Err(Error::shape(format!(
                "kl_logits on {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (m, c) = (a.rows(), a.cols());
        let (mut la, mut lb, mut pa) = (vec![0.0; c], vec![0.0; c], vec![0.0; c]);
        let data = (0..m)
            .map(|i| {
                log_softmax_into(a.row(i), &mut la);
                log_softmax_into(b.row(i), &mut lb);
                softmax_into(a.row(i), &mut pa);
                pa.iter()
                    .zip(la.iter().zip(&lb))
                    .map(|(&p, (&x, &y))| if p > 0.0 { p * (x - y) } else { 0.0 })
                    .sum()
            })
            .collect();
        let rg = self.rg(p) || self.rg(q);
        Ok(self.push(Op::KlLogits { p, q }, Tensor::from_raw(vec![m], data), rg))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NotScalar(rv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (outw, inp) = (wv.shape()[0], wv.shape()[1]);
                let m = xv.rows();
                if self.rg(*x) {
                    let mut dx = vec![0.0; m * inp];
                    gemm(
                        m,
                        outw,
                        inp,
                        g.data(),
                        outw as isize,
                        1,
                        wv.data(),
                        inp as isize,
                        1,
                        0.0,
                        &mut dx,
                    );
                    self.accumulate(grads, *x, Tensor::from_raw(xv.shape().to_vec(), dx));
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; outw * inp];
                    gemm(
                        outw,
                        m,
                        inp,
                        g.data(),
                        1,
                        outw as isize,
                        xv.data(),
                        inp as isize,
                        1,
                        0.0,
                        &mut dw,
                    );
                    self.accumulate(grads, *w, Tensor::from_raw(vec![outw, inp], dw));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; outw];
                    for r in 0..m {
                        for (d, v) in db.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::from_raw(shape, db));
                }
            }
            Op::Relu(a) => {
                // d/dv relu(v) at v = 0 is taken as 0.
                let d = g
                    .zip_map(self.value(*a), |gi, v| if v > 0.0 { gi } else { 0.0 })
                    .expect("relu shapes");
                self.accumulate(grads, *a, d);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = g.zip_map(self.value(*b), |x, y| x * y).expect("mul shapes");
                    self.accumulate(grads, *a, d);
                }
                if self.rg(*b) {
                    let d = g.zip_map(self.value(*a), |x, y| x * y).expect("mul shapes");
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::Square(a) => {
                let d = g
                    .zip_map(self.value(*a), |gi, v| 2.0 * v * gi)
                    .expect("square shapes");
                self.accumulate(grads, *a, d);
            }
            Op::SumAll(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.item()));
            }
            Op::MeanAll(a) => {
                let av = self.value(*a);
                let d = g.item() / av.len() as f64;
                self.accumulate(grads, *a, Tensor::full(av.shape(), d));
            }
            Op::Pick { x, idx } => {
                let xv = self.value(*x);
                let mut d = Tensor::zeros(xv.shape());
                let c = xv.cols();
                for (i, &j) in idx.iter().enumerate() {
                    d.data_mut()[i * c + j] = g.data()[i];
                }
                self.accumulate(grads, *x, d);
            }
            Op::SoftmaxCe { logits, labels } => {
                let z = self.value(*logits);
                let mut d = Tensor::zeros(z.shape());
                for (i, &y) in labels.iter().enumerate() {
                    let gi = g.data()[i];
                    let row = d.row_mut(i);
                    softmax_into(z.row(i), row);
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= gi);
                }
                self.accumulate(grads, *logits, d);
            }
            Op::KlTarget { logits, target } => {
                // Target rows sum to one, so d/dz = softmax(z) - t.
                let z = self.value(*logits);
                let mut d = Tensor::zeros(z.shape());
                for i in 0..z.rows() {
                    let gi = g.data()[i];
                    let t = target.row(i);
                    let row = d.row_mut(i);
                    softmax_into(z.row(i), row);
                    for (v, &tj) in row.iter_mut().zip(t) {
                        *v = gi * (*v - tj);
                    }
                }
                self.accumulate(grads, *logits, d);
            }
            Op::KlLogits { p, q } => {
                let (a, b) = (self.value(*p), self.value(*q));
                let (m, c) = (a.rows(), a.cols());
                let mut da = Tensor::zeros(a.shape());
                let mut db = Tensor::zeros(b.shape());
                let (mut pa, mut la, mut lb) = (vec![0.0; c], vec![0.0; c], vec![0.0; c]);
                for i in 0..m {
                    let gi = g.data()[i];
                    softmax_into(a.row(i), &mut pa);
                    // d/db = softmax(b) - softmax(a)
                    let rb = db.row_mut(i);
                    softmax_into(b.row(i), rb);
                    for (v, &pj) in rb.iter_mut().zip(&pa) {
                        *v = gi * (*v - pj);
                    }
                    // d/da = p * (r - <p, r>), r = log p - log q
                    log_softmax_into(a.row(i), &mut la);
                    log_softmax_into(b.row(i), &mut lb);
                    let mean_r: f64 = (0..c).map(|j| pa[j] * (la[j] - lb[j])).sum();
                    let ra = da.row_mut(i);
                    for j in 0..c {
                        ra[j] = gi * pa[j] * ((la[j] - lb[j]) - mean_r);
                    }
                }
                self.accumulate(grads, *p, da);
                self.accumulate(grads, *q, db);
            }
        }
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes });
    }
    Ok(())
}

pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = z.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn softmax_into(z: &[f64], out: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

pub(crate) fn log_softmax_into(z: &[f64], out: &mut [f64]) {
    let lse = log_sum_exp(z);
    for (o, &v) in out.iter_mut().zip(z) {
        *o = v - lse;
    }
}

fn kl_with_log_q(p: &[f64], log_q: &[f64]) -> f64 {
    p.iter()
        .zip(log_q)
        .map(|(&pi, &lq)| if pi > 0.0 { pi * (pi.ln() - lq) } else { 0.0 })
        .sum()
}

/// Row-wise softmax of a `[m x c]` (or `[c]`) tensor.
pub fn softmax_rows(z: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(z.shape());
    for i in 0..z.rows() {
        softmax_into(z.row(i), out.row_mut(i));
    }
    out
}

/// Shift-stabilized softmax of a logit vector.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.len() < 2 {
        return Err(Error::invalid("softmax needs at least 2 classes"));
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("softmax input"));
    }
    Ok(softmax_rows(&Tensor::from_raw(vec![logits.len()], logits.data().to_vec())))
}

/// `-log softmax(logits)[label]`.
///
/// Evaluated as `-ln(q_y)` with `q` the shift-stabilized softmax whenever
/// `q_y` is a normal float, which makes it bit-identical to
/// `kl_divergence(onehot(y), softmax(logits))`; falls back to the
/// log-sum-exp form when `q_y` underflows.
pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    let c = logits.len();
    if label >= c {
        return Err(Error::LabelOutOfRange { label, classes: c });
    }
    if !logits.all_finite() {
        return Err(Error::NonFinite("cross_entropy input"));
    }
    let z = logits.data();
    let mut q = vec![0.0; c];
    softmax_into(z, &mut q);
    if q[label].is_normal() {
        Ok(0.0 - q[label].ln())
    } else {
        Ok(log_sum_exp(z) - z[label])
    }
}

/// `KL(p || q) = sum_i p_i (ln p_i - ln q_i)`, with `0 ln 0 = 0`.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(format!("kl on {:?} and {:?}", p.shape(), q.shape())));
    }
    for (name, t) in [("p", p), ("q", q)] {
        if t.data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::invalid(format!("{name} is not a probability vector")));
        }
        let s: f64 = t.data().iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("{name} sums to {s}, not 1")));
        }
    }
    let mut total = 0.0;
    for (i, (&pi, &qi)) in p.data().iter().zip(q.data()).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::ZeroProbability { index: i, p: pi });
            }
            total += pi * (pi.ln() - qi.ln());
        }
    }
    Ok(total)
}

/// One-hot probability vector.
pub fn onehot(label: usize, classes: usize) -> Result<Tensor> {
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    Tensor::vector(v)
}

/// Compares an analytic gradient with central differences.
///
/// `loss_fn` returns `(L(x), dL/dx)`. For every coordinate the analytic
/// derivative `a` is compared with `fd = (L(x + h e_i) - L(x - h e_i)) / 2h`;
/// the result is `max_i |a - fd| / (|a| + |fd| + 1e-8)`.
pub fn grad_check<F>(loss_fn: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let (_, analytic) = loss_fn(point)?;
    if analytic.len() != point.len() {
        return Err(Error::shape("gradient and point differ in size"));
    }
    let mut probe = point.clone();
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + h;
        let (lp, _) = loss_fn(&probe)?;
        probe.data_mut()[i] = x0 - h;
        let (lm, _) = loss_fn(&probe)?;
        probe.data_mut()[i] = x0;
        worst = worst.max(rel_err(analytic.data()[i], (lp - lm) / (2.0 * h)));
    }
    Ok(worst)
}

fn rel_err(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / (a.abs() + fd.abs() + 1e-8)
}

/// [`grad_check`] for row-independent losses: all `2d` probes of a
/// `d`-vector go through `values` as the rows of one `[2d x d]` batch.
pub fn grad_check_batched<F>(values: F, analytic: &Tensor, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Vec<f64>>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let d = point.len();
    if analytic.len() != d {
        return Err(Error::shape("gradient and point differ in size"));
    }
    let mut probes = Vec::with_capacity(2 * d * d);
    for i in 0..d {
        for sign in [1.0, -1.0] {
            let start = probes.len();
            probes.extend_from_slice(point.data());
            probes[start + i] += sign * h;
        }
    }
    let vals = values(&Tensor::matrix(2 * d, d, probes)?)?;
    if vals.len() != 2 * d {
        return Err(Error::shape(format!("{} values for {} probes", vals.len(), 2 * d)));
    }
    Ok(vals
        .chunks(2)
        .zip(analytic.data())
        .map(|(pm, &a)| rel_err(a, (pm[0] - pm[1]) / (2.0 * h)))
        .fold(0.0, f64::max))
}
