//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value. [`Tape::backward`]
//! walks the nodes in reverse order of creation, so the backward sweep is the
//! exact mirror of the forward pass. Parameters enter through [`Tape::param`],
//! which borrows the tensor instead of copying it and assigns it the next
//! parameter slot; gradients come back indexed by slot.

use std::borrow::Cow;

use crate::error::{invalid, Result};
use crate::tensor::{dot, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    /// `W [m×n] · x [n]`
    MatVec(Var, Var),
    /// `A [n×d] · Wᵀ` with `W [m×d]`
    MatMulT(Var, Var),
    /// `M [n×k] + b [k]` broadcast over rows
    AddRowBroadcast(Var, Var),
    Concat(Vec<Var>),
    /// Equal-length vectors as the rows of a matrix.
    StackRows(Vec<Var>),
    Gather(Var, usize),
    Softmax(Var),
    /// `Σ_i w_i · A_i`
    WeightedRowSum(Var, Var),
    MeanRows(Var),
    Sum(Var),
    AddN(Vec<Var>),
    /// `−ln softmax(logits)[target]`
    CrossEntropy(Var, usize),
}

struct Node<'a> {
    op: Op,
    value: Cow<'a, Tensor>,
}

/// Per-slot parameter gradients. Slots never reached from the loss hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, slot: usize) -> &Tensor {
        &self.grads[slot]
    }

    pub fn as_slice(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn as_mut_slice(&mut self) -> &mut [Tensor] {
        &mut self.grads
    }

    pub fn into_vec(self) -> Vec<Tensor> {
        self.grads
    }

    pub fn from_vec(grads: Vec<Tensor>) -> Self {
        Self { grads }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` slot-wise into `self`.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        if self.grads.len() != other.grads.len() {
            return Err(invalid("gradient slot count mismatch"));
        }
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            if a.shape() != b.shape() {
                return Err(invalid("gradient shape mismatch"));
            }
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    param_shapes: Vec<Vec<usize>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes.len()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value: Cow::Owned(value),
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant: no gradient flows out of it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Input, value)
    }

    /// Registers a trainable tensor under the next parameter slot.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        let slot = self.param_shapes.len();
        self.param_shapes.push(value.shape().to_vec());
        self.nodes.push(Node {
            op: Op::Param(slot),
            value: Cow::Borrowed(value),
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(invalid(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_with(a, b, |p, q| p + q);
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_with(a, b, |p, q| p - q);
        Ok(self.push(Op::Sub(a, b), v))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_with(a, b, |p, q| p * q);
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), v)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 - x);
        self.push(Op::OneMinus(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (wm, xv) = (self.value(w), self.value(x));
        if !wm.is_matrix() || !xv.is_vector() || wm.cols() != xv.len() {
            return Err(invalid(format!(
                "matvec: cannot apply {:?} to {:?}",
                wm.shape(),
                xv.shape()
            )));
        }
        let out: Vec<f64> = (0..wm.rows()).map(|i| dot(wm.row(i), xv.data())).collect();
        Ok(self.push(Op::MatVec(w, x), Tensor::vector(out)))
    }

    pub fn matmul_t(&mut self, a: Var, w: Var) -> Result<Var> {
        let (am, wm) = (self.value(a), self.value(w));
        if !am.is_matrix() || !wm.is_matrix() || am.cols() != wm.cols() {
            return Err(invalid(format!(
                "matmul_t: incompatible {:?} and {:?}",
                am.shape(),
                wm.shape()
            )));
        }
        let (n, m) = (am.rows(), wm.rows());
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                out.push(dot(am.row(i), wm.row(j)));
            }
        }
        let v = Tensor::matrix(n, m, out)?;
        Ok(self.push(Op::MatMulT(a, w), v))
    }

    pub fn add_row_broadcast(&mut self, m: Var, b: Var) -> Result<Var> {
        let (mm, bv) = (self.value(m), self.value(b));
        if !mm.is_matrix() || !bv.is_vector() || mm.cols() != bv.len() {
            return Err(invalid(format!(
                "add_row_broadcast: incompatible {:?} and {:?}",
                mm.shape(),
                bv.shape()
            )));
        }
        let cols = mm.cols();
        let data = mm
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv.data()[i % cols])
            .collect();
        let v = Tensor::new(mm.shape().to_vec(), data)?;
        Ok(self.push(Op::AddRowBroadcast(m, b), v))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(invalid("concat: no inputs"));
        }
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if !t.is_vector() {
                return Err(invalid("concat: inputs must be vectors"));
            }
            data.extend_from_slice(t.data());
        }
        Ok(self.push(Op::Concat(parts.to_vec()), Tensor::vector(data)))
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows.first().ok_or_else(|| invalid("stack_rows: no inputs"))?;
        let cols = self.value(first).len();
        let mut data = Vec::with_capacity(cols * rows.len());
        for &r in rows {
            let t = self.value(r);
            if !t.is_vector() || t.len() != cols {
                return Err(invalid("stack_rows: inputs must be vectors of equal length"));
            }
            data.extend_from_slice(t.data());
        }
        let v = Tensor::matrix(rows.len(), cols, data)?;
        Ok(self.push(Op::StackRows(rows.to_vec()), v))
    }

    /// Row `index` of a matrix, as a vector.
    pub fn gather(&mut self, table: Var, index: usize) -> Result<Var> {
        let t = self.value(table);
        if !t.is_matrix() || index >= t.rows() {
            return Err(invalid(format!(
                "gather: row {index} out of range for {:?}",
                t.shape()
            )));
        }
        let v = Tensor::vector(t.row(index).to_vec());
        Ok(self.push(Op::Gather(table, index), v))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::vector(softmax(self.value(a).data())?);
        Ok(self.push(Op::Softmax(a), v))
    }

    pub fn weighted_row_sum(&mut self, weights: Var, rows: Var) -> Result<Var> {
        let (w, m) = (self.value(weights), self.value(rows));
        if !w.is_vector() || !m.is_matrix() || w.len() != m.rows() {
            return Err(invalid(format!(
                "weighted_row_sum: {:?} weights for {:?}",
                w.shape(),
                m.shape()
            )));
        }
        let mut out = vec![0.0; m.cols()];
        for (i, &wi) in w.data().iter().enumerate() {
            for (o, &x) in out.iter_mut().zip(m.row(i)) {
                *o += wi * x;
            }
        }
        Ok(self.push(Op::WeightedRowSum(weights, rows), Tensor::vector(out)))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if !m.is_matrix() {
            return Err(invalid("mean_rows: expected a matrix"));
        }
        let n = m.rows() as f64;
        let mut out = vec![0.0; m.cols()];
        for i in 0..m.rows() {
            for (o, &x) in out.iter_mut().zip(m.row(i)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= n);
        Ok(self.push(Op::MeanRows(a), Tensor::vector(out)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// Sum of same-shaped nodes.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| invalid("add_n: no inputs"))?;
        let mut acc = self.value(first).clone();
        for &p in &parts[1..] {
            self.same_shape(first, p, "add_n")?;
            for (a, b) in acc.data_mut().iter_mut().zip(self.value(p).data()) {
                *a += b;
            }
        }
        Ok(self.push(Op::AddN(parts.to_vec()), acc))
    }

    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let l = self.value(logits);
        if !l.is_vector() || target >= l.len() {
            return Err(invalid(format!(
                "cross_entropy: target {target} out of range for {:?}",
                l.shape()
            )));
        }
        let loss = log_sum_exp(l.data()) - l.data()[target];
        Ok(self.push(Op::CrossEntropy(logits, target), Tensor::scalar(loss)))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out: Vec<Tensor> = self.param_shapes.iter().map(|s| Tensor::zeros(s)).collect();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = node.value.data();
            match &node.op {
                Op::Input => {}
                Op::Param(slot) => {
                    for (o, gi) in out[*slot].data_mut().iter_mut().zip(&g) {
                        *o += gi;
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, self, *a, |d| add_into(d, &g));
                    acc(&mut grads, self, *b, |d| add_into(d, &g));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, self, *a, |d| add_into(d, &g));
                    acc(&mut grads, self, *b, |d| {
                        d.iter_mut().zip(&g).for_each(|(x, gi)| *x -= gi)
                    });
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    acc(&mut grads, self, *a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * bv[i];
                        }
                    });
                    acc(&mut grads, self, *b, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * av[i];
                        }
                    });
                }
                Op::Scale(a, f) => acc(&mut grads, self, *a, |d| {
                    d.iter_mut().zip(&g).for_each(|(x, gi)| *x += f * gi)
                }),
                Op::OneMinus(a) => acc(&mut grads, self, *a, |d| {
                    d.iter_mut().zip(&g).for_each(|(x, gi)| *x -= gi)
                }),
                Op::Sigmoid(a) => acc(&mut grads, self, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }),
                Op::Tanh(a) => acc(&mut grads, self, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }),
                Op::MatVec(w, x) => {
                    let (wm, xv) = (self.value(*w), self.value(*x));
                    let cols = wm.cols();
                    acc(&mut grads, self, *w, |d| {
                        for (i, gi) in g.iter().enumerate() {
                            let row = &mut d[i * cols..(i + 1) * cols];
                            row.iter_mut().zip(xv.data()).for_each(|(r, xj)| *r += gi * xj);
                        }
                    });
                    acc(&mut grads, self, *x, |d| {
                        for (i, gi) in g.iter().enumerate() {
                            d.iter_mut().zip(wm.row(i)).for_each(|(dj, wij)| *dj += gi * wij);
                        }
                    });
                }
                Op::MatMulT(a, w) => {
                    let (am, wm) = (self.value(*a), self.value(*w));
                    let (n, m, k) = (am.rows(), wm.rows(), am.cols());
                    acc(&mut grads, self, *a, |d| {
                        for i in 0..n {
                            for j in 0..m {
                                let gij = g[i * m + j];
                                d[i * k..(i + 1) * k]
                                    .iter_mut()
                                    .zip(wm.row(j))
                                    .for_each(|(x, wv)| *x += gij * wv);
                            }
                        }
                    });
                    acc(&mut grads, self, *w, |d| {
                        for i in 0..n {
                            for j in 0..m {
                                let gij = g[i * m + j];
                                d[j * k..(j + 1) * k]
                                    .iter_mut()
                                    .zip(am.row(i))
                                    .for_each(|(x, av)| *x += gij * av);
                            }
                        }
                    });
                }
                Op::AddRowBroadcast(m, b) => {
                    let cols = self.value(*b).len();
                    acc(&mut grads, self, *m, |d| add_into(d, &g));
                    acc(&mut grads, self, *b, |d| {
                        for (i, gi) in g.iter().enumerate() {
                            d[i % cols] += gi;
                        }
                    });
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        let slice = &g[offset..offset + n];
                        acc(&mut grads, self, p, |d| add_into(d, slice));
                        offset += n;
                    }
                }
                Op::StackRows(rows) => {
                    let cols = g.len() / rows.len();
                    for (i, &r) in rows.iter().enumerate() {
                        let slice = &g[i * cols..(i + 1) * cols];
                        acc(&mut grads, self, r, |d| add_into(d, slice));
                    }
                }
                Op::Gather(table, index) => {
                    let cols = self.value(*table).cols();
                    acc(&mut grads, self, *table, |d| {
                        add_into(&mut d[index * cols..(index + 1) * cols], &g)
                    });
                }
                Op::Softmax(a) => {
                    let gy = dot(&g, y);
                    acc(&mut grads, self, *a, |d| {
                        for i in 0..d.len() {
                            d[i] += y[i] * (g[i] - gy);
                        }
                    });
                }
                Op::WeightedRowSum(w, rows) => {
                    let (wv, m) = (self.value(*w), self.value(*rows));
                    let cols = m.cols();
                    acc(&mut grads, self, *w, |d| {
                        for (i, di) in d.iter_mut().enumerate() {
                            *di += dot(&g, m.row(i));
                        }
                    });
                    acc(&mut grads, self, *rows, |d| {
                        for (i, wi) in wv.data().iter().enumerate() {
                            d[i * cols..(i + 1) * cols]
                                .iter_mut()
                                .zip(&g)
                                .for_each(|(x, gj)| *x += wi * gj);
                        }
                    });
                }
                Op::MeanRows(a) => {
                    let m = self.value(*a);
                    let (n, cols) = (m.rows(), m.cols());
                    let inv = 1.0 / n as f64;
                    acc(&mut grads, self, *a, |d| {
                        for i in 0..n {
                            d[i * cols..(i + 1) * cols]
                                .iter_mut()
                                .zip(&g)
                                .for_each(|(x, gj)| *x += gj * inv);
                        }
                    });
                }
                Op::Sum(a) => acc(&mut grads, self, *a, |d| d.iter_mut().for_each(|x| *x += g[0])),
                Op::AddN(parts) => {
                    for &p in parts {
                        acc(&mut grads, self, p, |d| add_into(d, &g));
                    }
                }
                Op::CrossEntropy(logits, target) => {
                    let probs = softmax(self.value(*logits).data())?;
                    acc(&mut grads, self, *logits, |d| {
                        for (i, p) in probs.iter().enumerate() {
                            d[i] += g[0] * (p - if i == *target { 1.0 } else { 0.0 });
                        }
                    });
                }
            }
        }
        Ok(Gradients { grads: out })
    }
}

/// Runs `f` on the (lazily zeroed) gradient buffer of `v`, unless `v` is a
/// constant.
fn acc(grads: &mut [Option<Vec<f64>>], tape: &Tape<'_>, v: Var, f: impl FnOnce(&mut [f64])) {
    if matches!(tape.nodes[v.0].op, Op::Input) {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; tape.nodes[v.0].value.len()]);
    f(buf);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(invalid("softmax of an empty vector"));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `ln softmax(scores)`; entries at `-inf` stay `-inf`.
pub fn log_softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(invalid("log_softmax of an empty vector"));
    }
    let lse = log_sum_exp(scores);
    Ok(scores.iter().map(|s| s - lse).collect())
}
