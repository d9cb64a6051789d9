//! Tape-based reverse-mode differentiation over matrices.
//!
//! Operations are recorded in execution order, so the record is already a
//! topological order and the backward pass is a single reverse sweep.
//! Backward is itself expressed in plain tensor math; when a loss needs
//! gradients-of-gradients (gradient matching), the caller writes the inner
//! backward pass with tape operations instead.

use std::sync::Arc;

use super::sparse::Neighborhoods;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a recorded value.
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    Transpose(Var),
    Relu(Var),
    Elu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    WeightedSum(Var, Tensor),
    WeightedKl {
        logits: Var,
        row_weights: Vec<f64>,
        targets: Tensor,
        logp: Tensor,
    },
    SelectRows(Var, Vec<usize>),
    Propagate(Var, Arc<Neighborhoods>),
    Attention {
        values: Var,
        receiver: Var,
        sender: Var,
        nb: Arc<Neighborhoods>,
        slope: f64,
        alpha: Vec<f64>,
        positive: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recording context for one differentiable computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.slots.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.slots.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every recorded node; previously issued `Var`s become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Adds a `1 × d` row to every row of an `n × d` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let xv = self.value(x);
        let rv = self.value(row);
        if rv.rows() != 1 || rv.cols() != xv.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", xv.shape(), rv.shape()),
            ));
        }
        let mut out = xv.clone();
        let r = rv.data().to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).map(|a| a * s);
        self.push(v, Op::Scale(x, s))
    }

    /// Elementwise product with a constant (dropout masks, activation masks).
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let v = self.value(x).zip_map(&c, |a, b| a * b)?;
        Ok(self.push(v, Op::MulConst(x, c)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        self.push(v, Op::Transpose(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { a.exp_m1() });
        self.push(v, Op::Elu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { slope * a });
        self.push(v, Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let v = super::kernels::softmax_rows(self.value(x));
        self.push(v, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = super::kernels::log_softmax_rows(self.value(x));
        self.push(v, Op::LogSoftmax(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    /// `Σ w ⊙ x` for a constant weight tensor `w`.
    pub fn weighted_sum(&mut self, x: Var, w: Tensor) -> Result<Var> {
        let xv = self.value(x);
        if !xv.same_shape(&w) {
            return Err(Error::shape(
                "weighted_sum",
                format!("{:?} vs {:?}", xv.shape(), w.shape()),
            ));
        }
        let s = xv.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, w)))
    }

    /// `Σ_i Σ_c p_ic (r_i log p_ic − T_ic)` with `p = softmax(logits)`.
    ///
    /// With `r_i = Σ_k w_k` and `T_i = Σ_k w_k log q_ik` this equals
    /// `Σ_i Σ_k w_k KL(p_i ‖ q_ik)`. The gradient is the analytic
    /// `p ⊙ (h − ⟨p, h⟩)` with `h_i = r_i log p_i − T_i`, so it is exactly zero
    /// when every teacher agrees bit-for-bit with the student.
    pub fn weighted_kl(&mut self, logits: Var, row_weights: Vec<f64>, targets: Tensor) -> Result<Var> {
        let lv = self.value(logits);
        if !lv.same_shape(&targets) || row_weights.len() != lv.rows() {
            return Err(Error::shape(
                "weighted_kl",
                format!(
                    "logits {:?}, targets {:?}, {} row weights",
                    lv.shape(),
                    targets.shape(),
                    row_weights.len()
                ),
            ));
        }
        let logp = super::kernels::log_softmax_rows(lv);
        let probs = logp.map(f64::exp);
        let mut total = 0.0;
        for (r, &w) in row_weights.iter().enumerate() {
            for ((&p, &l), &t) in probs.row(r).iter().zip(logp.row(r)).zip(targets.row(r)) {
                total += p * (w * l - t);
            }
        }
        let op = Op::WeightedKl {
            logits,
            row_weights,
            targets,
            logp,
        };
        Ok(self.push(Tensor::scalar(total), op))
    }

    pub fn select_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let v = self.value(x).select_rows(&idx)?;
        Ok(self.push(v, Op::SelectRows(x, idx)))
    }

    /// Fixed-weight neighborhood propagation: `y_t = Σ_e w_e · x_{source(e)}`.
    pub fn propagate(&mut self, x: Var, nb: Arc<Neighborhoods>) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != nb.node_count() {
            return Err(Error::shape(
                "propagate",
                format!("{} rows vs {} nodes", xv.rows(), nb.node_count()),
            ));
        }
        let d = xv.cols();
        let mut out = Tensor::zeros(&[xv.rows(), d]);
        for t in 0..nb.node_count() {
            for e in nb.range(t) {
                let w = nb.weight(e);
                let src = xv.row(nb.source(e));
                for (o, &s) in out.row_mut(t).iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        Ok(self.push(out, Op::Propagate(x, nb)))
    }

    /// Attention-weighted neighborhood aggregation.
    ///
    /// For receiving node `t` and entry `e = (t ← s)`, the score is
    /// `LeakyReLU(receiver[t] + sender[s])`; scores are softmax-normalized
    /// over each receiving node's entries and used to average `values` rows.
    /// `receiver` and `sender` are `n × 1` columns.
    pub fn attention(
        &mut self,
        values: Var,
        receiver: Var,
        sender: Var,
        nb: Arc<Neighborhoods>,
        slope: f64,
    ) -> Result<Var> {
        let hv = self.value(values);
        let rv = self.value(receiver);
        let sv = self.value(sender);
        let n = nb.node_count();
        if hv.rows() != n || rv.rows() != n || sv.rows() != n || rv.cols() != 1 || sv.cols() != 1
        {
            return Err(Error::shape(
                "attention",
                format!(
                    "values {:?}, receiver {:?}, sender {:?}, {n} nodes",
                    hv.shape(),
                    rv.shape(),
                    sv.shape()
                ),
            ));
        }
        let d = hv.cols();
        let mut alpha = vec![0.0; nb.entry_count()];
        let mut positive = vec![false; nb.entry_count()];
        let mut out = Tensor::zeros(&[n, d]);
        for t in 0..n {
            let range = nb.range(t);
            let mut max = f64::NEG_INFINITY;
            for e in range.clone() {
                let pre = rv.data()[t] + sv.data()[nb.source(e)];
                positive[e] = pre > 0.0;
                let score = if pre > 0.0 { pre } else { slope * pre };
                alpha[e] = score;
                max = max.max(score);
            }
            let mut z = 0.0;
            for e in range.clone() {
                alpha[e] = (alpha[e] - max).exp();
                z += alpha[e];
            }
            for e in range {
                alpha[e] /= z;
                let src = hv.row(nb.source(e));
                let a = alpha[e];
                for (o, &s) in out.row_mut(t).iter_mut().zip(src) {
                    *o += a * s;
                }
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                values,
                receiver,
                sender,
                nb,
                slope,
                alpha,
                positive,
            },
        ))
    }

    /// Attention coefficients recorded by an [`Tape::attention`] node, one per
    /// neighborhood entry.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { alpha, .. } => Some(alpha),
            _ => None,
        }
    }

    /// Reverse sweep from a `1 × 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {}", lv.data()[0])));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b))?;
                    let gb = self.value(*a).t_matmul(&g)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|x| -x))?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y)?;
                    let gb = g.zip_map(self.value(*a), |x, y| x * y)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::AddRow(x, row) => {
                    let mut gr = Tensor::zeros(&[1, g.cols()]);
                    for r in 0..g.rows() {
                        for (o, &v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *row, gr)?;
                    accumulate(&mut grads, *x, g)?;
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    accumulate(&mut grads, *x, g.map(|v| v * s))?;
                }
                Op::MulConst(x, c) => {
                    accumulate(&mut grads, *x, g.zip_map(c, |a, b| a * b)?)?;
                }
                Op::Transpose(x) => accumulate(&mut grads, *x, g.transpose())?,
                Op::Relu(x) => {
                    let gx = g.zip_map(self.value(*x), |gv, a| if a > 0.0 { gv } else { 0.0 })?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Elu(x) => {
                    let gx = g.zip_map(self.value(*x), |gv, a| {
                        if a > 0.0 {
                            gv
                        } else {
                            gv * a.exp()
                        }
                    })?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::LeakyRelu(x, slope) => {
                    let s = *slope;
                    let gx = g.zip_map(self.value(*x), |gv, a| if a > 0.0 { gv } else { s * gv })?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Sigmoid(x) => {
                    let gx = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y))?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut gx = Tensor::zeros(y.shape());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for ((o, &gv), &yv) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r))
                        {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::LogSoftmax(x) => {
                    let y = &node.value;
                    let mut gx = Tensor::zeros(y.shape());
                    for r in 0..y.rows() {
                        let total: f64 = g.row(r).iter().sum();
                        for ((o, &gv), &ly) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r))
                        {
                            *o = gv - ly.exp() * total;
                        }
                    }
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Sum(x) => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *x, Tensor::full(self.value(*x).shape(), s))?;
                }
                Op::WeightedSum(x, w) => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *x, w.map(|v| v * s))?;
                }
                Op::WeightedKl {
                    logits,
                    row_weights,
                    targets,
                    logp,
                } => {
                    let s = g.data()[0];
                    let mut gx = Tensor::zeros(logp.shape());
                    for (r, &w) in row_weights.iter().enumerate() {
                        let p: Vec<f64> = logp.row(r).iter().map(|l| l.exp()).collect();
                        let h: Vec<f64> =
                            logp.row(r).iter().zip(targets.row(r)).map(|(&l, &t)| w * l - t).collect();
                        let mean: f64 = p.iter().zip(&h).map(|(p, h)| p * h).sum();
                        for ((o, pv), hv) in gx.row_mut(r).iter_mut().zip(&p).zip(&h) {
                            *o = s * pv * (hv - mean);
                        }
                    }
                    accumulate(&mut grads, *logits, gx)?;
                }
                Op::SelectRows(x, idx) => {
                    let xv = self.value(*x);
                    let mut gx = Tensor::zeros(xv.shape());
                    for (r, &src) in idx.iter().enumerate() {
                        for (o, &v) in gx.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Propagate(x, nb) => {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    for t in 0..nb.node_count() {
                        for e in nb.range(t) {
                            let w = nb.weight(e);
                            let s = nb.source(e);
                            let gt = g.row(t).to_vec();
                            for (o, v) in gx.row_mut(s).iter_mut().zip(gt) {
                                *o += w * v;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::Attention {
                    values,
                    receiver,
                    sender,
                    nb,
                    slope,
                    alpha,
                    positive,
                } => {
                    let hv = self.value(*values);
                    let n = nb.node_count();
                    let mut gh = Tensor::zeros(hv.shape());
                    let mut grecv = Tensor::zeros(&[n, 1]);
                    let mut gsend = Tensor::zeros(&[n, 1]);
                    let mut dalpha = vec![0.0; alpha.len()];
                    for t in 0..n {
                        let gt = g.row(t);
                        let range = nb.range(t);
                        let mut weighted = 0.0;
                        for e in range.clone() {
                            let s = nb.source(e);
                            let da: f64 = gt.iter().zip(hv.row(s)).map(|(a, b)| a * b).sum();
                            dalpha[e] = da;
                            weighted += alpha[e] * da;
                            let a = alpha[e];
                            for (o, &v) in gh.row_mut(s).iter_mut().zip(gt) {
                                *o += a * v;
                            }
                        }
                        for e in range {
                            let dscore = alpha[e] * (dalpha[e] - weighted);
                            let dpre = if positive[e] { dscore } else { slope * dscore };
                            grecv.data_mut()[t] += dpre;
                            gsend.data_mut()[nb.source(e)] += dpre;
                        }
                    }
                    accumulate(&mut grads, *values, gh)?;
                    accumulate(&mut grads, *receiver, grecv)?;
                    accumulate(&mut grads, *sender, gsend)?;
                }
            }
        }
        Ok(Gradients { slots: grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_scaled(&g, 1.0),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn reset_allows_reuse() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let _ = tape.scale(x, 2.0);
        tape.reset();
        assert!(tape.is_empty());
        let x = tape.leaf(Tensor::scalar(1.0));
        let y = tape.scale(x, 5.0);
        assert_eq!(tape.backward(y).unwrap().get(x).unwrap().data(), &[5.0]);
    }

    #[test]
    fn attention_rows_are_normalized() {
        let nb = Arc::new(Neighborhoods::undirected(4, &[(0, 1), (1, 2), (0, 3)]).unwrap());
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::matrix(4, 2, vec![0.1, 0.3, -0.2, 0.5, 0.9, -1.0, 0.0, 0.4]).unwrap());
        let r = tape.leaf(Tensor::matrix(4, 1, vec![0.3, -0.1, 0.7, 0.2]).unwrap());
        let s = tape.leaf(Tensor::matrix(4, 1, vec![-0.5, 0.2, 0.1, 0.9]).unwrap());
        let out = tape.attention(h, r, s, nb.clone(), 0.2).unwrap();
        let alpha = tape.attention_weights(out).unwrap();
        for t in 0..4 {
            let total: f64 = nb.range(t).map(|e| alpha[e]).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = crate::numerics::SeedStream::new(seed).rng("tape-test");
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    /// Compares the tape gradient of `build(x)` against central differences.
    fn check(x: Tensor, build: impl Fn(&mut Tape, Var) -> Result<Var>) {
        let eval = |t: &Tensor| {
            let mut tape = Tape::new();
            let v = tape.leaf(t.clone());
            let out = build(&mut tape, v).unwrap();
            tape.scalar(out)
        };
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let out = build(&mut tape, v).unwrap();
        let grad = tape.backward(out).unwrap().take(v).unwrap();
        let h = 1e-5;
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let fd = (eval(&p) - eval(&m)) / (2.0 * h);
            let an = grad.data()[i];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(err < 1e-4, "entry {i}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn elementwise_and_reduction_gradients() {
        let w = random(3, 4, 1);
        let c = random(3, 4, 2);
        let row = random(1, 4, 3);
        check(random(3, 4, 4), |t, x| {
            let a = t.elu(x);
            let b = t.leaky_relu(x, 0.2);
            let s = t.sigmoid(x);
            let sm = t.softmax(x);
            let ls = t.log_softmax(x);
            let rv = t.leaf(row.clone());
            let ar = t.add_row(x, rv)?;
            let r = t.relu(ar);
            let m = t.mul(a, b)?;
            let k = t.mul_const(s, c.clone())?;
            let sc = t.scale(sm, 3.0);
            let mut acc = t.add(m, k)?;
            acc = t.sub(acc, sc)?;
            acc = t.add(acc, ls)?;
            acc = t.add(acc, r)?;
            t.weighted_sum(acc, w.clone())
        });
    }

    #[test]
    fn linear_algebra_gradients() {
        let b = random(4, 2, 5);
        check(random(3, 4, 6), |t, x| {
            let bv = t.leaf(b.clone());
            let p = t.matmul(x, bv)?;
            let tr = t.transpose(p);
            let sel = t.select_rows(tr, vec![1, 0, 1])?;
            let sq = t.mul(sel, sel)?;
            Ok(t.sum(sq))
        });
    }

    #[test]
    fn graph_operator_gradients() {
        let nb = Arc::new(Neighborhoods::undirected(4, &[(0, 1), (1, 2), (0, 3)]).unwrap());
        let w = random(4, 3, 7);
        let recv = random(3, 1, 8);
        let send = random(3, 1, 9);
        check(random(4, 3, 10), |t, x| {
            let p = t.propagate(x, nb.clone())?;
            let r = t.leaf(recv.clone());
            let s = t.leaf(send.clone());
            let rv = t.matmul(x, r)?;
            let sv = t.matmul(x, s)?;
            let a = t.attention(p, rv, sv, nb.clone(), 0.2)?;
            let e = t.elu(a);
            t.weighted_sum(e, w.clone())
        });
    }

    #[test]
    fn weighted_kl_gradient_and_fixed_point() {
        let targets = random(3, 4, 11).map(|v| v - 2.0);
        check(random(3, 4, 12), |t, x| t.weighted_kl(x, vec![1.0, 0.5, 0.0], targets.clone()));

        // agreeing teacher: loss and gradient are exactly zero
        let logits = random(3, 4, 13);
        let logq = super::super::kernels::log_softmax_rows(&logits);
        let mut tape = Tape::new();
        let x = tape.leaf(logits);
        let loss = tape.weighted_kl(x, vec![1.0; 3], logq).unwrap();
        assert!(tape.scalar(loss).abs() < 1e-15);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
