//! Two-layer graph attention / graph convolution network with a linear
//! classification head.
//!
//! The second message-passing layer produces the hidden embedding `H`
//! (post-activation); the head maps `H` to one logit per class. The head is
//! sized for every class the client will ever see, so parameter shapes stay
//! fixed across tasks.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AdamState, Neighborhoods, SeedStream, Tape, Tensor, Var};
use crate::partition::{MaskKind, TaskView};

/// LeakyReLU slope inside attention scores.
pub const ATTENTION_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GnnVariant {
    #[default]
    Gat,
    Gcn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub variant: GnnVariant,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl Architecture {
    pub fn new(variant: GnnVariant, input_dim: usize, num_classes: usize) -> Self {
        Self {
            variant,
            input_dim,
            hidden_dim: 64,
            num_classes,
        }
    }

    /// Shapes of the parameter tensors, in storage order.
    ///
    /// GAT per layer: weight, receiver attention, sender attention, bias.
    /// GCN per layer: weight, bias. Both end with head weight and head bias.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut fan_in = self.input_dim;
        for _ in 0..2 {
            shapes.push(vec![fan_in, self.hidden_dim]);
            if self.variant == GnnVariant::Gat {
                shapes.push(vec![self.hidden_dim, 1]);
                shapes.push(vec![self.hidden_dim, 1]);
            }
            shapes.push(vec![1, self.hidden_dim]);
            fan_in = self.hidden_dim;
        }
        shapes.push(vec![self.hidden_dim, self.num_classes]);
        shapes.push(vec![1, self.num_classes]);
        shapes
    }

    fn per_layer(&self) -> usize {
        match self.variant {
            GnnVariant::Gat => 4,
            GnnVariant::Gcn => 2,
        }
    }
}

/// Full parameter set of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnParams {
    arch: Architecture,
    tensors: Vec<Tensor>,
}

impl GnnParams {
    /// Glorot-uniform weights and attention vectors, zero biases.
    pub fn init(arch: Architecture, rng: &mut impl Rng) -> Self {
        let tensors = arch
            .shapes()
            .into_iter()
            .map(|shape| {
                if shape[0] == 1 {
                    Tensor::zeros(&shape)
                } else {
                    let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    let n = shape[0] * shape[1];
                    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
                    Tensor::new(shape, data).expect("shape matches data")
                }
            })
            .collect();
        Self { arch, tensors }
    }

    pub fn from_tensors(arch: Architecture, tensors: Vec<Tensor>) -> Result<Self> {
        let shapes = arch.shapes();
        if shapes.len() != tensors.len()
            || shapes.iter().zip(&tensors).any(|(s, t)| s.as_slice() != t.shape())
        {
            return Err(Error::shape("gnn params", "tensors do not match architecture"));
        }
        Ok(Self { arch, tensors })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn unflatten(arch: Architecture, values: &[f64]) -> Result<Self> {
        let shapes = arch.shapes();
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if total != values.len() {
            return Err(Error::shape(
                "unflatten",
                format!("architecture needs {total} values, got {}", values.len()),
            ));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(shapes.len());
        for shape in shapes {
            let n: usize = shape.iter().product();
            tensors.push(Tensor::new(shape, values[offset..offset + n].to_vec())?);
            offset += n;
        }
        Ok(Self { arch, tensors })
    }

    /// Records every tensor as a leaf on `tape`.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }
}

/// Local optimization settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub epochs: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            weight_decay: 5e-4,
            dropout: 0.5,
            epochs: 3,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Invalid("lr and weight_decay must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.epochs == 0 {
            return Err(Error::Invalid("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Train { dropout: f64 },
    Eval,
}

/// Tape handles produced by [`forward_on_tape`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub hidden: Var,
    pub logits: Var,
    /// Attention aggregation nodes (GAT only), one per layer.
    pub attention: Vec<Var>,
}

fn dropout(tape: &mut Tape, x: Var, p: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
    if p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = tape.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let mask = Tensor::new(shape, data)?;
    tape.mul_const(x, mask)
}

/// Records a forward pass. `params` are the registered parameter leaves.
/// Dropout is applied to the input of each message-passing layer in train
/// mode.
pub fn forward_on_tape(
    tape: &mut Tape,
    arch: &Architecture,
    params: &[Var],
    x: Var,
    nb: &Arc<Neighborhoods>,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<ForwardVars> {
    let xv = tape.value(x);
    if xv.cols() != arch.input_dim {
        return Err(Error::shape(
            "forward",
            format!("features have {} columns, model expects {}", xv.cols(), arch.input_dim),
        ));
    }
    if xv.rows() != nb.node_count() {
        return Err(Error::shape(
            "forward",
            format!("{} feature rows for {} nodes", xv.rows(), nb.node_count()),
        ));
    }
    if params.len() != arch.shapes().len() {
        return Err(Error::shape("forward", "parameter count does not match architecture"));
    }
    let mut h = x;
    let mut attention = Vec::new();
    let per = arch.per_layer();
    for layer in 0..2 {
        let p = &params[layer * per..(layer + 1) * per];
        if let Mode::Train { dropout: rate } = mode {
            h = dropout(tape, h, rate, rng)?;
        }
        let projected = tape.matmul(h, p[0])?;
        h = match arch.variant {
            GnnVariant::Gat => {
                let recv = tape.matmul(projected, p[1])?;
                let send = tape.matmul(projected, p[2])?;
                let agg = tape.attention(projected, recv, send, nb.clone(), ATTENTION_SLOPE)?;
                attention.push(agg);
                let biased = tape.add_row(agg, p[3])?;
                tape.elu(biased)
            }
            GnnVariant::Gcn => {
                let agg = tape.propagate(projected, nb.clone())?;
                let biased = tape.add_row(agg, p[1])?;
                tape.relu(biased)
            }
        };
    }
    let head = &params[2 * per..];
    let z = tape.matmul(h, head[0])?;
    let logits = tape.add_row(z, head[1])?;
    Ok(ForwardVars {
        hidden: h,
        logits,
        attention,
    })
}

/// Runs the model and returns `(H, logits)`.
pub fn forward(
    params: &GnnParams,
    x: &Tensor,
    nb: &Arc<Neighborhoods>,
    mode: Mode,
    seed: u64,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let xv = tape.leaf(x.clone());
    let mut rng = SeedStream::new(seed).rng("dropout");
    let out = forward_on_tape(&mut tape, params.arch(), &vars, xv, nb, mode, &mut rng)?;
    Ok((tape.value(out.hidden).clone(), tape.value(out.logits).clone()))
}

/// Mean softmax cross-entropy over the rows selected by `mask`, recorded on
/// the tape.
pub fn cross_entropy_on_tape(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    mask: &[bool],
) -> Result<Var> {
    let lv = tape.value(logits);
    let (n, c) = (lv.rows(), lv.cols());
    if labels.len() != n || mask.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            format!("{n} logit rows, {} labels, {} mask entries", labels.len(), mask.len()),
        ));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Invalid("loss mask selects no nodes".into()));
    }
    let mut weights = Tensor::zeros(&[n, c]);
    for (i, (&y, &m)) in labels.iter().zip(mask).enumerate() {
        if m {
            if y >= c {
                return Err(Error::Invalid(format!("label {y} outside {c} classes")));
            }
            weights.set(i, y, -1.0 / count as f64);
        }
    }
    let logp = tape.log_softmax(logits);
    tape.weighted_sum(logp, weights)
}

/// Mean softmax cross-entropy over masked nodes.
pub fn supervised_loss(logits: &Tensor, labels: &[usize], mask: &[bool]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let loss = cross_entropy_on_tape(&mut tape, l, labels, mask)?;
    Ok(tape.scalar(loss))
}

/// Full-batch Adam training for `hyper.epochs` epochs.
///
/// `loss_fn` records the loss given the registered parameter leaves and an
/// epoch-specific dropout generator. Returns the trained parameters and the
/// loss of the last epoch (evaluated before its update).
pub fn train_epochs<F>(
    params: &GnnParams,
    adam: &mut AdamState,
    hyper: &TrainHyper,
    seed: SeedStream,
    mut loss_fn: F,
) -> Result<(GnnParams, f64)>
where
    F: FnMut(&mut Tape, &[Var], &mut ChaCha8Rng) -> Result<Var>,
{
    hyper.validate()?;
    let mut current = params.clone();
    let mut last = f64::NAN;
    let mut tape = Tape::new();
    for epoch in 0..hyper.epochs {
        tape.reset();
        let vars = current.register(&mut tape);
        let mut rng = seed.rng(&format!("epoch/{epoch}"));
        let loss = loss_fn(&mut tape, &vars, &mut rng)?;
        last = tape.scalar(loss);
        let mut grads = tape.backward(loss)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .zip(current.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        adam.step(current.tensors_mut(), &grads, hyper.lr, hyper.weight_decay)?;
    }
    Ok((current, last))
}

/// Predicted class per node in eval mode.
pub fn predict(params: &GnnParams, x: &Tensor, nb: &Arc<Neighborhoods>) -> Result<Vec<usize>> {
    let (_, logits) = forward(params, x, nb, Mode::Eval, 0)?;
    Ok(logits.argmax_rows())
}

/// Accuracy of eval-mode argmax predictions on the masked task nodes.
pub fn evaluate(params: &GnnParams, task: &TaskView, kind: MaskKind) -> Result<f64> {
    let idx = task.masks.indices(kind);
    if idx.is_empty() {
        return Err(Error::Invalid(format!("{kind:?} mask of task {} is empty", task.index)));
    }
    let pred = predict(params, &task.features, task.neighborhoods())?;
    let correct = idx.iter().filter(|&&i| pred[i] == task.labels[i]).count();
    Ok(correct as f64 / idx.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::AdamConfig;

    fn arch(variant: GnnVariant) -> Architecture {
        Architecture {
            variant,
            input_dim: 3,
            hidden_dim: 4,
            num_classes: 2,
        }
    }

    fn random_params(variant: GnnVariant, seed: u64) -> GnnParams {
        GnnParams::init(arch(variant), &mut SeedStream::new(seed).rng("init"))
    }

    #[test]
    fn flatten_round_trip() {
        for v in [GnnVariant::Gat, GnnVariant::Gcn] {
            let p = random_params(v, 1);
            let flat = p.flatten();
            let back = GnnParams::unflatten(*p.arch(), &flat).unwrap();
            assert_eq!(back, p);
            assert_eq!(back.flatten(), flat);
            assert!(GnnParams::unflatten(*p.arch(), &flat[1..]).is_err());
        }
    }

    #[test]
    fn gcn_with_identity_is_an_mlp() {
        let p = random_params(GnnVariant::Gcn, 2);
        let x = Tensor::matrix(2, 3, vec![0.5, -1.0, 0.2, 1.0, 0.3, -0.7]).unwrap();
        let nb = Arc::new(Neighborhoods::identity(2));
        let (h, logits) = forward(&p, &x, &nb, Mode::Eval, 0).unwrap();
        let t = p.tensors();
        let relu = |m: Tensor| m.map(|v| v.max(0.0));
        let add_bias = |m: Tensor, b: &Tensor| {
            let mut m = m;
            for r in 0..m.rows() {
                for (o, bv) in m.row_mut(r).iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
            m
        };
        let h1 = relu(add_bias(x.matmul(&t[0]).unwrap(), &t[1]));
        let h2 = relu(add_bias(h1.matmul(&t[2]).unwrap(), &t[3]));
        let out = add_bias(h2.matmul(&t[4]).unwrap(), &t[5]);
        for (a, b) in h.data().iter().zip(h2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in logits.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_is_deterministic_and_train_uses_dropout() {
        let p = random_params(GnnVariant::Gat, 3);
        let x = Tensor::matrix(3, 3, (0..9).map(|i| i as f64 * 0.1).collect()).unwrap();
        let nb = Arc::new(Neighborhoods::undirected(3, &[(0, 1), (1, 2)]).unwrap());
        let a = forward(&p, &x, &nb, Mode::Eval, 1).unwrap();
        let b = forward(&p, &x, &nb, Mode::Eval, 2).unwrap();
        assert_eq!(a, b);
        let c = forward(&p, &x, &nb, Mode::Train { dropout: 0.5 }, 1).unwrap();
        assert_ne!(a, c);
        assert_eq!(c, forward(&p, &x, &nb, Mode::Train { dropout: 0.5 }, 1).unwrap());
    }

    #[test]
    fn dimension_mismatch_errors() {
        let p = random_params(GnnVariant::Gat, 3);
        let x = Tensor::zeros(&[2, 5]);
        let nb = Arc::new(Neighborhoods::identity(2));
        assert!(forward(&p, &x, &nb, Mode::Eval, 0).is_err());
        let x = Tensor::zeros(&[3, 3]);
        assert!(forward(&p, &x, &nb, Mode::Eval, 0).is_err());
    }

    #[test]
    fn loss_examples() {
        let perfect = Tensor::matrix(2, 3, vec![50.0, 0.0, 0.0, 0.0, 0.0, 50.0]).unwrap();
        assert!(supervised_loss(&perfect, &[0, 2], &[true, true]).unwrap() < 1e-3);
        let uniform = Tensor::zeros(&[4, 5]);
        let l = supervised_loss(&uniform, &[0, 1, 2, 3], &[true, false, true, true]).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        assert!(supervised_loss(&uniform, &[0, 1, 2, 3], &[false; 4]).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let p = random_params(GnnVariant::Gat, 4);
        let x = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.5, 0.0, 1.0, -0.5]).unwrap();
        let nb = Arc::new(Neighborhoods::undirected(2, &[(0, 1)]).unwrap());
        let hyper = TrainHyper {
            lr: 0.0,
            ..Default::default()
        };
        let mut adam = AdamState::new(p.tensors(), AdamConfig::default());
        let (out, _) = train_epochs(&p, &mut adam, &hyper, SeedStream::new(0), |tape, vars, rng| {
            let xv = tape.leaf(x.clone());
            let f = forward_on_tape(tape, p.arch(), vars, xv, &nb, Mode::Train { dropout: 0.5 }, rng)?;
            cross_entropy_on_tape(tape, f.logits, &[0, 1], &[true, true])
        })
        .unwrap();
        assert_eq!(out, p);
    }

    fn toy_loss(params: &GnnParams, x: &Tensor, nb: &Arc<Neighborhoods>) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let xv = tape.leaf(x.clone());
        let mut rng = SeedStream::new(0).rng("unused");
        let f = forward_on_tape(&mut tape, params.arch(), &vars, xv, nb, Mode::Eval, &mut rng)?;
        let loss = cross_entropy_on_tape(&mut tape, f.logits, &[0, 1, 1, 0], &[true, true, false, true])?;
        let value = tape.scalar(loss);
        let mut grads = tape.backward(loss)?;
        let flat = vars
            .iter()
            .zip(params.tensors())
            .flat_map(|(&v, t)| {
                grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())).into_data()
            })
            .collect();
        Ok((value, flat))
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = Tensor::matrix(4, 3, (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect())
            .unwrap();
        let nb = Arc::new(Neighborhoods::undirected(4, &[(0, 1), (1, 2), (2, 3), (0, 3)]).unwrap());
        for v in [GnnVariant::Gat, GnnVariant::Gcn] {
            let p = random_params(v, 5);
            let (_, grad) = toy_loss(&p, &x, &nb).unwrap();
            let flat = p.flatten();
            let h = 1e-6;
            for i in 0..flat.len() {
                let mut plus = flat.clone();
                plus[i] += h;
                let mut minus = flat.clone();
                minus[i] -= h;
                let fp = toy_loss(&GnnParams::unflatten(*p.arch(), &plus).unwrap(), &x, &nb).unwrap().0;
                let fm = toy_loss(&GnnParams::unflatten(*p.arch(), &minus).unwrap(), &x, &nb).unwrap().0;
                let fd = (fp - fm) / (2.0 * h);
                let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
                assert!(err < 1e-4, "{v:?} param {i}: fd {fd} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn fits_a_separable_toy_graph() {
        // two triangles with distinct features
        let x = Tensor::matrix(6, 3, vec![
            1.0, 0.0, 0.1, 0.9, 0.1, 0.0, 1.0, 0.2, 0.0, //
            0.0, 1.0, 0.1, 0.1, 0.9, 0.0, 0.0, 1.0, 0.2,
        ])
        .unwrap();
        let nb = Arc::new(
            Neighborhoods::undirected(6, &[(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)]).unwrap(),
        );
        let labels = [0, 0, 0, 1, 1, 1];
        for v in [GnnVariant::Gat, GnnVariant::Gcn] {
            let p = random_params(v, 6);
            let hyper = TrainHyper {
                epochs: 100,
                dropout: 0.0,
                ..Default::default()
            };
            let mut adam = AdamState::new(p.tensors(), AdamConfig::default());
            let (trained, loss) =
                train_epochs(&p, &mut adam, &hyper, SeedStream::new(1), |tape, vars, rng| {
                    let xv = tape.leaf(x.clone());
                    let f = forward_on_tape(tape, p.arch(), vars, xv, &nb, Mode::Eval, rng)?;
                    cross_entropy_on_tape(tape, f.logits, &labels, &[true; 6])
                })
                .unwrap();
            assert!(loss < 0.1, "{v:?} loss {loss}");
            assert_eq!(predict(&trained, &x, &nb).unwrap(), labels.to_vec());
        }
    }

    #[test]
    fn attention_rows_are_normalized() {
        let p = random_params(GnnVariant::Gat, 7);
        let nb = Arc::new(Neighborhoods::undirected(4, &[(0, 1), (0, 2), (2, 3)]).unwrap());
        let mut tape = Tape::new();
        let vars = p.register(&mut tape);
        let xv = tape.leaf(Tensor::full(&[4, 3], 0.3));
        let mut rng = SeedStream::new(0).rng("x");
        let f = forward_on_tape(&mut tape, p.arch(), &vars, xv, &nb, Mode::Eval, &mut rng).unwrap();
        assert_eq!(f.attention.len(), 2);
        for &a in &f.attention {
            let alpha = tape.attention_weights(a).unwrap();
            for t in 0..4 {
                let s: f64 = nb.range(t).map(|e| alpha[e]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
