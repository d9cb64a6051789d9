//! Frozen gradient-encoding network shared by clients and server.
//!
//! A client encodes a class prototype `P` as the gradient of
//! `CE(Γ(P), c)` with respect to every layer of a randomly initialized MLP
//! `Γ`. The server rebuilds `Γ` from the same seed and searches for a vector
//! whose gradient matches. The gradient is written out as an explicit
//! backward pass on the tape so the matching loss can be differentiated with
//! respect to the input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_rows, SeedStream, Tape, Tensor, Var};

/// Hidden widths of the encoding MLP.
pub const ENCODING_HIDDEN: [usize; 3] = [128, 128, 64];

/// Frozen MLP `F → 128 → 128 → 64 → C` with ReLU between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingNet {
    /// `(W, b)` per layer, `W` shaped `in × out`, `b` shaped `1 × out`.
    layers: Vec<(Tensor, Tensor)>,
}

/// Per-layer `(∂W, ∂b)` gradients of one class prototype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeGradientPacket {
    pub client: usize,
    pub task: usize,
    pub layers: Vec<(Tensor, Tensor)>,
}

impl PrototypeGradientPacket {
    pub fn final_bias_gradient(&self) -> &[f64] {
        self.layers.last().map(|(_, b)| b.data()).unwrap_or(&[])
    }
}

impl EncodingNet {
    /// Uniform `±1/sqrt(fan_in)` weights and biases drawn from `seed`. Every
    /// party calling this with the same arguments gets identical parameters.
    pub fn new(seed: u64, input_dim: usize, num_classes: usize) -> Self {
        Self::with_hidden(seed, input_dim, &ENCODING_HIDDEN, num_classes)
    }

    pub fn with_hidden(seed: u64, input_dim: usize, hidden: &[usize], num_classes: usize) -> Self {
        let mut rng = SeedStream::new(seed).rng("encoding-net");
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(num_classes);
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let mut draw = |n: usize| -> Vec<f64> {
                    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
                };
                let weight = Tensor::matrix(w[0], w[1], draw(w[0] * w[1])).expect("sized");
                let bias = Tensor::matrix(1, w[1], draw(w[1])).expect("sized");
                (weight, bias)
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[(Tensor, Tensor)] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("at least one layer").0.cols()
    }

    fn check_input(&self, len: usize, class: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(Error::shape(
                "encoding net",
                format!("input of length {len}, net expects {}", self.input_dim()),
            ));
        }
        if class >= self.num_classes() {
            return Err(Error::Invalid(format!(
                "class {class} outside {} encoding classes",
                self.num_classes()
            )));
        }
        Ok(())
    }

    /// Logits `Γ(x)` for one input row.
    pub fn logits(&self, x: &[f64]) -> Result<Tensor> {
        let mut a = Tensor::row_vector(x.to_vec())?;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let mut z = a.matmul(w)?;
            z.add_scaled(b, 1.0)?;
            a = if i + 1 < self.layers.len() {
                z.map(|v| v.max(0.0))
            } else {
                z
            };
        }
        Ok(a)
    }

    /// Gradient of `CE(Γ(x), class)` with respect to every layer.
    pub fn encode(&self, x: &[f64], class: usize) -> Result<Vec<(Tensor, Tensor)>> {
        self.check_input(x.len(), class)?;
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::row_vector(x.to_vec())?);
        let grads = self.gradient_graph(&mut tape, xv, class)?;
        Ok(grads
            .into_iter()
            .map(|(w, b)| (tape.value(w).clone(), tape.value(b).clone()))
            .collect())
    }

    /// Builds the packet for prototype `x` of class position `class`.
    pub fn packet(
        &self,
        x: &[f64],
        class: usize,
        client: usize,
        task: usize,
    ) -> Result<PrototypeGradientPacket> {
        Ok(PrototypeGradientPacket {
            client,
            task,
            layers: self.encode(x, class)?,
        })
    }

    /// Records the layer gradients of `CE(Γ(x), class)` as differentiable
    /// functions of the `1 × F` input `x`.
    ///
    /// Backward recursion: `δ_L = softmax(z_L) − y`, `δ_i = (δ_{i+1} W_{i+1}ᵀ)
    /// ⊙ 1[z_i > 0]`, `∂W_i = a_{i−1}ᵀ δ_i`, `∂b_i = δ_i`. The ReLU masks are
    /// piecewise constant, so treating them as constants is exact almost
    /// everywhere.
    pub fn gradient_graph(&self, tape: &mut Tape, x: Var, class: usize) -> Result<Vec<(Var, Var)>> {
        self.gradient_graph_with(tape, x, class, None)
    }

    /// As [`Self::gradient_graph`], but with every hidden unit's on/off state
    /// fixed to `pattern` instead of read from `x`. The result is then a
    /// smooth function of `x` that agrees with the true gradient wherever
    /// `x` produces that pattern.
    fn gradient_graph_with(
        &self,
        tape: &mut Tape,
        x: Var,
        class: usize,
        pattern: Option<&[Tensor]>,
    ) -> Result<Vec<(Var, Var)>> {
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n);
        let mut a = x;
        let mut z = x;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            inputs.push(a);
            let wv = tape.leaf(w.clone());
            let bv = tape.leaf(b.clone());
            let prod = tape.matmul(a, wv)?;
            z = tape.add(prod, bv)?;
            if i + 1 < n {
                match pattern {
                    Some(p) => {
                        masks.push(p[i].clone());
                        a = tape.mul_const(z, p[i].clone())?;
                    }
                    None => {
                        masks.push(tape.value(z).map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
                        a = tape.relu(z);
                    }
                }
            }
        }
        let probs = tape.softmax(z);
        let mut onehot = Tensor::zeros(&[1, self.num_classes()]);
        onehot.set(0, class, 1.0);
        let y = tape.leaf(onehot);
        let mut delta = tape.sub(probs, y)?;

        let mut out = vec![None; n];
        for i in (0..n).rev() {
            let a_t = tape.transpose(inputs[i]);
            let gw = tape.matmul(a_t, delta)?;
            out[i] = Some((gw, delta));
            if i > 0 {
                let w_t = tape.leaf(self.layers[i].0.transpose());
                let back = tape.matmul(delta, w_t)?;
                delta = tape.mul_const(back, masks[i - 1].clone())?;
            }
        }
        Ok(out.into_iter().map(|g| g.expect("filled")).collect())
    }

    /// Gradient-matching loss `Σ_i ‖g_i − ĝ_i(x)‖²` and its gradient in `x`.
    pub fn matching_loss(
        &self,
        target: &[(Tensor, Tensor)],
        class: usize,
        x: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        self.matching_loss_with(target, class, x, None)
    }

    /// Exact matching loss without its gradient.
    pub fn matching_value(&self, target: &[(Tensor, Tensor)], class: usize, x: &[f64]) -> Result<f64> {
        if target.len() != self.layers.len() {
            return Err(Error::shape("matching loss", "packet layer count differs from net"));
        }
        let grads = self.encode(x, class)?;
        let mut total = 0.0;
        for ((gw, gb), (tw, tb)) in grads.iter().zip(target) {
            for (g, t) in [(gw, tw), (gb, tb)] {
                if !g.same_shape(t) {
                    return Err(Error::shape("matching loss", "packet tensor shape differs from net"));
                }
                total += g.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
        }
        if !total.is_finite() {
            return Err(Error::Numerical("gradient-matching loss is not finite".into()));
        }
        Ok(total)
    }

    /// Hidden-unit activation pattern behind a packet. A hidden layer's bias
    /// gradient is `δ_i`, which is exactly zero for units that were inactive.
    pub fn activation_pattern(&self, target: &[(Tensor, Tensor)]) -> Result<Vec<Tensor>> {
        if target.len() != self.layers.len() {
            return Err(Error::shape("activation pattern", "packet layer count differs from net"));
        }
        Ok(target[..target.len() - 1]
            .iter()
            .map(|(_, b)| b.map(|v| if v != 0.0 { 1.0 } else { 0.0 }))
            .collect())
    }

    /// Matching loss and gradient with hidden units held to `pattern` (see
    /// [`Self::activation_pattern`]). Without a pattern this is the exact
    /// loss; with the packet's own pattern it is a smooth objective sharing
    /// the exact loss's zero at the true input.
    pub fn matching_loss_with(
        &self,
        target: &[(Tensor, Tensor)],
        class: usize,
        x: &[f64],
        pattern: Option<&[Tensor]>,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_input(x.len(), class)?;
        if target.len() != self.layers.len() {
            return Err(Error::shape("matching loss", "packet layer count differs from net"));
        }
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::row_vector(x.to_vec())?);
        let grads = self.gradient_graph_with(&mut tape, xv, class, pattern)?;
        let mut terms = Vec::with_capacity(2 * grads.len());
        for ((gw, gb), (tw, tb)) in grads.into_iter().zip(target) {
            for (g, t) in [(gw, tw), (gb, tb)] {
                let tv = tape.leaf(t.clone());
                let diff = tape.sub(g, tv)?;
                let sq = tape.mul(diff, diff)?;
                terms.push(tape.sum(sq));
            }
        }
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = tape.add(loss, t)?;
        }
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numerical("gradient-matching loss is not finite".into()));
        }
        let mut g = tape.backward(loss)?;
        let grad = g.take(xv).expect("input feeds the loss").into_data();
        Ok((value, grad))
    }

    /// Softmax prediction of the net, used only in tests and diagnostics.
    pub fn probabilities(&self, x: &[f64]) -> Result<Tensor> {
        Ok(softmax_rows(&self.logits(x)?))
    }
}
