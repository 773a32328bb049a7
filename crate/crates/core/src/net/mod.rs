//! Fully-connected evidence network.
//!
//! Hidden layers use ReLU. Dropout (inverted, so eval mode needs no rescale)
//! is applied to the last hidden layer only. The two output pre-activations
//! go through the evidence activation to give `(e⁺, e⁻) ≥ 0`.

mod io;
mod train;

pub use io::{load_model, meta_path, save_model, MODEL_FORMAT_VERSION, MODEL_MAGIC};
pub use train::{train, validation_loss, EpochRecord, TrainConfig, TrainedModel};

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::evidential::{loss_grad_unchecked, total_loss_unchecked, EvidencePair};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvidenceActivation {
    #[default]
    Relu,
    /// `ln(1 + eˣ)`; never has a zero gradient, unlike ReLU.
    Softplus,
}

/// ReLU that lets NaN through so divergence is not masked.
fn relu(z: f64) -> f64 {
    if z < 0.0 {
        0.0
    } else {
        z
    }
}

impl EvidenceActivation {
    fn apply(self, z: f64) -> f64 {
        match self {
            EvidenceActivation::Relu => relu(z),
            EvidenceActivation::Softplus => {
                if z > 30.0 {
                    z
                } else {
                    z.exp().ln_1p()
                }
            }
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            EvidenceActivation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            EvidenceActivation::Softplus => 1.0 / (1.0 + (-z).exp()),
        }
    }
}

impl fmt::Display for EvidenceActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvidenceActivation::Relu => "relu",
            EvidenceActivation::Softplus => "softplus",
        })
    }
}

impl FromStr for EvidenceActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(EvidenceActivation::Relu),
            "softplus" => Ok(EvidenceActivation::Softplus),
            other => Err(Error::Config(format!("unknown evidence activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Dense layer `z = W·x + b`; `weights` is `rows × cols` row-major with
/// `rows` outputs and `cols` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Dense {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.cols).zip(&self.bias).map(|(row, b)| {
            b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        }));
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Parameter `k` in file order: weights row-major, then biases.
    pub fn param(&self, k: usize) -> f64 {
        if k < self.weights.len() {
            self.weights[k]
        } else {
            self.bias[k - self.weights.len()]
        }
    }

    fn param_mut(&mut self, k: usize) -> &mut f64 {
        let n_w = self.weights.len();
        if k < n_w {
            &mut self.weights[k]
        } else {
            &mut self.bias[k - n_w]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Dense>,
    dropout: f64,
    activation: EvidenceActivation,
}

/// Gradient with the same layout as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub layers: Vec<Dense>,
}

impl Gradient {
    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias))
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl Network {
    pub fn from_layers(
        layers: Vec<Dense>,
        dropout: f64,
        activation: EvidenceActivation,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {dropout}")));
        }
        let Some(last) = layers.last() else {
            return Err(Error::Config("network needs at least one layer".into()));
        };
        if last.rows != 2 {
            return Err(Error::Config(format!("output layer must have 2 units, has {}", last.rows)));
        }
        for pair in layers.windows(2) {
            if pair[1].cols != pair[0].rows {
                return Err(Error::Shape {
                    expected: pair[0].rows,
                    got: pair[1].cols,
                });
            }
        }
        for l in &layers {
            if l.weights.len() != l.rows * l.cols || l.bias.len() != l.rows {
                return Err(Error::Format(format!(
                    "layer {}x{} has {} weights and {} biases",
                    l.rows,
                    l.cols,
                    l.weights.len(),
                    l.bias.len()
                )));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::Domain("network parameters must be finite".into()));
            }
        }
        Ok(Network {
            layers,
            dropout,
            activation,
        })
    }

    /// He-style uniform initialization, `U(-√(6/fan_in), √(6/fan_in))`, with
    /// zero biases, drawn from the run seed.
    pub fn init(
        input_dim: usize,
        hidden: &[usize],
        dropout: f64,
        activation: EvidenceActivation,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || hidden.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        let mut rng = rng::stream(seed, rng::STREAM_INIT);
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (cols, rows) = (w[0], w[1]);
                let bound = (6.0 / cols as f64).sqrt();
                Dense {
                    rows,
                    cols,
                    weights: (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect(),
                    bias: vec![0.0; rows],
                }
            })
            .collect();
        Network::from_layers(layers, dropout, activation)
    }

    /// Like [`Network::init`] but with biases drawn from `U(-0.5, 0.5)` too.
    /// Zero biases put pre-activations exactly on the ReLU kink whenever a
    /// whole layer is inactive, which breaks finite-difference checks.
    pub fn init_random(
        input_dim: usize,
        hidden: &[usize],
        dropout: f64,
        activation: EvidenceActivation,
        seed: u64,
    ) -> Result<Self> {
        let mut net = Network::init(input_dim, hidden, dropout, activation, seed)?;
        let mut rng = rng::stream(seed, rng::STREAM_INIT);
        // Skip past the weight draws so biases are not correlated with them.
        rng.set_word_pos(1 << 40);
        for layer in &mut net.layers {
            layer.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn activation(&self) -> EvidenceActivation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.rows).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn zero_gradient(&self) -> Gradient {
        Gradient {
            layers: self.layers.iter().map(|l| Dense::zeros(l.rows, l.cols)).collect(),
        }
    }

    fn param_mut(&mut self, layer: usize, k: usize) -> &mut f64 {
        self.layers[layer].param_mut(k)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() == self.input_dim() {
            Ok(())
        } else {
            Err(Error::Shape {
                expected: self.input_dim(),
                got: x.len(),
            })
        }
    }

    /// Dropout multipliers for the last hidden layer: 0 with probability
    /// `rate`, else `1 / (1 - rate)`.
    fn draw_mask<R: Rng + ?Sized>(&self, rng: &mut R, mask: &mut Vec<f64>) {
        mask.clear();
        let Some(last_hidden) = self.layers.len().checked_sub(2).map(|i| &self.layers[i]) else {
            return;
        };
        let width = last_hidden.rows;
        let keep_scale = 1.0 / (1.0 - self.dropout);
        if self.dropout == 0.0 {
            mask.resize(width, 1.0);
        } else {
            mask.extend((0..width).map(|_| {
                if rng.random::<f64>() < self.dropout {
                    0.0
                } else {
                    keep_scale
                }
            }));
        }
    }

    /// Evidence for one input. `rng` drives the dropout mask in train mode
    /// and is untouched in eval mode.
    pub fn forward<R: Rng + ?Sized>(&self, x: &[f64], mode: Mode, rng: &mut R) -> Result<EvidencePair> {
        self.check_input(x)?;
        let mut cache = Cache::default();
        let mask = match mode {
            Mode::Train if self.layers.len() >= 2 => {
                let mut m = Vec::new();
                self.draw_mask(rng, &mut m);
                Some(m)
            }
            _ => None,
        };
        self.forward_cached(x, mask.as_deref(), &mut cache);
        Ok(cache.evidence)
    }

    /// Deterministic eval-mode evidence.
    pub fn evidence(&self, x: &[f64]) -> Result<EvidencePair> {
        self.check_input(x)?;
        let mut cache = Cache::default();
        self.forward_cached(x, None, &mut cache);
        Ok(cache.evidence)
    }

    fn forward_cached(&self, x: &[f64], mask: Option<&[f64]>, cache: &mut Cache) {
        let n_layers = self.layers.len();
        cache.pre.resize_with(n_layers, Vec::new);
        cache.post.resize_with(n_layers, Vec::new);
        for (l, layer) in self.layers.iter().enumerate() {
            let input: &[f64] = if l == 0 { x } else { &cache.post[l - 1] };
            let mut z = std::mem::take(&mut cache.pre[l]);
            layer.apply(input, &mut z);
            let post = &mut cache.post[l];
            post.clear();
            if l + 1 < n_layers {
                post.extend(z.iter().map(|&v| relu(v)));
                if l + 2 == n_layers {
                    if let Some(mask) = mask {
                        post.iter_mut().zip(mask).for_each(|(h, m)| *h *= m);
                    }
                }
            } else {
                post.extend(z.iter().map(|&v| self.activation.apply(v)));
            }
            cache.pre[l] = z;
        }
        let out = &cache.post[n_layers - 1];
        cache.evidence = EvidencePair {
            e_pos: out[0],
            e_neg: out[1],
        };
    }

    /// Mean total loss over `batch` with the dropout masks drawn from `rng`
    /// (train mode) in the same order [`Network::backward`] draws them.
    pub fn batch_loss<R: Rng + ?Sized>(
        &self,
        batch: &[&LabeledSample],
        lambda: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let mut cache = Cache::default();
        let mut mask = Vec::new();
        let mut total = 0.0;
        for s in batch {
            self.check_input(&s.features)?;
            let mask = match mode {
                Mode::Train if self.layers.len() >= 2 => {
                    self.draw_mask(rng, &mut mask);
                    Some(mask.as_slice())
                }
                _ => None,
            };
            self.forward_cached(&s.features, mask, &mut cache);
            total += total_loss_unchecked(s.label, cache.evidence.to_beta(), lambda);
        }
        Ok(total / batch.len() as f64)
    }

    /// Exact gradient of the mean total loss over `batch` (train-mode
    /// dropout masks from `rng`), and the loss itself.
    pub fn backward<R: Rng + ?Sized>(
        &self,
        batch: &[&LabeledSample],
        lambda: f64,
        rng: &mut R,
    ) -> Result<(f64, Gradient)> {
        self.backward_mode(batch, lambda, Mode::Train, rng)
    }

    pub fn backward_mode<R: Rng + ?Sized>(
        &self,
        batch: &[&LabeledSample],
        lambda: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(f64, Gradient)> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
        }
        let scale = 1.0 / batch.len() as f64;
        let n_layers = self.layers.len();
        let mut grad = self.zero_gradient();
        let mut cache = Cache::default();
        let mut mask = Vec::new();
        let mut delta: Vec<f64> = Vec::new();
        let mut next_delta: Vec<f64> = Vec::new();
        let mut total = 0.0;

        for s in batch {
            self.check_input(&s.features)?;
            let mask_ref = match mode {
                Mode::Train if n_layers >= 2 => {
                    self.draw_mask(rng, &mut mask);
                    Some(mask.as_slice())
                }
                _ => None,
            };
            self.forward_cached(&s.features, mask_ref, &mut cache);
            let bp = cache.evidence.to_beta();
            total += total_loss_unchecked(s.label, bp, lambda);
            let g = loss_grad_unchecked(s.label, bp, lambda);

            // dL/dz at the output; α = e⁺ + 1 so dα/de⁺ = 1.
            let z_out = &cache.pre[n_layers - 1];
            delta.clear();
            delta.push(scale * g.d_alpha * self.activation.derivative(z_out[0]));
            delta.push(scale * g.d_beta * self.activation.derivative(z_out[1]));

            for l in (0..n_layers).rev() {
                let layer = &self.layers[l];
                let input: &[f64] = if l == 0 { &s.features } else { &cache.post[l - 1] };
                let gl = &mut grad.layers[l];
                for (r, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    gl.bias[r] += d;
                    let row = &mut gl.weights[r * layer.cols..(r + 1) * layer.cols];
                    row.iter_mut().zip(input).for_each(|(w, v)| *w += d * v);
                }
                if l == 0 {
                    break;
                }
                // Back through W, the dropout mask (only below the output
                // layer) and the ReLU of layer l - 1.
                next_delta.clear();
                next_delta.resize(layer.cols, 0.0);
                for (r, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
                    next_delta.iter_mut().zip(row).for_each(|(nd, w)| *nd += d * w);
                }
                if l == n_layers - 1 {
                    if let Some(mask) = mask_ref {
                        next_delta.iter_mut().zip(mask).for_each(|(nd, m)| *nd *= m);
                    }
                }
                let z_prev = &cache.pre[l - 1];
                next_delta
                    .iter_mut()
                    .zip(z_prev)
                    .for_each(|(nd, z)| if *z <= 0.0 { *nd = 0.0 });
                std::mem::swap(&mut delta, &mut next_delta);
            }
        }
        Ok((total * scale, grad))
    }
}

#[derive(Debug, Default)]
struct Cache {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    evidence: EvidencePair,
}

/// Anything that maps a feature vector to evidence deterministically.
pub trait EvidenceModel {
    fn input_dim(&self) -> usize;
    fn evidence(&self, x: &[f64]) -> Result<EvidencePair>;
}

impl EvidenceModel for Network {
    fn input_dim(&self) -> usize {
        Network::input_dim(self)
    }

    fn evidence(&self, x: &[f64]) -> Result<EvidencePair> {
        Network::evidence(self, x)
    }
}

/// Central finite-difference check of [`Network::backward`]. Returns the
/// largest error `|analytic - numeric| / max(|analytic|, |numeric|, 1e-2)`,
/// which is ≤ 1e-4 exactly when the difference is within 1e-4 relative or
/// 1e-6 absolute.
pub fn gradient_check(
    net: &Network,
    batch: &[&LabeledSample],
    lambda: f64,
    seed: u64,
    step: f64,
) -> Result<f64> {
    let fresh = || rng::stream(seed, rng::STREAM_DROPOUT);
    let (_, analytic) = net.backward(batch, lambda, &mut fresh())?;
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for l in 0..net.layers.len() {
        for k in 0..net.layers[l].param_count() {
            let original = *probe.param_mut(l, k);
            *probe.param_mut(l, k) = original + step;
            let plus = probe.batch_loss(batch, lambda, Mode::Train, &mut fresh())?;
            *probe.param_mut(l, k) = original - step;
            let minus = probe.batch_loss(batch, lambda, Mode::Train, &mut fresh())?;
            *probe.param_mut(l, k) = original;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.layers[l].param(k);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests;
