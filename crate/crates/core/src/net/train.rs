use rand::seq::SliceRandom;

use super::{EvidenceActivation, EvidenceModel, Gradient, Network};
use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::evidential::{lambda_at, total_loss_unchecked, EvidencePair, LambdaSchedule};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive non-improving validation epochs tolerated before stopping.
    pub patience: usize,
    pub schedule: LambdaSchedule,
    pub dropout: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// 0 gives plain SGD.
    pub momentum: f64,
    pub activation: EvidenceActivation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 128,
            max_epochs: 12,
            patience: 3,
            schedule: LambdaSchedule::default(),
            dropout: 0.5,
            seed: 0,
            hidden: vec![64, 64],
            momentum: 0.0,
            activation: EvidenceActivation::Relu,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size and max epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda: f64,
    /// Mean total loss over the epoch's mini-batches (train mode).
    pub train_loss: f64,
    /// Mean total loss at this epoch's λ on the validation set (eval mode).
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub network: Network,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters `network` holds.
    pub best_epoch: usize,
    pub config: TrainConfig,
}

impl EvidenceModel for TrainedModel {
    fn input_dim(&self) -> usize {
        self.network.input_dim()
    }

    fn evidence(&self, x: &[f64]) -> Result<EvidencePair> {
        self.network.evidence(x)
    }
}

/// Mean total loss of `net` over `samples` at `lambda`, dropout off. The
/// schedule only lowers λ, so a decay never reads as a regression.
pub fn validation_loss(net: &Network, samples: &[LabeledSample], lambda: f64) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += total_loss_unchecked(s.label, net.evidence(&s.features)?.to_beta(), lambda);
    }
    Ok(total / samples.len() as f64)
}

/// Mini-batch SGD on the mean evidential loss.
///
/// Seeds: weights from `STREAM_INIT`, epoch shuffles from `STREAM_SHUFFLE`,
/// dropout masks from `STREAM_DROPOUT`, all keyed by `cfg.seed`. With a
/// non-empty `val`, training stops once the validation loss has failed to
/// improve `max(patience, 1)` epochs in a row, and the best epoch's parameters
/// are returned. An empty `val` runs all `max_epochs`.
pub fn train(
    data: &[LabeledSample],
    val: &[LabeledSample],
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let Some(first) = data.first() else {
        return Err(Error::Config("training set is empty".into()));
    };
    let mut net = Network::init(
        first.features.len(),
        &cfg.hidden,
        cfg.dropout,
        cfg.activation,
        cfg.seed,
    )?;
    let mut velocity = net.zero_gradient();
    let mut shuffle_rng = rng::stream(cfg.seed, rng::STREAM_SHUFFLE);
    let mut dropout_rng = rng::stream(cfg.seed, rng::STREAM_DROPOUT);
    let mut order: Vec<usize> = (0..data.len()).collect();

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Network)> = None;
    let mut stale = 0usize;

    for epoch in 0..cfg.max_epochs {
        let lambda = lambda_at(&cfg.schedule, epoch, cfg.max_epochs)?;
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledSample> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, grad) = net.backward(&batch, lambda, &mut dropout_rng)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += loss * batch.len() as f64;
            apply_update(&mut net, &mut velocity, &grad, cfg.learning_rate, cfg.momentum);
        }
        if net
            .layers()
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias))
            .any(|v| !v.is_finite())
        {
            return Err(Error::Diverged { epoch });
        }

        let val_loss = if val.is_empty() {
            None
        } else {
            let v = validation_loss(&net, val, lambda)?;
            if !v.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            Some(v)
        };
        history.push(EpochRecord {
            epoch,
            lambda,
            train_loss: loss_sum / data.len() as f64,
            val_loss,
        });

        if let Some(v) = val_loss {
            match &best {
                Some((best_v, _, _)) if v >= *best_v => {
                    stale += 1;
                    if stale >= cfg.patience.max(1) {
                        break;
                    }
                }
                _ => {
                    best = Some((v, epoch, net.clone()));
                    stale = 0;
                }
            }
        }
    }

    let (network, best_epoch) = match best {
        Some((_, epoch, net)) => (net, epoch),
        None => (net, history.len() - 1),
    };
    Ok(TrainedModel {
        network,
        history,
        best_epoch,
        config: cfg.clone(),
    })
}

fn apply_update(net: &mut Network, velocity: &mut Gradient, grad: &Gradient, lr: f64, momentum: f64) {
    for ((layer, vel), g) in net.layers_mut().iter_mut().zip(&mut velocity.layers).zip(&grad.layers) {
        let params = layer.weights.iter_mut().chain(layer.bias.iter_mut());
        let vels = vel.weights.iter_mut().chain(vel.bias.iter_mut());
        let grads = g.weights.iter().chain(&g.bias);
        for ((p, v), g) in params.zip(vels).zip(grads) {
            *v = momentum * *v - lr * g;
            *p += *v;
        }
    }
}
