//! Evidence/belief algebra for binary classification and the evidential loss.
//!
//! A network emits non-negative evidence `(e⁺, e⁻)`. The Beta parameters are
//! `α = e⁺ + 1`, `β = e⁻ + 1`, total evidence `E = α + β`, class probabilities
//! `p⁺ = α/E`, `p⁻ = β/E`, and predictive uncertainty `û = 2/E`.
//!
//! The per-sample loss is the closed-form Bayes risk of the squared error
//! under `Beta(α, β)` plus `λ` times the KL divergence between a
//! label-adjusted Beta and the uniform `Beta(1, 1)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::specfun::{digamma_unchecked, log_gamma_unchecked};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvidencePair {
    pub e_pos: f64,
    pub e_neg: f64,
}

impl EvidencePair {
    pub fn new(e_pos: f64, e_neg: f64) -> Result<Self> {
        for (name, v) in [("e_pos", e_pos), ("e_neg", e_neg)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Domain(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(EvidencePair { e_pos, e_neg })
    }

    pub fn total(&self) -> f64 {
        self.e_pos + self.e_neg
    }

    pub fn to_beta(self) -> BetaParams {
        BetaParams {
            alpha: self.e_pos + 1.0,
            beta: self.e_neg + 1.0,
        }
    }
}

/// Beta distribution parameters; both are ≥ 1 because evidence is non-negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaParams {
    alpha: f64,
    beta: f64,
}

impl BetaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta)] {
            if !(v.is_finite() && v >= 1.0) {
                return Err(Error::Domain(format!(
                    "{name} must be finite and >= 1, got {v}"
                )));
            }
        }
        Ok(BetaParams { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Total evidence `E = α + β`.
    pub fn strength(&self) -> f64 {
        self.alpha + self.beta
    }

    pub fn p_pos(&self) -> f64 {
        self.alpha / self.strength()
    }

    pub fn p_neg(&self) -> f64 {
        self.beta / self.strength()
    }

    /// Predictive uncertainty `û = 2 / (α + β)`, in (0, 1].
    pub fn uncertainty(&self) -> f64 {
        2.0 / self.strength()
    }

    pub fn belief_pos(&self) -> f64 {
        (self.alpha - 1.0) / self.strength()
    }

    pub fn belief_neg(&self) -> f64 {
        (self.beta - 1.0) / self.strength()
    }

    /// Uncertainty mass `u = 1 - b⁺ - b⁻`; agrees with [`Self::uncertainty`].
    pub fn uncertainty_mass(&self) -> f64 {
        1.0 - self.belief_pos() - self.belief_neg()
    }

    pub fn evidence(&self) -> EvidencePair {
        EvidencePair {
            e_pos: self.alpha - 1.0,
            e_neg: self.beta - 1.0,
        }
    }
}

pub fn beta_from_evidence(e: EvidencePair) -> Result<BetaParams> {
    let e = EvidencePair::new(e.e_pos, e.e_neg)?;
    Ok(e.to_beta())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinaryLabel {
    Negative,
    Positive,
}

impl BinaryLabel {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(BinaryLabel::Negative),
            1 => Some(BinaryLabel::Positive),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            BinaryLabel::Negative => 0,
            BinaryLabel::Positive => 1,
        }
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.as_u8())
    }

    pub fn flipped(self) -> Self {
        match self {
            BinaryLabel::Negative => BinaryLabel::Positive,
            BinaryLabel::Positive => BinaryLabel::Negative,
        }
    }

    pub fn is_positive(self) -> bool {
        self == BinaryLabel::Positive
    }
}

impl From<bool> for BinaryLabel {
    fn from(positive: bool) -> Self {
        if positive {
            BinaryLabel::Positive
        } else {
            BinaryLabel::Negative
        }
    }
}

/// Closed-form Bayes risk of the squared error under `Beta(α, β)`:
/// `(y - p⁺)² + (1 - y - p⁻)² + [p⁺(1 - p⁺) + p⁻(1 - p⁻)] / (E + 1)`.
pub fn data_term(y: BinaryLabel, bp: BetaParams) -> f64 {
    let y = y.as_f64();
    let p = bp.p_pos();
    let q = bp.p_neg();
    let e = bp.strength();
    (y - p).powi(2) + (1.0 - y - q).powi(2) + (p * (1.0 - p) + q * (1.0 - q)) / (e + 1.0)
}

/// Label-adjusted parameters for the regularizer: `(1, β)` for `y = 0` and
/// `(α, 1)` for `y = 1`.
pub fn kl_params(y: BinaryLabel, bp: BetaParams) -> (f64, f64) {
    match y {
        BinaryLabel::Negative => (1.0, bp.beta),
        BinaryLabel::Positive => (bp.alpha, 1.0),
    }
}

/// `KL(Beta(a, b) ‖ Beta(1, 1))` for `a, b ≥ 1`.
pub fn kl_to_uniform(a: f64, b: f64) -> f64 {
    if a == 1.0 && b == 1.0 {
        return 0.0;
    }
    let s = a + b;
    let psi_s = digamma_unchecked(s);
    let ln_norm = log_gamma_unchecked(s) - log_gamma_unchecked(a) - log_gamma_unchecked(b);
    let kl = ln_norm
        + (a - 1.0) * (digamma_unchecked(a) - psi_s)
        + (b - 1.0) * (digamma_unchecked(b) - psi_s);
    // Rounding can leave a tiny negative value near (1, 1).
    kl.max(0.0)
}

pub fn kl_term(y: BinaryLabel, bp: BetaParams) -> f64 {
    let (a, b) = kl_params(y, bp);
    kl_to_uniform(a, b)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")))
    }
}

pub fn total_loss(y: BinaryLabel, bp: BetaParams, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(total_loss_unchecked(y, bp, lambda))
}

pub(crate) fn total_loss_unchecked(y: BinaryLabel, bp: BetaParams, lambda: f64) -> f64 {
    let data = data_term(y, bp);
    if lambda == 0.0 {
        data
    } else {
        data + lambda * kl_term(y, bp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossGrad {
    pub d_alpha: f64,
    pub d_beta: f64,
}

/// Partial derivatives of [`total_loss`] with respect to `α` and `β`.
pub fn loss_grad(y: BinaryLabel, bp: BetaParams, lambda: f64) -> Result<LossGrad> {
    check_lambda(lambda)?;
    Ok(loss_grad_unchecked(y, bp, lambda))
}

pub(crate) fn loss_grad_unchecked(y: BinaryLabel, bp: BetaParams, lambda: f64) -> LossGrad {
    // With q = 1 - p the data term reduces to 2(y - p)² + 2p(1 - p)/(E + 1).
    let yv = y.as_f64();
    let (alpha, beta) = (bp.alpha, bp.beta);
    let e = alpha + beta;
    let p = alpha / e;
    let outer = -4.0 * (yv - p) + 2.0 * (1.0 - 2.0 * p) / (e + 1.0);
    let var_part = -2.0 * p * (1.0 - p) / ((e + 1.0) * (e + 1.0));
    let mut d_alpha = outer * beta / (e * e) + var_part;
    let mut d_beta = -outer * alpha / (e * e) + var_part;

    if lambda != 0.0 {
        let (a, b) = kl_params(y, bp);
        // ∂KL/∂a = (a - 1)ψ'(a) - (a + b - 2)ψ'(a + b), symmetric in b.
        let tri_s = trigamma(a + b);
        let d_a = (a - 1.0) * trigamma(a) - (a + b - 2.0) * tri_s;
        let d_b = (b - 1.0) * trigamma(b) - (a + b - 2.0) * tri_s;
        match y {
            BinaryLabel::Negative => d_beta += lambda * d_b,
            BinaryLabel::Positive => d_alpha += lambda * d_a,
        }
    }
    LossGrad { d_alpha, d_beta }
}

/// ψ'(x) for x > 0: upward recurrence then the asymptotic series.
pub(crate) fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 6.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // 1/x + 1/(2x²) + Σ B_2k / x^(2k+1)
    let series = inv2
        * (1.0 / 6.0
            - inv2
                * (1.0 / 30.0
                    - inv2
                        * (1.0 / 42.0
                            - inv2 * (1.0 / 30.0 - inv2 * (5.0 / 66.0 - inv2 * (691.0 / 2730.0 - inv2 * 7.0 / 6.0))))));
    acc + inv + 0.5 * inv2 + inv * series
}

/// Piecewise-constant, non-increasing regularization weight over training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaSchedule {
    pub initial: f64,
    /// Fractions of the total epoch budget at which the weight drops.
    pub decay_points: [f64; 2],
    pub decayed_values: [f64; 2],
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        LambdaSchedule {
            initial: 1.0,
            decay_points: [1.0 / 3.0, 2.0 / 3.0],
            decayed_values: [0.1, 0.001],
        }
    }
}

impl LambdaSchedule {
    pub fn constant(lambda: f64) -> Self {
        LambdaSchedule {
            initial: lambda,
            decay_points: [1.0, 1.0],
            decayed_values: [lambda, lambda],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [v1, v2] = self.decayed_values;
        let [d1, d2] = self.decay_points;
        for v in [self.initial, v1, v2] {
            check_lambda(v)?;
        }
        if !(self.initial >= v1 && v1 >= v2) {
            return Err(Error::Config(format!(
                "lambda schedule must be non-increasing: {} -> {v1} -> {v2}",
                self.initial
            )));
        }
        if !(0.0 <= d1 && d1 <= d2 && d2 <= 1.0) {
            return Err(Error::Config(format!(
                "decay points must satisfy 0 <= {d1} <= {d2} <= 1"
            )));
        }
        Ok(())
    }
}

pub fn lambda_at(schedule: &LambdaSchedule, epoch: usize, total_epochs: usize) -> Result<f64> {
    if epoch >= total_epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} outside 0..{total_epochs}"
        )));
    }
    schedule.validate()?;
    // Tolerance so that epoch 4 of 12 counts as reaching the 1/3 mark.
    let reached = |frac: f64| epoch as f64 >= frac * total_epochs as f64 - 1e-9;
    let [d1, d2] = schedule.decay_points;
    let [v1, v2] = schedule.decayed_values;
    Ok(if reached(d2) && d2 < 1.0 {
        v2
    } else if reached(d1) && d1 < 1.0 {
        v1
    } else {
        schedule.initial
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Monte Carlo estimate of `∫ ‖y - p‖² Beta(p; α, β) dp`, where the norm is
/// over the two-class vector `(p, 1 - p)`.
pub fn bayes_risk_mc(
    y: BinaryLabel,
    bp: BetaParams,
    n_samples: usize,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be >= 1".into()));
    }
    let dist = Beta::new(bp.alpha, bp.beta).map_err(|e| Error::Domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let yv = y.as_f64();
    let (mut mean, mut m2) = (0.0, 0.0);
    for i in 0..n_samples {
        let p: f64 = dist.sample(&mut rng);
        let v = (yv - p).powi(2) + ((1.0 - yv) - (1.0 - p)).powi(2);
        // Welford update
        let delta = v - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (v - mean);
    }
    let var = if n_samples > 1 {
        m2 / (n_samples - 1) as f64
    } else {
        0.0
    };
    Ok(MonteCarloEstimate {
        mean,
        std_error: (var / n_samples as f64).sqrt(),
    })
}
