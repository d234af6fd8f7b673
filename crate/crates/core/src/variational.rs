//! Beta-Bernoulli hierarchy over layer keep probabilities.
//!
//! Each layer's keep probability `π_l` has a `Beta(c/L, c(L-1)/L)` prior and a
//! Kumaraswamy variational posterior. Kumaraswamy has a closed-form inverse
//! CDF, which gives the reparameterized draw `π = (1 - u^{1/b})^{1/a}`.

use crate::error::{contract, Result};
use crate::math::{beta_fn, clamp_unit, digamma, ln_beta, trigamma, EULER_GAMMA, PROB_EPS};
use crate::tensor::Tensor;

/// Kumaraswamy parameters stored as unconstrained logs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KumaraswamyParams {
    pub log_a: f64,
    pub log_b: f64,
}

impl KumaraswamyParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0) {
            return Err(contract!("Kumaraswamy parameters must be positive, got a={a}, b={b}"));
        }
        Ok(Self { log_a: libm::log(a), log_b: libm::log(b) })
    }

    #[inline]
    pub fn a(&self) -> f64 {
        libm::exp(self.log_a)
    }

    #[inline]
    pub fn b(&self) -> f64 {
        libm::exp(self.log_b)
    }

    /// `E[π] = b · B(1 + 1/a, b)`.
    pub fn mean(&self) -> f64 {
        kuma_mean(self.a(), self.b())
    }

    pub fn sample(&self, u: f64) -> f64 {
        kuma_sample(self.a(), self.b(), u)
    }
}

pub fn kuma_mean(a: f64, b: f64) -> f64 {
    b * beta_fn(1.0 + 1.0 / a, b)
}

/// Beta prior on a layer's keep probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaPrior {
    pub c: f64,
    pub layers: usize,
}

impl BetaPrior {
    pub fn new(c: f64, layers: usize) -> Result<Self> {
        if !(c > 0.0) || layers == 0 {
            return Err(contract!("beta prior needs c > 0 and at least one layer"));
        }
        Ok(Self { c, layers })
    }

    pub fn alpha(&self) -> f64 {
        self.c / self.layers as f64
    }

    /// `c(L-1)/L`, or 1 for a single layer where that would vanish.
    pub fn beta(&self) -> f64 {
        if self.layers < 2 {
            1.0
        } else {
            self.c * (self.layers - 1) as f64 / self.layers as f64
        }
    }
}

/// Which closed form to use for `KL(Kumaraswamy ‖ Beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlVariant {
    /// The three-term expression, exact for a `Beta(α, 1)` prior.
    #[default]
    Printed,
    /// Adds `ln B(α, β) + ln α` and the `(β-1)` series, truncated at
    /// [`KL_SERIES_TERMS`] terms.
    FullSeries,
}

pub const KL_SERIES_TERMS: usize = 10;

/// Reparameterized draw. `u` is clamped into `(ε, 1-ε)`.
pub fn kuma_sample(a: f64, b: f64, u: f64) -> f64 {
    kuma_sample_grad(a, b, u).pi
}

/// A Kumaraswamy draw with its partial derivatives in `a` and `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KumaSample {
    pub pi: f64,
    pub d_a: f64,
    pub d_b: f64,
    /// The draw hit the `[ε, 1-ε]` clamp; derivatives are zeroed.
    pub clamped: bool,
}

pub fn kuma_sample_grad(a: f64, b: f64, u: f64) -> KumaSample {
    let ln_u = libm::log(clamp_unit(u));
    let w = libm::exp(ln_u / b);
    let s = -libm::expm1(ln_u / b);
    let ln_s = libm::log(s);
    let pi = libm::exp(ln_s / a);
    if !(pi > PROB_EPS && pi < 1.0 - PROB_EPS) {
        return KumaSample { pi: pi.clamp(PROB_EPS, 1.0 - PROB_EPS), d_a: 0.0, d_b: 0.0, clamped: true };
    }
    let d_a = -pi * ln_s / (a * a);
    let ds_db = w * ln_u / (b * b);
    let d_b = pi / (a * s) * ds_db;
    KumaSample { pi, d_a, d_b, clamped: false }
}

/// `a b π^{a-1} (1 - π^a)^{b-1}`.
pub fn kuma_pdf(pi: f64, a: f64, b: f64) -> Result<f64> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(contract!("Kumaraswamy density is defined on the open interval, got {pi}"));
    }
    if !(a > 0.0 && b > 0.0) {
        return Err(contract!("Kumaraswamy parameters must be positive"));
    }
    let ln_pi = libm::log(pi);
    // 1 - π^a without cancellation near π = 1.
    let tail = -libm::expm1(a * ln_pi);
    Ok(a * b * libm::exp((a - 1.0) * ln_pi) * libm::pow(tail, b - 1.0))
}

/// `KL(Kumaraswamy(a, b) ‖ Beta(c/L, ·))` in the three-term closed form
/// `((a - α)/a)(-γ - Ψ(b) - 1/b) + ln(a b / α) - (b - 1)/b`.
pub fn kl_kuma_beta(a: f64, b: f64, c: f64, layers: usize) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(contract!("Kumaraswamy parameters must be positive"));
    }
    let prior = BetaPrior::new(c, layers)?;
    Ok(kl_kuma_beta_grad(a, b, prior, KlVariant::Printed).0)
}

/// KL value and its partials `(∂/∂a, ∂/∂b)`.
pub fn kl_kuma_beta_grad(a: f64, b: f64, prior: BetaPrior, variant: KlVariant) -> (f64, f64, f64) {
    let alpha = prior.alpha();
    let bracket = -EULER_GAMMA - digamma(b) - 1.0 / b;
    let mut kl = (a - alpha) / a * bracket + libm::log(a * b / alpha) - (b - 1.0) / b;
    let mut d_a = alpha / (a * a) * bracket + 1.0 / a;
    let mut d_b = (a - alpha) / a * (-trigamma(b) + 1.0 / (b * b)) + 1.0 / b - 1.0 / (b * b);

    if variant == KlVariant::FullSeries {
        let beta = prior.beta();
        kl += ln_beta(alpha, beta) + libm::log(alpha);
        let (mut sum, mut sum_da, mut sum_db) = (0.0, 0.0, 0.0);
        let psi_b = digamma(b);
        for m in 1..=KL_SERIES_TERMS {
            let m = m as f64;
            let x = m / a;
            let denom = m + a * b;
            let term = beta_fn(x, b) / denom;
            let psi_xb = digamma(x + b);
            sum += term;
            sum_da += term * ((digamma(x) - psi_xb) * (-m / (a * a)) - b / denom);
            sum_db += term * ((psi_b - psi_xb) - a / denom);
        }
        kl += (beta - 1.0) * b * sum;
        d_a += (beta - 1.0) * b * sum_da;
        d_b += (beta - 1.0) * (sum + b * sum_db);
    }
    (kl, d_a, d_b)
}

/// `|ℰ| · π_keep / 2 · ‖M‖²`: the weight part of the KL for a layer whose
/// weights are nonzero with probability `pi_keep`.
pub fn weight_kl_term(m: &Tensor, pi_keep: f64, n_edges: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&pi_keep) {
        return Err(contract!("keep probability {pi_keep} outside [0, 1]"));
    }
    Ok(n_edges as f64 * pi_keep / 2.0 * m.frobenius_sq())
}

/// Linear KL warm-up `min(1, epoch / ramp)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WarmupSchedule {
    ramp_epochs: usize,
}

impl WarmupSchedule {
    pub fn new(ramp_epochs: usize) -> Result<Self> {
        if ramp_epochs == 0 {
            return Err(contract!("warm-up ramp must be at least one epoch"));
        }
        Ok(Self { ramp_epochs })
    }

    pub fn ramp_epochs(&self) -> usize {
        self.ramp_epochs
    }

    pub fn factor(&self, epoch: usize) -> f64 {
        warmup_factor(epoch, self)
    }
}

pub fn warmup_factor(epoch: usize, schedule: &WarmupSchedule) -> f64 {
    (epoch as f64 / schedule.ramp_epochs as f64).min(1.0)
}
