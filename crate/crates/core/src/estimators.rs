//! Gradient estimators for layer-wise drop parameters.
//!
//! The ARM estimator differentiates `E_{z ~ Bernoulli(σ(α))}[L(z)]` with
//! respect to the logit `α` using two loss evaluations that share one vector
//! of uniforms. With `α_l = logit(1 - π_l)` the indicator that is on with
//! probability `σ(α_l)` is the DROP indicator; callers evaluating a keep-mask
//! model pass `1 - z` to the network. The chain rule back to the
//! Kumaraswamy parameters then goes through `dα/dπ = -1/(π(1-π))`.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::sigmoid;
use crate::tape::{Gradients, Var};
use crate::variational::kuma_sample_grad;

/// Uniforms and logits for one ARM step. `uniforms[l]` covers every edge
/// variable of layer `l` (all blocks concatenated).
#[derive(Debug, Clone, PartialEq)]
pub struct ArmDraw {
    pub uniforms: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmEstimate {
    /// Per-layer `∂E[L]/∂α_l` estimates.
    pub grad_alpha: Vec<f64>,
    /// `L(1[u > σ(-α)])`.
    pub loss_first: f64,
    /// `L(1[u < σ(α)])`.
    pub loss_second: f64,
}

/// `(1[u > σ(-α)], 1[u < σ(α)])`.
pub fn arm_pseudo_masks(u: &[f64], alpha: f64) -> (Vec<f64>, Vec<f64>) {
    let lo = sigmoid(-alpha);
    let hi = sigmoid(alpha);
    let first = u.iter().map(|&x| if x > lo { 1.0 } else { 0.0 }).collect();
    let second = u.iter().map(|&x| if x < hi { 1.0 } else { 0.0 }).collect();
    (first, second)
}

/// Shared-parameter ARM estimate: per layer,
/// `g_l = (L(Z₁) - L(Z₂)) · Σ_e (u_e - 1/2)`.
///
/// `loss_eval` receives one pseudo-mask per layer and must be deterministic
/// given its masks.
pub fn arm_gradient<F>(mut loss_eval: F, draw: &ArmDraw) -> Result<ArmEstimate>
where
    F: FnMut(&[Vec<f64>]) -> Result<f64>,
{
    if draw.uniforms.len() != draw.alpha.len() {
        return Err(crate::error::contract!("one logit per layer of uniforms is required"));
    }
    let (first, second): (Vec<_>, Vec<_>) =
        draw.uniforms.iter().zip(&draw.alpha).map(|(u, &a)| arm_pseudo_masks(u, a)).unzip();
    let loss_first = loss_eval(&first)?;
    let loss_second = loss_eval(&second)?;
    if !loss_first.is_finite() || !loss_second.is_finite() {
        return Err(Error::NonFinite("ARM loss evaluation"));
    }
    let delta = loss_first - loss_second;
    let grad_alpha = draw.uniforms.iter().map(|u| delta * u.iter().map(|&x| x - 0.5).sum::<f64>()).collect();
    Ok(ArmEstimate { grad_alpha, loss_first, loss_second })
}

/// Gradient in the Kumaraswamy parameters from a gradient in `α = logit(1 - π)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KumaGradient {
    pub grad_a: f64,
    pub grad_b: f64,
    pub pi: f64,
    /// π sat on the ε clamp; the gradient is zero.
    pub clamped: bool,
}

pub fn chain_to_kuma(grad_alpha: f64, a: f64, b: f64, u_pi: f64) -> KumaGradient {
    let s = kuma_sample_grad(a, b, u_pi);
    let dalpha_dpi = -1.0 / (s.pi * (1.0 - s.pi));
    KumaGradient {
        grad_a: grad_alpha * dalpha_dpi * s.d_a,
        grad_b: grad_alpha * dalpha_dpi * s.d_b,
        pi: s.pi,
        clamped: s.clamped,
    }
}

/// `(∂L/∂a, ∂L/∂b)` read off a backward pass whose drop parameters were
/// recorded as `log_a`, `log_b` leaves.
pub fn concrete_gradient(grads: &Gradients, log_a: Var, log_b: Var, a: f64, b: f64) -> (f64, f64) {
    (grads.scalar(log_a) / a, grads.scalar(log_b) / b)
}
