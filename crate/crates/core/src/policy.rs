//! Tanh-squashed Gaussian actor: sampling, log-density and entropy.

use rand::Rng;
use rand_distr::StandardNormal;

pub use crate::diff::squashed_gaussian_log_prob;
use crate::diff::HALF_LN_2PI;

/// Per-sample head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub mu: Vec<f64>,
    pub log_std: Vec<f64>,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionSample {
    /// Pre-squash Gaussian draw `ã`.
    pub pre: Vec<f64>,
    /// `a_max ∘ tanh(ã)`
    pub action: Vec<f64>,
    pub log_prob: f64,
}

/// Draws `ã ~ N(μ, diag σ²)` and squashes it.
pub fn sample_action<R: Rng>(out: &PolicyOutput, a_max: &[f64], rng: &mut R) -> ActionSample {
    let pre: Vec<f64> = out
        .mu
        .iter()
        .zip(&out.log_std)
        .map(|(m, l)| m + l.exp() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    action_from_pre(out, a_max, pre)
}

/// Squashes a given pre-squash vector and scores it under `out`.
pub fn action_from_pre(out: &PolicyOutput, a_max: &[f64], pre: Vec<f64>) -> ActionSample {
    let action = pre.iter().zip(a_max).map(|(p, a)| a * p.tanh()).collect();
    let log_prob = squashed_gaussian_log_prob(&out.mu, &out.log_std, &pre, a_max);
    ActionSample { pre, action, log_prob }
}

/// Recomputes `log π(a|h)` from the stored pre-squash sample.
pub fn log_prob_of(out: &PolicyOutput, pre: &[f64], a_max: &[f64]) -> f64 {
    squashed_gaussian_log_prob(&out.mu, &out.log_std, pre, a_max)
}

/// `a_max ∘ tanh(μ)`, the evaluation action.
pub fn deterministic_action(out: &PolicyOutput, a_max: &[f64]) -> Vec<f64> {
    out.mu.iter().zip(a_max).map(|(m, a)| a * m.tanh()).collect()
}

/// Entropy of the pre-squash Gaussian, `Σ_i (½ ln(2πe) + ln σ_i)`.
pub fn entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|l| HALF_LN_2PI + 0.5 + l).sum()
}

/// Unit action limits in network space.
pub fn unit_limits(dim: usize) -> Vec<f64> {
    vec![1.0; dim]
}
