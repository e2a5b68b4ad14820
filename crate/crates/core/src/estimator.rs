//! Online estimates of the loss-landscape constants and the closed-form
//! convergence bounds built from them.
//!
//! `rho` (Lipschitz), `beta` (smoothness) and the per-client gradient
//! divergences `delta` are estimated from the previous round; the bounds then
//! give the per-round loss surrogate that the scheduler minimizes.

use serde::Serialize;

use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-12;

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelPropertyEstimates {
    pub rho_hat: f64,
    pub beta_hat: f64,
    pub delta_hat: Vec<f64>,
    pub f_star_est: f64,
    pub b1_est: f64,
    pub bias_running_max: f64,
}

impl ModelPropertyEstimates {
    pub fn new(rho: f64, beta: f64, f_star: f64, b1: f64, num_clients: usize) -> Self {
        Self {
            rho_hat: rho,
            beta_hat: beta,
            delta_hat: vec![0.0; num_clients],
            f_star_est: f_star,
            b1_est: b1,
            bias_running_max: 0.0,
        }
    }
}

/// What the server learns about one participant's local update.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticipantRecord {
    pub client: usize,
    /// Local loss at the model the update started from.
    pub loss_start: f64,
    /// Local loss at the uploaded model.
    pub loss_end: f64,
    pub grad_start: Vec<f64>,
    pub grad_end: Vec<f64>,
    /// Distance between uploaded and starting model.
    pub step_norm: f64,
}

/// Everything the refresh step consumes for one round.
#[derive(Debug, Clone, Default)]
pub struct RoundRecords {
    pub participants: Vec<ParticipantRecord>,
    /// Local gradients of every client at the current global model.
    pub client_grads: Option<Vec<Vec<f64>>>,
    pub global_grad: Option<Vec<f64>>,
}

fn max_ratio(records: &[ParticipantRecord], numerator: impl Fn(&ParticipantRecord) -> f64) -> Result<f64> {
    records
        .iter()
        .filter(|r| r.step_norm > NORM_EPS)
        .map(|r| numerator(r) / r.step_norm)
        .filter(|x| x.is_finite() && *x > 0.0)
        .fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |a| a.max(x))))
        .ok_or(Error::DegenerateStep)
}

/// Largest observed `|F_i(theta_i) - F_i(theta)| / ||theta_i - theta||`.
pub fn estimate_rho(records: &[ParticipantRecord]) -> Result<f64> {
    max_ratio(records, |r| (r.loss_end - r.loss_start).abs())
}

/// Largest observed `||grad F_i(theta_i) - grad F_i(theta)|| / ||theta_i - theta||`.
pub fn estimate_beta(records: &[ParticipantRecord]) -> Result<f64> {
    max_ratio(records, |r| distance(&r.grad_end, &r.grad_start))
}

/// Divergence estimates from local and global gradients at one model.
///
/// Returns the per-client estimates and the updated running maximum of
/// `| ||grad F_i|| - ||grad F|| |`, which is shared by every client.
pub fn estimate_delta(local_grads: &[Vec<f64>], global_grad: &[f64], bias_running_max: f64) -> (Vec<f64>, f64) {
    let g_norm = norm(global_grad);
    let bias = local_grads
        .iter()
        .map(|g| (norm(g) - g_norm).abs())
        .fold(bias_running_max, f64::max);
    let delta = local_grads
        .iter()
        .map(|g| bias + normalized_divergence(g, global_grad))
        .collect();
    (delta, bias)
}

/// `|| (||g||/||g_i||) g_i - g ||`; for a vanishing local gradient the supremum
/// over directions, `||g||`, is used.
pub fn normalized_divergence(local: &[f64], global: &[f64]) -> f64 {
    let l_norm = norm(local);
    let g_norm = norm(global);
    if l_norm < NORM_EPS {
        return g_norm;
    }
    let s = g_norm / l_norm;
    local
        .iter()
        .zip(global)
        .map(|(l, g)| (s * l - g).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub fn refresh_estimates(
    records: &RoundRecords,
    estimates: &ModelPropertyEstimates,
    running_max: bool,
) -> ModelPropertyEstimates {
    let mut next = estimates.clone();
    let combine = |prev: f64, new: Result<f64>| match new {
        Ok(x) if running_max => prev.max(x),
        Ok(x) => x,
        Err(_) => prev,
    };
    if !records.participants.is_empty() {
        next.rho_hat = combine(estimates.rho_hat, estimate_rho(&records.participants));
        next.beta_hat = combine(estimates.beta_hat, estimate_beta(&records.participants));
    }
    if let (Some(grads), Some(global)) = (&records.client_grads, &records.global_grad) {
        let (delta, bias) = estimate_delta(grads, global, estimates.bias_running_max);
        next.delta_hat = delta;
        next.bias_running_max = bias;
    }
    next
}

pub fn check_step(eta: f64, beta: f64) -> Result<()> {
    let x = eta * beta;
    if x < 1.0 {
        Ok(())
    } else {
        Err(Error::StepSizeTooLarge(x))
    }
}

/// `(A1, A2)` for a participation pattern; `A2` carries the `2(1 - sum a w)` prefactor.
pub fn coefficients(a: &[bool], w: &[f64], w_tilde: &[f64], delta: &[f64]) -> (f64, f64) {
    let a1 = 2.0
        * w_tilde
            .iter()
            .zip(delta)
            .map(|(wt, d)| (wt - wt * wt) * d)
            .sum::<f64>();
    let covered: f64 = a.iter().zip(w).filter(|(&ai, _)| ai).map(|(_, wi)| wi).sum();
    let a2 = 2.0 * (1.0 - covered).max(0.0) * divergence_mass(a, w, w_tilde, delta);
    (a1.max(0.0), a2.max(0.0))
}

/// `A2` as it appears in the auxiliary-loss lemma, without the coverage prefactor.
pub fn coefficient_a2_unscaled(a: &[bool], w: &[f64], w_tilde: &[f64], delta: &[f64]) -> f64 {
    2.0 * divergence_mass(a, w, w_tilde, delta)
}

fn divergence_mass(a: &[bool], w: &[f64], w_tilde: &[f64], delta: &[f64]) -> f64 {
    (0..a.len())
        .map(|i| {
            let ai = if a[i] { 1.0 } else { 0.0 };
            (w_tilde[i] + w[i] - 2.0 * ai * w[i]) * delta[i] * delta[i]
        })
        .sum()
}

pub fn coefficient_a3(eta: f64, beta: f64, a2: f64, f_gap: f64) -> Result<f64> {
    check_step(eta, beta)?;
    if a2 <= 0.0 {
        return Ok(0.0);
    }
    Ok((eta - eta * eta * beta) * (2.0 * beta * a2 * f_gap.max(0.0)).sqrt() + eta * eta * beta * a2 / 2.0)
}

fn growth(m: f64, eta: f64, beta: f64) -> f64 {
    // (1 + x)^m - 1 without cancellation for small x.
    (m * (eta * beta).ln_1p()).exp_m1()
}

/// Distance bound between the distributed and the auxiliary centralized model after `m` epochs.
pub fn theorem1_bound(m: f64, eta: f64, beta: f64, a1: f64) -> f64 {
    if a1 == 0.0 || m <= 0.0 {
        return 0.0;
    }
    (a1 / beta) * (growth(m, eta, beta) - eta * beta * m).max(0.0)
}

/// Per-client distance bound between the local and the auxiliary model.
pub fn lemma2_bound(m: f64, eta: f64, beta: f64, w_tilde: &[f64], delta: &[f64], i: usize) -> f64 {
    if m <= 0.0 {
        return 0.0;
    }
    let others: f64 = (0..w_tilde.len())
        .filter(|&j| j != i)
        .map(|j| w_tilde[j] * delta[j])
        .sum();
    let c = (1.0 - w_tilde[i]) * delta[i] + others;
    (c / beta) * growth(m, eta, beta)
}

/// The three-term per-round loss bound for `tau` local epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundTerms {
    pub drift: f64,
    pub partial: f64,
    pub descent: f64,
}

impl BoundTerms {
    pub fn total(&self) -> f64 {
        self.drift + self.partial + self.descent
    }
}

pub fn corollary1_terms(
    tau: f64,
    estimates: &ModelPropertyEstimates,
    eta: f64,
    a1: f64,
    a3: f64,
    f_gap: f64,
) -> Result<BoundTerms> {
    let beta = estimates.beta_hat;
    check_step(eta, beta)?;
    let drift = estimates.rho_hat * theorem1_bound(tau, eta, beta, a1);
    let k = (2.0 * eta - eta * eta * beta) / (estimates.b1_est * estimates.b1_est);
    let descent = 2.0 / (k * tau + 2.0 / f_gap);
    Ok(BoundTerms {
        drift,
        partial: tau * a3,
        descent,
    })
}

pub fn corollary1_bound(
    tau: f64,
    estimates: &ModelPropertyEstimates,
    eta: f64,
    a1: f64,
    a3: f64,
    f_gap: f64,
) -> Result<f64> {
    Ok(corollary1_terms(tau, estimates, eta, a1, a3, f_gap)?.total())
}

/// Radical-form bound on the auxiliary model's loss gap after `tau` epochs.
///
/// Evaluated as `2 (sqrt(1 + x) + 1) / s` with `x = tau A3 s`, which is the
/// same quantity with the `0/0` at `A3 = 0` or `tau = 0` removed.
pub fn theorem2_bound(tau: f64, eta: f64, beta: f64, a3: f64, f_gap: f64, b1: f64) -> Result<f64> {
    check_step(eta, beta)?;
    let s = 4.0 / f_gap + (4.0 * eta - 2.0 * eta * eta * beta) * tau / (b1 * b1);
    let x = tau * a3 * s;
    Ok(2.0 * ((1.0 + x).sqrt() + 1.0) / s)
}
