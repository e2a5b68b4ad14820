//! Joint local-epoch and uplink-power solver for a fixed channel allocation.
//!
//! With participants and channels fixed, the per-round objective `J2` is
//! convex in the (relaxed) epoch count and, per client, monotone in the
//! upload energy. The solver alternates the exact epoch update (bisection on
//! the analytic derivative) with the closed-form power update (Lambert
//! `W_{-1}` inversion of the upload energy) until both stop moving.

mod lambert;

pub use lambert::lambert_w_minus1;

use rand::Rng;
use serde::Serialize;

use crate::channel::{shannon_rate, upload_energy_at_power};
use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::estimator::{check_step, corollary1_bound, ModelPropertyEstimates};

const LN2: f64 = std::f64::consts::LN_2;
const BISECTION_ITERS: usize = 50;
const BISECTION_TOL: f64 = 1e-9;
const TAU_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InnerParticipant {
    pub client: usize,
    pub epoch_energy: f64,
    pub epoch_latency: f64,
    pub queue: f64,
    /// Gain on the channel allocated to this client.
    pub gain: f64,
}

/// The `V`-weighted loss-bound part of `J2` as a function of the epoch count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PenaltyModel {
    pub v: f64,
    pub eta: f64,
    pub rho: f64,
    pub beta: f64,
    pub a1: f64,
    pub a3: f64,
    pub b1: f64,
    pub f_gap: f64,
}

impl PenaltyModel {
    pub fn new(v: f64, eta: f64, est: &ModelPropertyEstimates, a1: f64, a3: f64, f_gap: f64) -> Result<Self> {
        check_step(eta, est.beta_hat)?;
        Ok(Self {
            v,
            eta,
            rho: est.rho_hat,
            beta: est.beta_hat,
            a1,
            a3,
            b1: est.b1_est,
            f_gap,
        })
    }

    fn estimates(&self) -> ModelPropertyEstimates {
        ModelPropertyEstimates::new(self.rho, self.beta, 0.0, self.b1, 0)
    }

    fn k(&self) -> f64 {
        (2.0 * self.eta - self.eta * self.eta * self.beta) / (self.b1 * self.b1)
    }

    /// The loss bound itself (not multiplied by `V`).
    pub fn bound(&self, tau: f64) -> f64 {
        if tau >= 1.0 {
            return corollary1_bound(tau, &self.estimates(), self.eta, self.a1, self.a3, self.f_gap)
                .expect("step size checked at construction");
        }
        // Below one epoch the drift term is kept in its smooth convex form.
        let x = self.eta * self.beta;
        let drift = self.rho * self.a1 / self.beta * ((tau * x.ln_1p()).exp_m1() - x * tau);
        drift + tau * self.a3 + 2.0 / (self.k() * tau + 2.0 / self.f_gap)
    }

    pub fn value(&self, tau: f64) -> f64 {
        if self.v == 0.0 {
            return 0.0;
        }
        self.v * self.bound(tau)
    }

    pub fn derivative(&self, tau: f64) -> f64 {
        if self.v == 0.0 {
            return 0.0;
        }
        let x = self.eta * self.beta;
        let drift = self.rho * self.a1 / self.beta * (x.ln_1p() * (tau * x.ln_1p()).exp() - x);
        let k = self.k();
        let denom = k * tau + 2.0 / self.f_gap;
        self.v * (drift + self.a3 - 2.0 * k / (denom * denom))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InnerContext {
    pub participants: Vec<InnerParticipant>,
    /// `sum over idle clients of E_add^2 - 2 Z E_add`.
    pub idle_queue_term: f64,
    pub t_down: f64,
    pub penalty: PenaltyModel,
    pub e_add: f64,
    pub t_max: f64,
    pub model_bits: f64,
    pub b_up: f64,
    pub n0: f64,
    pub p_max: f64,
    pub eps_p: f64,
    pub eps_tau: f64,
    pub max_iters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TauCase {
    /// Derivative at zero is non-negative.
    AtOne,
    /// Stationary point inside the latency window.
    Interior,
    /// Stationary point beyond the window; clipped to its floor.
    Clipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerWindow {
    pub window: f64,
    pub p_min: f64,
    pub e_min: f64,
    pub e_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InnerSolution {
    pub tau: u32,
    /// Power per participant, in `InnerContext::participants` order.
    pub powers: Vec<f64>,
    pub j2: f64,
    pub relaxed_tau: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `J2` after every alternation step.
    pub trace: Vec<f64>,
}

impl InnerContext {
    pub fn new(
        cfg: &SystemConfig,
        participants: Vec<InnerParticipant>,
        idle_queue_term: f64,
        t_down: f64,
        penalty: PenaltyModel,
    ) -> Self {
        Self {
            participants,
            idle_queue_term,
            t_down,
            penalty,
            e_add: cfg.e_add,
            t_max: cfg.t_max,
            model_bits: cfg.model_bits,
            b_up: cfg.b_up,
            n0: cfg.n0,
            p_max: cfg.p_max,
            eps_p: cfg.eps_p,
            eps_tau: cfg.eps_tau,
            max_iters: cfg.inner_max_iters,
        }
    }

    pub fn upload_energy(&self, i: usize, p: f64) -> f64 {
        upload_energy_at_power(p, self.participants[i].gain, self.model_bits, self.b_up, self.n0)
    }

    pub fn upload_time(&self, i: usize, p: f64) -> f64 {
        let rate = shannon_rate(p, self.participants[i].gain, self.b_up, self.n0);
        if rate > 0.0 {
            self.model_bits / rate
        } else {
            f64::INFINITY
        }
    }

    fn queue_residual(&self, i: usize, tau: f64, p: f64) -> f64 {
        let c = &self.participants[i];
        c.queue + tau * c.epoch_energy + self.upload_energy(i, p) - self.e_add
    }

    pub fn j2_objective(&self, tau: f64, p: &[f64]) -> f64 {
        let queue: f64 = (0..self.participants.len())
            .map(|i| self.queue_residual(i, tau, p[i]).powi(2))
            .sum();
        queue + self.idle_queue_term + self.penalty.value(tau)
    }

    pub fn j2_tau_derivative(&self, tau: f64, p: &[f64]) -> f64 {
        let queue: f64 = (0..self.participants.len())
            .map(|i| 2.0 * self.participants[i].epoch_energy * self.queue_residual(i, tau, p[i]))
            .sum();
        queue + self.penalty.derivative(tau)
    }

    /// Largest (continuous) epoch count every participant can finish within the
    /// latency budget at powers `p`.
    pub fn tau_max(&self, p: &[f64]) -> Result<f64> {
        let t = (0..self.participants.len())
            .map(|i| (self.t_max - self.t_down - self.upload_time(i, p[i])) / self.participants[i].epoch_latency)
            .fold(f64::INFINITY, f64::min);
        if t >= 1.0 {
            Ok(t)
        } else if t >= 1.0 - TAU_SLACK {
            Ok(1.0)
        } else {
            Err(Error::InfeasibleLatency(t))
        }
    }

    /// Minimizer of `J2` over continuous `tau` in `[1, tau_max]` at fixed powers.
    pub fn relaxed_tau(&self, p: &[f64]) -> Result<(f64, TauCase)> {
        let top = self.tau_max(p)?;
        if self.j2_tau_derivative(0.0, p) >= 0.0 {
            return Ok((1.0, TauCase::AtOne));
        }
        if self.j2_tau_derivative(top, p) <= 0.0 {
            return Ok((top, TauCase::Clipped));
        }
        let (mut lo, mut hi) = (0.0, top);
        for _ in 0..BISECTION_ITERS {
            let mid = 0.5 * (lo + hi);
            if self.j2_tau_derivative(mid, p) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < BISECTION_TOL {
                break;
            }
        }
        Ok(((0.5 * (lo + hi)).max(1.0), TauCase::Interior))
    }

    /// Integer epoch count at fixed powers: the better of the two integers
    /// around the relaxed minimizer that fit the latency budget.
    pub fn optimal_tau(&self, p: &[f64]) -> Result<u32> {
        let (t, _) = self.relaxed_tau(p)?;
        let lo = t.floor().max(1.0);
        let hi = t.ceil();
        if hi > lo && hi <= self.tau_max(p)? && self.j2_objective(hi, p) < self.j2_objective(lo, p) {
            return Ok(hi as u32);
        }
        Ok(lo as u32)
    }

    pub fn power_window(&self, tau: f64, i: usize) -> Result<PowerWindow> {
        let c = &self.participants[i];
        let window = self.t_max - self.t_down - tau * c.epoch_latency;
        if window <= 0.0 {
            return Err(Error::InfeasibleLatency(window));
        }
        let snr = (self.model_bits / (self.b_up * window) * LN2).exp_m1();
        let mut p_min = (snr * self.b_up * self.n0 / c.gain).max(f64::MIN_POSITIVE);
        if !p_min.is_finite() || p_min > self.p_max * (1.0 + TAU_SLACK) {
            return Err(Error::InfeasiblePower {
                required: p_min,
                p_max: self.p_max,
            });
        }
        p_min = p_min.min(self.p_max);
        Ok(PowerWindow {
            window,
            p_min,
            e_min: p_min * window,
            e_max: self.upload_energy(i, self.p_max),
        })
    }

    /// Power that brings the client's round consumption closest to its energy
    /// target `E_add - Z - tau E`, within the latency-feasible window.
    pub fn optimal_power(&self, tau: f64, i: usize) -> Result<f64> {
        let win = self.power_window(tau, i)?;
        let c = &self.participants[i];
        let target = self.e_add - c.queue - tau * c.epoch_energy;
        if target <= 0.0 || target < win.e_min {
            return Ok(win.p_min);
        }
        if target > win.e_max {
            return Ok(self.p_max);
        }
        let ratio = self.model_bits * self.n0 * LN2 / (target * c.gain);
        if ratio >= 1.0 {
            return Ok(win.p_min);
        }
        let w = lambert_w_minus1(-ratio * (-ratio).exp())?;
        let p = -target * self.b_up * w / (self.model_bits * LN2) - self.b_up * self.n0 / c.gain;
        Ok(p.clamp(win.p_min, self.p_max))
    }

    pub fn optimal_powers(&self, tau: f64) -> Result<Vec<f64>> {
        (0..self.participants.len()).map(|i| self.optimal_power(tau, i)).collect()
    }

    /// `J2` at an integer epoch count with every power re-solved.
    fn profile(&self, tau: f64) -> Option<(f64, Vec<f64>)> {
        let p = self.optimal_powers(tau).ok()?;
        Some((self.j2_objective(tau, &p), p))
    }

    /// Integer epoch count next to a relaxed one, with powers re-solved.
    ///
    /// Both neighbours are tried, then the count walks one epoch at a time
    /// while `J2` keeps dropping. In upload-energy coordinates `J2` is
    /// jointly convex, so its profile over integers is too and the walk ends
    /// at the integer optimum even when the alternation stalled short of it.
    fn round_tau(&self, tau: f64) -> Result<(f64, Vec<f64>, f64)> {
        let lo = tau.floor().max(1.0);
        let (j_lo, p_lo) = self.profile(lo).ok_or(Error::Infeasible)?;
        let mut best = (lo, j_lo, p_lo);
        if let Some((j, p)) = self.profile(tau.ceil()).filter(|_| tau.ceil() > lo) {
            if j < best.1 {
                best = (tau.ceil(), j, p);
            }
        }
        for dir in [1.0, -1.0] {
            loop {
                let next = best.0 + dir;
                if next < 1.0 {
                    break;
                }
                match self.profile(next) {
                    Some((j, p)) if j < best.1 => best = (next, j, p),
                    _ => break,
                }
            }
        }
        Ok((best.0, best.2, best.1))
    }

    /// Alternating minimization of `J2` over `(tau, p)`.
    pub fn alternate_solve<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<InnerSolution> {
        let n = self.participants.len();
        if n == 0 {
            return Err(Error::Infeasible);
        }
        let full = vec![self.p_max; n];
        let top = self.tau_max(&full).map_err(|_| Error::Infeasible)?.floor();

        let mut p = Vec::with_capacity(n);
        for i in 0..n {
            let lo = self.power_window(top, i).map_err(|_| Error::Infeasible)?.p_min;
            p.push(if lo < self.p_max { rng.random_range(lo..=self.p_max) } else { self.p_max });
        }
        let mut tau = self.tau_max(&p).map_err(|_| Error::Infeasible)?.floor();
        let mut trace = vec![self.j2_objective(tau, &p)];

        let mut iterations = 0;
        let mut converged = false;
        while iterations < self.max_iters {
            iterations += 1;
            let (next_tau, _) = self.relaxed_tau(&p).map_err(|_| Error::Infeasible)?;
            let next_p = self.optimal_powers(next_tau).map_err(|_| Error::Infeasible)?;
            let dp = next_p.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let dt = (next_tau - tau).abs();
            tau = next_tau;
            p = next_p;
            trace.push(self.j2_objective(tau, &p));
            if dp <= self.eps_p && dt <= self.eps_tau {
                converged = true;
                break;
            }
        }
        if !converged {
            log::debug!("inner alternation hit its {}-iteration cap", self.max_iters);
        }
        debug_assert!(
            trace.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].abs().max(1e-12)),
            "J2 increased along the alternation: {trace:?}"
        );

        let relaxed_tau = tau;
        let (tau_int, powers, j2) = self.round_tau(tau)?;
        Ok(InnerSolution {
            tau: tau_int as u32,
            powers,
            j2,
            relaxed_tau,
            iterations,
            converged,
            trace,
        })
    }
}

#[cfg(test)]
mod tests;
