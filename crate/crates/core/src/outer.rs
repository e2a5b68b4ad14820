//! Per-round choice of participants and channels.
//!
//! CRE anneals over channel-allocation matrices, solving the inner
//! epoch/power problem for every candidate. The baselines pick an allocation
//! by a fixed rule and run at full power with a fixed epoch count.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::channel::LinkState;
use crate::config::SystemConfig;
use crate::cost::{epoch_energy, epoch_latency};
use crate::error::{Error, Result};
use crate::estimator::{coefficient_a3, coefficients, corollary1_bound, ModelPropertyEstimates};
use crate::inner::{InnerContext, InnerParticipant, PenaltyModel};
use crate::types::{aggregation_weights, ChannelAllocation, RoundSolution};

/// Lower clamp on the estimated loss gap so the bound stays finite.
pub const MIN_LOSS_GAP: f64 = 1e-8;

/// `R` itself plus every single-entry flip that keeps each channel and each
/// client to at most one assignment.
pub fn neighborhood(alloc: &ChannelAllocation, num_clients: usize) -> Vec<ChannelAllocation> {
    let assigned = alloc.participants(num_clients);
    let mut out = vec![alloc.clone()];
    for (c, slot) in alloc.slots().iter().enumerate() {
        match slot {
            Some(_) => {
                let mut next = alloc.clone();
                next.set(c, None);
                out.push(next);
            }
            None => {
                for i in (0..num_clients).filter(|&i| !assigned[i]) {
                    let mut next = alloc.clone();
                    next.set(c, Some(i));
                    out.push(next);
                }
            }
        }
    }
    out
}

/// A fully evaluated allocation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub allocation: ChannelAllocation,
    pub a: Vec<bool>,
    pub tau: u32,
    /// Per-client power, zero for idle clients.
    pub p_up: Vec<f64>,
    /// Drift-plus-penalty value; `+inf` when the allocation is infeasible.
    pub j: f64,
    /// Loss bound for this allocation at `tau`.
    pub bound: f64,
    pub inner_iterations: usize,
}

impl Candidate {
    pub fn is_feasible(&self) -> bool {
        self.j.is_finite()
    }

    pub fn solution(&self) -> RoundSolution {
        RoundSolution {
            a: self.a.clone(),
            allocation: self.allocation.clone(),
            p_up: self.p_up.clone(),
            tau: self.tau,
        }
    }
}

/// Everything fixed within one round that the objective depends on.
#[derive(Debug, Clone)]
pub struct RoundContext<'a> {
    pub cfg: &'a SystemConfig,
    pub link: &'a LinkState,
    pub queues: &'a [f64],
    pub sizes: &'a [usize],
    pub estimates: &'a ModelPropertyEstimates,
    /// Estimated `F(theta^{n-1}) - F*`.
    pub f_gap: f64,
    pub epoch_energy: Vec<f64>,
    pub epoch_latency: Vec<f64>,
}

impl<'a> RoundContext<'a> {
    pub fn new(
        cfg: &'a SystemConfig,
        link: &'a LinkState,
        queues: &'a [f64],
        sizes: &'a [usize],
        estimates: &'a ModelPropertyEstimates,
        f_gap: f64,
    ) -> Self {
        Self {
            cfg,
            link,
            queues,
            sizes,
            estimates,
            f_gap: f_gap.max(MIN_LOSS_GAP),
            epoch_energy: sizes.iter().map(|&d| epoch_energy(cfg, d)).collect(),
            epoch_latency: sizes.iter().map(|&d| epoch_latency(cfg, d)).collect(),
        }
    }

    pub fn num_clients(&self) -> usize {
        self.sizes.len()
    }

    fn idle_term(&self, a: &[bool]) -> f64 {
        let e = self.cfg.e_add;
        (0..a.len())
            .filter(|&i| !a[i])
            .map(|i| e * e - 2.0 * self.queues[i] * e)
            .sum()
    }

    /// `(A1, A3)` for a participation pattern.
    pub fn bound_coefficients(&self, a: &[bool]) -> Result<(f64, f64)> {
        let w = aggregation_weights(self.sizes, a)?;
        let (a1, a2) = coefficients(a, &w.w, &w.w_tilde, &self.estimates.delta_hat);
        let a3 = coefficient_a3(self.cfg.eta, self.estimates.beta_hat, a2, self.f_gap)?;
        Ok((a1, a3))
    }

    /// Loss bound for participation `a` and `tau` epochs; with nobody
    /// participating the model does not move and the bound is the current gap.
    pub fn bound(&self, a: &[bool], tau: u32) -> Result<f64> {
        if !a.iter().any(|&x| x) || tau == 0 {
            return Ok(self.f_gap);
        }
        let (a1, a3) = self.bound_coefficients(a)?;
        corollary1_bound(tau as f64, self.estimates, self.cfg.eta, a1, a3, self.f_gap)
    }

    /// The per-round surrogate evaluated straight from its definition:
    /// `sum_i (q_i^2 - 2 Z_i q_i) + V * bound`.
    pub fn drift_plus_penalty(&self, sol: &RoundSolution) -> Result<f64> {
        let e_add = self.cfg.e_add;
        let mut total = 0.0;
        for i in 0..self.num_clients() {
            let q = if sol.a[i] {
                let c = sol.allocation.channel_of(i).ok_or(Error::Infeasible)?;
                let h = self.link.h_up[i][c];
                let e_up = crate::channel::upload_energy_at_power(
                    sol.p_up[i],
                    h,
                    self.cfg.model_bits,
                    self.cfg.b_up,
                    self.cfg.n0,
                );
                e_add - (sol.tau as f64 * self.epoch_energy[i] + e_up)
            } else {
                e_add
            };
            total += q * q - 2.0 * self.queues[i] * q;
        }
        let penalty = if self.cfg.v == 0.0 { 0.0 } else { self.cfg.v * self.bound(&sol.a, sol.tau)? };
        Ok(total + penalty)
    }

    pub fn idle_candidate(&self) -> Candidate {
        let u = self.num_clients();
        let a = vec![false; u];
        Candidate {
            allocation: ChannelAllocation::empty(self.cfg.num_channels),
            j: self.idle_term(&a) + self.cfg.v * self.f_gap,
            bound: self.f_gap,
            a,
            tau: 0,
            p_up: vec![0.0; u],
            inner_iterations: 0,
        }
    }

    /// Inner problem for the participants of `alloc`.
    pub fn inner_context(&self, alloc: &ChannelAllocation) -> Result<InnerContext> {
        let a = alloc.participants(self.num_clients());
        let (a1, a3) = self.bound_coefficients(&a)?;
        let penalty = PenaltyModel::new(self.cfg.v, self.cfg.eta, self.estimates, a1, a3, self.f_gap)?;
        let participants = alloc
            .assignments()
            .into_iter()
            .map(|(i, c)| InnerParticipant {
                client: i,
                epoch_energy: self.epoch_energy[i],
                epoch_latency: self.epoch_latency[i],
                queue: self.queues[i],
                gain: self.link.h_up[i][c],
            })
            .collect();
        Ok(InnerContext::new(self.cfg, participants, self.idle_term(&a), self.link.t_down, penalty))
    }

    /// Solves the inner problem for `alloc` and scores it. Infeasible
    /// allocations come back with `j = +inf`.
    pub fn evaluate<R: Rng + ?Sized>(&self, alloc: &ChannelAllocation, rng: &mut R) -> Result<Candidate> {
        if alloc.num_assigned() == 0 {
            return Ok(self.idle_candidate());
        }
        let u = self.num_clients();
        let a = alloc.participants(u);
        let ctx = self.inner_context(alloc)?;
        let infeasible = Candidate {
            allocation: alloc.clone(),
            a: a.clone(),
            tau: 0,
            p_up: vec![0.0; u],
            j: f64::INFINITY,
            bound: f64::INFINITY,
            inner_iterations: 0,
        };
        let sol = match ctx.alternate_solve(rng) {
            Ok(s) => s,
            Err(Error::Infeasible) => return Ok(infeasible),
            Err(e) => return Err(e),
        };
        let mut p_up = vec![0.0; u];
        let mut queue_sq = 0.0;
        for (k, part) in ctx.participants.iter().enumerate() {
            p_up[part.client] = sol.powers[k];
            queue_sq += part.queue * part.queue;
        }
        Ok(Candidate {
            allocation: alloc.clone(),
            bound: ctx.penalty.bound(sol.tau as f64),
            a,
            tau: sol.tau,
            p_up,
            j: sol.j2 - queue_sq,
            inner_iterations: sol.iterations,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnnealStep {
    pub temperature: f64,
    pub candidate_j: f64,
    pub current_j: f64,
    pub best_j: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnnealOutcome {
    pub best: Candidate,
    pub initial_temperature: f64,
    pub trace: Vec<AnnealStep>,
    /// Distinct allocations whose inner problem was solved.
    pub evaluations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnnealOptions {
    /// Starting temperature; `None` uses `|J|` of the all-idle allocation.
    pub t0: Option<f64>,
    pub alpha: f64,
    pub s_max: usize,
    /// When false, the all-idle start scores `+inf` during the walk and is
    /// returned only if no allocation with participants is feasible.
    pub idle_as_candidate: bool,
}

impl AnnealOptions {
    pub fn from_config(cfg: &SystemConfig) -> Self {
        Self {
            t0: cfg.sa_temp,
            alpha: cfg.sa_decay,
            s_max: cfg.sa_iters,
            idle_as_candidate: cfg.idle_as_candidate,
        }
    }
}

/// Simulated annealing over allocations, starting from all-idle.
///
/// `rng` drives the walk; `inner_rng` seeds the inner solver's power
/// initialization. Each allocation is solved once per call.
pub fn simulated_annealing<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    ctx: &RoundContext<'_>,
    opts: &AnnealOptions,
    rng: &mut R1,
    inner_rng: &mut R2,
) -> Result<AnnealOutcome> {
    let u = ctx.num_clients();
    let start = ctx.idle_candidate();
    let t0 = opts.t0.unwrap_or(start.j.abs()).max(f64::MIN_POSITIVE);
    let score = |c: &Candidate| {
        if !opts.idle_as_candidate && c.allocation.num_assigned() == 0 {
            f64::INFINITY
        } else {
            c.j
        }
    };
    let mut cache: HashMap<ChannelAllocation, Candidate> = HashMap::new();
    cache.insert(start.allocation.clone(), start.clone());

    let mut current = start.clone();
    let mut current_j = score(&current);
    let mut best = start;
    let mut best_j = current_j;
    let mut temp = t0;
    let mut trace = Vec::with_capacity(opts.s_max);
    for _ in 0..opts.s_max {
        let neighbors = neighborhood(&current.allocation, u);
        let pick = &neighbors[rng.random_range(0..neighbors.len())];
        let cand = match cache.get(pick) {
            Some(c) => c.clone(),
            None => {
                let c = ctx.evaluate(pick, inner_rng)?;
                cache.insert(pick.clone(), c.clone());
                c
            }
        };
        let cand_j = score(&cand);
        let accepted = if !cand_j.is_finite() {
            false
        } else if cand_j <= current_j {
            true
        } else {
            let p = (-(cand_j - current_j) / temp).exp();
            rng.random::<f64>() < p
        };
        if accepted {
            if cand_j < best_j {
                best = cand.clone();
                best_j = cand_j;
            }
            current = cand;
            current_j = cand_j;
        }
        trace.push(AnnealStep {
            temperature: temp,
            candidate_j: cand_j,
            current_j,
            best_j,
            accepted,
        });
        temp *= opts.alpha;
    }
    Ok(AnnealOutcome {
        best,
        initial_temperature: t0,
        trace,
        evaluations: cache.len() - 1,
    })
}

/// Uniform injective assignment of `min(C, U)` channels to distinct clients.
pub fn schedule_random<R: Rng + ?Sized>(rng: &mut R, num_clients: usize, num_channels: usize) -> ChannelAllocation {
    let mut clients: Vec<usize> = (0..num_clients).collect();
    let mut channels: Vec<usize> = (0..num_channels).collect();
    clients.shuffle(rng);
    channels.shuffle(rng);
    let mut alloc = ChannelAllocation::empty(num_channels);
    for (&c, &i) in channels.iter().zip(&clients) {
        alloc.set(c, Some(i));
    }
    alloc
}

/// Round `r` (1-based) gives channel `k` to client `((r - 1) C + k) mod U`.
pub fn schedule_round_robin(round: usize, num_clients: usize, num_channels: usize) -> ChannelAllocation {
    let mut alloc = ChannelAllocation::empty(num_channels);
    for k in 0..num_channels.min(num_clients) {
        alloc.set(k, Some((round.saturating_sub(1) * num_channels + k) % num_clients));
    }
    alloc
}

/// Completes a baseline allocation: full power and `tau_fixed` epochs, cut
/// to what the slowest kept client can fit. Clients that cannot finish even
/// one epoch at full power are dropped.
pub fn fixed_rule_solution(ctx: &RoundContext<'_>, alloc: &ChannelAllocation) -> RoundSolution {
    let cfg = ctx.cfg;
    let u = ctx.num_clients();
    let mut kept = ChannelAllocation::empty(alloc.num_channels());
    let mut tau_cap = f64::INFINITY;
    for (i, c) in alloc.assignments() {
        let rate = crate::channel::uplink_rate(cfg.p_max, ctx.link.h_up[i][c], cfg);
        let t_up = if rate > 0.0 { cfg.model_bits / rate } else { f64::INFINITY };
        let t = (cfg.t_max - ctx.link.t_down - t_up) / ctx.epoch_latency[i];
        if t >= 1.0 {
            kept.set(c, Some(i));
            tau_cap = tau_cap.min(t);
        }
    }
    if kept.num_assigned() == 0 {
        return RoundSolution::idle(u, alloc.num_channels());
    }
    let a = kept.participants(u);
    let p_up = a.iter().map(|&x| if x { cfg.p_max } else { 0.0 }).collect();
    RoundSolution {
        a,
        allocation: kept,
        p_up,
        tau: cfg.tau_fixed.min(tau_cap.floor() as u32).max(1),
    }
}
