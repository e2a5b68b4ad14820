//! The round loop: channels, scheduling, local training, aggregation, queues
//! and estimate refresh.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::channel::{large_scale_gain, upload_energy_at_power, LinkState};
use crate::config::{SchedulerKind, SystemConfig};
use crate::cost::{epoch_energy, EnergyQueueState};
use crate::error::{Error, Result};
use crate::estimator::{distance, refresh_estimates, ModelPropertyEstimates, ParticipantRecord, RoundRecords};
use crate::fl::data::{generate_non_iid_data, BlobSpec, Dataset, Owner};
use crate::fl::model::SoftmaxModel;
use crate::fl::train::{aggregate, local_train, solve_optimum, Optimum};
use crate::harness::place_clients;
use crate::outer::{
    fixed_rule_solution, schedule_random, schedule_round_robin, simulated_annealing, AnnealOptions, RoundContext,
    MIN_LOSS_GAP,
};
use crate::types::{aggregation_weights, full_weights, RoundMetrics, RoundSolution};

/// Gradient-norm target of the centralized optimum pre-run.
pub const OPTIMUM_GRAD_TOL: f64 = 1e-6;
pub const OPTIMUM_MAX_ITERS: usize = 50_000;

/// Independent random streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Placement = 1,
    Channel = 2,
    Data = 3,
    Anneal = 4,
    Inner = 5,
    Baseline = 6,
    Init = 7,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Everything a run needs that is fixed before round 1.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub distances: Vec<f64>,
    pub large_gain: Vec<f64>,
    pub clients: Vec<Dataset>,
    pub test: Dataset,
    pub model: SoftmaxModel,
    pub theta0: Vec<f64>,
    pub optimum: Optimum,
}

impl Scenario {
    pub fn generate(cfg: &SystemConfig) -> Result<Self> {
        let seed = cfg.seed;
        let distances = place_clients(&mut stream_rng(seed, Stream::Placement), cfg.num_clients, cfg.radius_m);
        let large_gain = distances
            .iter()
            .map(|&d| large_scale_gain(d, cfg.carrier_freq_ghz))
            .collect();
        let blobs = BlobSpec {
            num_classes: cfg.data.num_classes,
            feature_dim: cfg.data.feature_dim,
            class_separation: cfg.data.class_separation,
        };
        let mut data_rng = stream_rng(seed, Stream::Data);
        let part = generate_non_iid_data(
            &mut data_rng,
            cfg.num_clients,
            cfg.data.mean_size,
            cfg.data.sigma_size,
            cfg.data.non_iid_degree,
            &blobs,
        )?;
        let train_total: usize = part.sizes().iter().sum();
        let f = cfg.data.test_fraction;
        let test_size = ((train_total as f64) * f / (1.0 - f)).round().max(1.0) as usize;
        let test = blobs.balanced(&mut data_rng, test_size, Owner::Pooled);
        let model = SoftmaxModel::new(cfg.data.num_classes, cfg.data.feature_dim);
        let theta0 = model.init(&mut stream_rng(seed, Stream::Init), cfg.init_scale);
        let optimum = solve_optimum(&model, &part.clients, &theta0, OPTIMUM_GRAD_TOL, OPTIMUM_MAX_ITERS);
        Ok(Self {
            distances,
            large_gain,
            clients: part.clients,
            test,
            model,
            theta0,
            optimum,
        })
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Dataset::len).collect()
    }
}

/// How a round's solution was chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Bootstrap,
    Annealed,
    /// The step-size hypothesis failed, so the round fell back to round robin.
    Fallback,
    Fixed,
    Given,
}

/// Global loss and per-client gradients at one model.
#[derive(Debug, Clone)]
struct Evaluation {
    loss: f64,
    client_grads: Vec<Vec<f64>>,
    global_grad: Vec<f64>,
}

fn evaluate(model: &SoftmaxModel, theta: &[f64], clients: &[Dataset], w: &[f64]) -> Evaluation {
    let per: Vec<(f64, Vec<f64>)> = clients.par_iter().map(|d| model.loss_and_grad(theta, d)).collect();
    let mut global_grad = vec![0.0; model.param_len()];
    let mut loss = 0.0;
    for ((l, g), &wi) in per.iter().zip(w) {
        loss += wi * l;
        for (a, b) in global_grad.iter_mut().zip(g) {
            *a += wi * b;
        }
    }
    Evaluation {
        loss,
        client_grads: per.into_iter().map(|(_, g)| g).collect(),
        global_grad,
    }
}

/// One federated run in progress.
pub struct Simulation {
    pub cfg: SystemConfig,
    pub scheduler: SchedulerKind,
    pub scenario: Scenario,
    pub sizes: Vec<usize>,
    pub theta: Vec<f64>,
    pub queues: EnergyQueueState,
    pub estimates: ModelPropertyEstimates,
    /// Completed rounds.
    pub round: usize,
    pub loss: f64,
    pub cumulative_energy: f64,
    pub last_decision: Option<Decision>,
    weights: Vec<f64>,
    channel_rng: ChaCha8Rng,
    anneal_rng: ChaCha8Rng,
    inner_rng: ChaCha8Rng,
    baseline_rng: ChaCha8Rng,
}

impl Simulation {
    pub fn new(cfg: SystemConfig, scheduler: SchedulerKind) -> Result<Self> {
        let scenario = Scenario::generate(&cfg)?;
        Ok(Self::from_scenario(cfg, scheduler, scenario))
    }

    pub fn from_scenario(cfg: SystemConfig, scheduler: SchedulerKind, scenario: Scenario) -> Self {
        let sizes = scenario.sizes();
        let weights = full_weights(&sizes);
        let theta = scenario.theta0.clone();
        let eval = evaluate(&scenario.model, &theta, &scenario.clients, &weights);
        let mut estimates = ModelPropertyEstimates::new(
            crate::estimator::norm(&eval.global_grad).max(f64::MIN_POSITIVE),
            scenario.optimum.smoothness,
            scenario.optimum.loss,
            (2.0 * distance(&scenario.theta0, &scenario.optimum.theta)).max(f64::MIN_POSITIVE),
            cfg.num_clients,
        );
        estimates = refresh_estimates(
            &RoundRecords {
                participants: Vec::new(),
                client_grads: Some(eval.client_grads),
                global_grad: Some(eval.global_grad),
            },
            &estimates,
            cfg.running_max_estimates,
        );
        let seed = cfg.seed;
        Self {
            queues: EnergyQueueState::new(cfg.num_clients),
            loss: eval.loss,
            cfg,
            scheduler,
            sizes,
            theta,
            estimates,
            round: 0,
            cumulative_energy: 0.0,
            last_decision: None,
            weights,
            scenario,
            channel_rng: stream_rng(seed, Stream::Channel),
            anneal_rng: stream_rng(seed, Stream::Anneal),
            inner_rng: stream_rng(seed, Stream::Inner),
            baseline_rng: stream_rng(seed, Stream::Baseline),
        }
    }

    pub fn f_gap(&self) -> f64 {
        (self.loss - self.estimates.f_star_est).max(MIN_LOSS_GAP)
    }

    pub fn test_accuracy(&self) -> f64 {
        self.scenario.model.accuracy(&self.theta, &self.scenario.test)
    }

    fn draw_link(&mut self) -> LinkState {
        LinkState::draw(&mut self.channel_rng, &self.cfg, &self.scenario.large_gain, self.round + 1)
    }

    /// Schedules and executes the next round.
    pub fn step(&mut self) -> Result<RoundMetrics> {
        let link = self.draw_link();
        let n = self.round + 1;
        let f_gap = self.f_gap();
        let ctx = RoundContext::new(&self.cfg, &link, &self.queues.z, &self.sizes, &self.estimates, f_gap);
        let bootstrap = |ctx: &RoundContext<'_>| {
            let mut sol = fixed_rule_solution(ctx, &schedule_round_robin(n, ctx.num_clients(), ctx.cfg.num_channels));
            sol.tau = sol.tau.min(1);
            sol
        };
        let (sol, j, decision) = match self.scheduler {
            SchedulerKind::Cre if n == 1 => (bootstrap(&ctx), None, Decision::Bootstrap),
            SchedulerKind::Cre => {
                let opts = AnnealOptions::from_config(&self.cfg);
                match simulated_annealing(&ctx, &opts, &mut self.anneal_rng, &mut self.inner_rng) {
                    Ok(out) => (out.best.solution(), Some(out.best.j), Decision::Annealed),
                    Err(Error::StepSizeTooLarge(x)) => {
                        log::warn!("round {n}: step-size check failed ({x:.3}), using round robin");
                        let sol = fixed_rule_solution(&ctx, &schedule_round_robin(n, ctx.num_clients(), ctx.cfg.num_channels));
                        (sol, None, Decision::Fallback)
                    }
                    Err(e) => return Err(e),
                }
            }
            SchedulerKind::Random => {
                let alloc = schedule_random(&mut self.baseline_rng, ctx.num_clients(), ctx.cfg.num_channels);
                (fixed_rule_solution(&ctx, &alloc), None, Decision::Fixed)
            }
            SchedulerKind::RoundRobin => {
                let alloc = schedule_round_robin(n, ctx.num_clients(), ctx.cfg.num_channels);
                (fixed_rule_solution(&ctx, &alloc), None, Decision::Fixed)
            }
        };
        let bound = ctx.bound(&sol.a, sol.tau).unwrap_or(f64::NAN);
        let j = j.unwrap_or_else(|| ctx.drift_plus_penalty(&sol).unwrap_or(f64::NAN));
        drop(ctx);
        self.execute(&link, sol, j, bound, decision)
    }

    /// Executes a caller-chosen solution on a freshly drawn channel.
    pub fn step_with(&mut self, sol: RoundSolution) -> Result<RoundMetrics> {
        let link = self.draw_link();
        let ctx = RoundContext::new(&self.cfg, &link, &self.queues.z, &self.sizes, &self.estimates, self.f_gap());
        let bound = ctx.bound(&sol.a, sol.tau).unwrap_or(f64::NAN);
        let j = ctx.drift_plus_penalty(&sol).unwrap_or(f64::NAN);
        drop(ctx);
        self.execute(&link, sol, j, bound, Decision::Given)
    }

    fn execute(
        &mut self,
        link: &LinkState,
        sol: RoundSolution,
        j: f64,
        bound: f64,
        decision: Decision,
    ) -> Result<RoundMetrics> {
        let cfg = &self.cfg;
        let u = cfg.num_clients;
        let participants: Vec<usize> = sol.participants().collect();
        let mut energy = vec![0.0; u];
        for &i in &participants {
            let c = sol.allocation.channel_of(i).ok_or(Error::Infeasible)?;
            let e_up = upload_energy_at_power(sol.p_up[i], link.h_up[i][c], cfg.model_bits, cfg.b_up, cfg.n0);
            energy[i] = sol.tau as f64 * epoch_energy(cfg, self.sizes[i]) + e_up;
        }

        let model = self.scenario.model;
        let theta = &self.theta;
        let clients = &self.scenario.clients;
        let (tau, eta) = (sol.tau, cfg.eta);
        let updates = participants
            .par_iter()
            .map(|&i| local_train(&model, theta, &clients[i], tau, eta, i))
            .collect::<Result<Vec<_>>>()?;

        let records: Vec<ParticipantRecord> = participants
            .iter()
            .zip(&updates)
            .map(|(&i, up)| ParticipantRecord {
                client: i,
                loss_start: up.loss_start(),
                loss_end: up.loss_end(),
                grad_start: up.grads[0].clone(),
                grad_end: up.grads.last().unwrap().clone(),
                step_norm: distance(&up.theta, theta),
            })
            .collect();

        if !participants.is_empty() {
            let w = aggregation_weights(&self.sizes, &sol.a)?;
            let models: Vec<&[f64]> = updates.iter().map(|up| up.theta.as_slice()).collect();
            let wt: Vec<f64> = participants.iter().map(|&i| w.w_tilde[i]).collect();
            self.theta = aggregate(&models, &wt);
        }

        self.queues.apply(&energy, cfg.e_add);
        let round_energy: f64 = energy.iter().sum();
        self.cumulative_energy += round_energy;

        let eval = evaluate(&model, &self.theta, clients, &self.weights);
        if !eval.loss.is_finite() {
            return Err(Error::NonFiniteLoss { client: usize::MAX });
        }
        self.loss = eval.loss;
        self.estimates = refresh_estimates(
            &RoundRecords {
                participants: records,
                client_grads: Some(eval.client_grads),
                global_grad: Some(eval.global_grad),
            },
            &self.estimates,
            cfg.running_max_estimates,
        );
        self.round += 1;
        self.last_decision = Some(decision);

        let channels = (0..u).map(|i| sol.allocation.channel_of(i)).collect();
        Ok(RoundMetrics {
            round: self.round,
            tau: if participants.is_empty() { 0 } else { sol.tau },
            participants: sol.a,
            client_energy: energy,
            queues: self.queues.z.clone(),
            cumulative_energy: self.cumulative_energy,
            global_loss: self.loss,
            test_accuracy: self.test_accuracy(),
            bound_value: bound,
            objective_j: j,
            loss_gap: self.loss - self.estimates.f_star_est,
            powers: sol.p_up,
            channels,
        })
    }

    /// Runs the configured number of rounds.
    pub fn run(&mut self) -> Result<Vec<RoundMetrics>> {
        (0..self.cfg.rounds).map(|_| self.step()).collect()
    }
}

/// Seed of replicate `r` under master seed `seed`.
pub fn replicate_seed(seed: u64, replicate: usize) -> u64 {
    // splitmix64 step
    let mut x = seed.wrapping_add((replicate as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
