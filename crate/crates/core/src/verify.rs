//! Numerical checks of the bounds and solvers, run by the `verify` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::channel::{large_scale_gain, path_loss_db};
use crate::config::SystemConfig;
use crate::cost::{epoch_energy, epoch_latency};
use crate::estimator::{
    coefficient_a3, coefficients, corollary1_bound, distance, lemma2_bound, theorem1_bound, theorem2_bound,
    ModelPropertyEstimates,
};
use crate::fl::data::{generate_non_iid_data, BlobSpec, Dataset};
use crate::fl::model::SoftmaxModel;
use crate::fl::train::{auxiliary_trajectory, global_loss, local_trajectory, solve_optimum};
use crate::inner::{InnerContext, InnerParticipant, PenaltyModel};
use crate::types::aggregation_weights;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

/// A small convex federated instance together with one round's trajectories.
#[derive(Debug, Clone)]
pub struct TrajectoryInstance {
    pub model: SoftmaxModel,
    pub clients: Vec<Dataset>,
    pub a: Vec<bool>,
    pub eta: f64,
    pub tau: u32,
    pub theta0: Vec<f64>,
    /// `local[i]` holds client `i`'s iterates; empty for non-participants.
    pub local: Vec<Vec<Vec<f64>>>,
    pub aux: Vec<Vec<f64>>,
    /// Aggregate of the local iterates at every epoch.
    pub distributed: Vec<Vec<f64>>,
    pub w: Vec<f64>,
    pub w_tilde: Vec<f64>,
}

impl TrajectoryInstance {
    /// Two to five clients, at least two of them participating.
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = rng.random_range(2..=5);
        let blobs = BlobSpec {
            num_classes: 5,
            feature_dim: 4,
            class_separation: rng.random_range(0.3..1.0),
        };
        let degree = rng.random_range(0.0..=1.0);
        let part = generate_non_iid_data(&mut rng, u, 150.0, 30.0, degree, &blobs).expect("valid instance");
        let model = SoftmaxModel::new(5, 4);
        let mut a = vec![false; u];
        while a.iter().filter(|&&x| x).count() < 2 {
            a = (0..u).map(|_| rng.random_bool(0.7)).collect();
        }
        let smooth = part
            .clients
            .iter()
            .map(|d| model.smoothness_bound(d))
            .fold(0.0, f64::max);
        let eta = rng.random_range(0.1..0.9) / smooth;
        let tau = rng.random_range(2..=12);
        let theta0 = model.init(&mut rng, 0.5);
        Self::build(model, part.clients, a, eta, tau, theta0)
    }

    pub fn build(model: SoftmaxModel, clients: Vec<Dataset>, a: Vec<bool>, eta: f64, tau: u32, theta0: Vec<f64>) -> Self {
        let sizes: Vec<usize> = clients.iter().map(Dataset::len).collect();
        let weights = aggregation_weights(&sizes, &a).expect("participants");
        let local: Vec<Vec<Vec<f64>>> = (0..clients.len())
            .map(|i| {
                if a[i] {
                    local_trajectory(&model, &theta0, &clients[i], tau, eta)
                } else {
                    Vec::new()
                }
            })
            .collect();
        let aux = auxiliary_trajectory(&model, &theta0, &clients, &a, tau, eta).expect("finite trajectory");
        let distributed = (0..=tau as usize)
            .map(|m| {
                let mut out = vec![0.0; model.param_len()];
                for (i, path) in local.iter().enumerate().filter(|(i, _)| a[*i]) {
                    for (o, v) in out.iter_mut().zip(&path[m]) {
                        *o += weights.w_tilde[i] * v;
                    }
                }
                out
            })
            .collect();
        Self {
            model,
            clients,
            a,
            eta,
            tau,
            theta0,
            local,
            aux,
            distributed,
            w: weights.w,
            w_tilde: weights.w_tilde,
        }
    }

    fn global_grad(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.model.param_len()];
        for (d, wi) in self.clients.iter().zip(&self.w) {
            for (a, b) in g.iter_mut().zip(self.model.gradient(x, d)) {
                *a += wi * b;
            }
        }
        g
    }

    /// Largest `||grad F_i - grad F||` along the auxiliary path, per client.
    pub fn oracle_delta(&self) -> Vec<f64> {
        let mut delta = vec![0.0f64; self.clients.len()];
        for x in &self.aux {
            let g = self.global_grad(x);
            for (i, d) in self.clients.iter().enumerate() {
                delta[i] = delta[i].max(distance(&self.model.gradient(x, d), &g));
            }
        }
        delta
    }

    /// Largest gradient-difference ratio over the (local, auxiliary) pairs
    /// the distance bounds are built from.
    pub fn oracle_beta(&self) -> f64 {
        let mut beta = 0.0f64;
        for (i, path) in self.local.iter().enumerate().filter(|(i, _)| self.a[*i]) {
            for (x, y) in path.iter().zip(&self.aux) {
                let gap = distance(x, y);
                if gap > 1e-12 {
                    let gx = self.model.gradient(x, &self.clients[i]);
                    let gy = self.model.gradient(y, &self.clients[i]);
                    beta = beta.max(distance(&gx, &gy) / gap);
                }
            }
        }
        beta.max(1e-12)
    }

    /// Analytic smoothness bound of the global loss.
    pub fn smoothness(&self) -> f64 {
        self.clients
            .iter()
            .zip(&self.w)
            .map(|(d, wi)| wi * self.model.smoothness_bound(d))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct BoundReport {
    pub instances: usize,
    pub theorem1_violations: usize,
    pub lemma2_violations: usize,
    pub theorem2_violations: usize,
    /// Instances whose optimum solve did not converge.
    pub theorem2_skipped: usize,
    /// Largest realized/bound ratio seen for the distance bound.
    pub worst_theorem1_ratio: f64,
}

/// Checks the distance and loss bounds on `count` seeded instances.
pub fn check_bounds(first_seed: u64, count: usize) -> BoundReport {
    let mut rep = BoundReport::default();
    for seed in first_seed..first_seed + count as u64 {
        let inst = TrajectoryInstance::generate(seed);
        let delta = inst.oracle_delta();
        let beta = inst.oracle_beta();
        let (a1, _) = coefficients(&inst.a, &inst.w, &inst.w_tilde, &delta);
        let tol = 1e-10;
        for m in 0..=inst.tau as usize {
            let gap = distance(&inst.distributed[m], &inst.aux[m]);
            let bound = theorem1_bound(m as f64, inst.eta, beta, a1);
            if gap > bound + tol {
                rep.theorem1_violations += 1;
            }
            if bound > 1e-9 {
                rep.worst_theorem1_ratio = rep.worst_theorem1_ratio.max(gap / bound);
            }
            for i in (0..inst.clients.len()).filter(|&i| inst.a[i]) {
                let gap_i = distance(&inst.local[i][m], &inst.aux[m]);
                if gap_i > lemma2_bound(m as f64, inst.eta, beta, &inst.w_tilde, &delta, i) + tol {
                    rep.lemma2_violations += 1;
                }
            }
        }

        // auxiliary loss after tau epochs against its radical-form bound
        let smooth = inst.smoothness();
        let opt = solve_optimum(&inst.model, &inst.clients, &inst.theta0, 1e-7, 20_000);
        if opt.grad_norm > 1e-7 {
            rep.theorem2_skipped += 1;
            rep.instances += 1;
            continue;
        }
        let f_gap0 = global_loss(&inst.model, &inst.aux[0], &inst.clients) - opt.loss;
        let b1 = inst.aux.iter().map(|x| distance(x, &opt.theta)).fold(0.0, f64::max);
        let (_, a2) = coefficients(&inst.a, &inst.w, &inst.w_tilde, &delta);
        if inst.eta * smooth < 1.0 && f_gap0 > 0.0 {
            let a3 = coefficient_a3(inst.eta, smooth, a2, f_gap0).expect("step checked");
            let bound = theorem2_bound(inst.tau as f64, inst.eta, smooth, a3, f_gap0, b1).expect("step checked");
            let realized = global_loss(&inst.model, inst.aux.last().unwrap(), &inst.clients) - opt.loss;
            if realized > bound + 1e-9 {
                rep.theorem2_violations += 1;
            }
        }
        rep.instances += 1;
    }
    rep
}

fn golden_arithmetic() -> Check {
    let cfg = SystemConfig::reference();
    let t = epoch_latency(&cfg, 1000);
    let e = epoch_energy(&cfg, 1000);
    let pl = path_loss_db(500.0, 2.0);
    let ok = (t - 2e-4).abs() / 2e-4 < 5e-6 && (e - 2.5e-4).abs() / 2.5e-4 < 5e-6 && (pl - 93.39794).abs() / 93.39794 < 5e-6;
    Check::new(
        "golden arithmetic",
        ok,
        format!("T={t:.6e} s, E={e:.6e} J, path loss {pl:.6} dB"),
    )
}

fn gradient_probes(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = SoftmaxModel::new(4, 5);
    let blobs = BlobSpec {
        num_classes: 4,
        feature_dim: 5,
        class_separation: 2.0,
    };
    let data = blobs.balanced(&mut rng, 60, crate::fl::data::Owner::Pooled);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let theta = model.init(&mut rng, 0.5);
        let g = model.gradient(&theta, &data);
        let j = rng.random_range(0..model.param_len());
        let h = 1e-5;
        let mut tp = theta.clone();
        tp[j] += h;
        let mut tm = theta;
        tm[j] -= h;
        let fd = (model.loss(&tp, &data) - model.loss(&tm, &data)) / (2.0 * h);
        worst = worst.max((fd - g[j]).abs() / g[j].abs().max(1e-3));
    }

    let cfg = SystemConfig::reference();
    let mut worst_tau = 0.0f64;
    for _ in 0..100 {
        let ctx = random_inner_context(&mut rng, &cfg);
        let p: Vec<f64> = (0..ctx.participants.len()).map(|_| rng.random_range(0.05..cfg.p_max)).collect();
        let tau = rng.random_range(1.0..4.0);
        let h = 1e-4;
        let fd = (ctx.j2_objective(tau + h, &p) - ctx.j2_objective(tau - h, &p)) / (2.0 * h);
        let an = ctx.j2_tau_derivative(tau, &p);
        worst_tau = worst_tau.max((fd - an).abs() / an.abs().max(1e-9));
    }
    Check::new(
        "finite differences",
        worst <= 1e-6 && worst_tau <= 1e-6,
        format!("loss gradient worst rel err {worst:.2e}, epoch derivative {worst_tau:.2e}"),
    )
}

/// A feasible inner problem with one to three participants.
pub fn random_inner_context<R: Rng + ?Sized>(rng: &mut R, cfg: &SystemConfig) -> InnerContext {
    let n = rng.random_range(1..=3);
    let participants = (0..n)
        .map(|i| {
            let d = rng.random_range(700..1300);
            InnerParticipant {
                client: i,
                epoch_energy: epoch_energy(cfg, d),
                epoch_latency: epoch_latency(cfg, d),
                queue: if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..0.004) },
                gain: large_scale_gain(rng.random_range(50.0..500.0), cfg.carrier_freq_ghz)
                    * cfg.antenna_gain
                    * rng.random_range(5.0..30.0),
            }
        })
        .collect();
    let mut est = ModelPropertyEstimates::new(rng.random_range(0.5..3.0), rng.random_range(0.5..5.0), 0.0, 3.0, n);
    est.b1_est = rng.random_range(1.0..20.0);
    let penalty = PenaltyModel::new(
        rng.random_range(0.0..0.1),
        0.05,
        &est,
        rng.random_range(0.0..1.0),
        rng.random_range(0.0..0.01),
        rng.random_range(0.05..2.0),
    )
    .expect("step below one");
    InnerContext::new(cfg, participants, 0.0, rng.random_range(2e-4..6e-4), penalty)
}

fn corollary_at_zero() -> Check {
    let est = ModelPropertyEstimates::new(1.3, 2.0, 0.1, 4.0, 3);
    let mut worst = 0.0f64;
    for &gap in &[1e-6, 0.3, 1.7, 25.0] {
        let b = corollary1_bound(0.0, &est, 0.1, 0.8, 0.2, gap).expect("step below one");
        worst = worst.max((b - gap).abs() / gap);
    }
    Check::new("loss bound at zero epochs", worst < 1e-12, format!("worst rel err {worst:.1e}"))
}

/// Runs every check; `seed` fixes the random instances.
pub fn run_suite(seed: u64) -> Vec<Check> {
    let bounds = check_bounds(seed, 50);
    vec![
        golden_arithmetic(),
        gradient_probes(seed),
        corollary_at_zero(),
        Check::new(
            "distance bound (aggregate)",
            bounds.theorem1_violations == 0,
            format!(
                "{} violations over {} instances, worst ratio {:.3}",
                bounds.theorem1_violations, bounds.instances, bounds.worst_theorem1_ratio
            ),
        ),
        Check::new(
            "distance bound (per client)",
            bounds.lemma2_violations == 0,
            format!("{} violations", bounds.lemma2_violations),
        ),
        Check::new(
            "auxiliary loss bound",
            bounds.theorem2_violations == 0,
            format!(
                "{} violations, {} instances skipped",
                bounds.theorem2_violations, bounds.theorem2_skipped
            ),
        ),
    ]
}
