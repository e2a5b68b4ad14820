use fedcre::channel::{large_scale_gain, upload_energy_at_power, uplink_rate, LinkState};
use fedcre::cost::{epoch_energy, epoch_latency, EnergyQueueState};
use fedcre::estimator::{corollary1_bound, ModelPropertyEstimates};
use fedcre::fl::data::{BlobSpec, Owner};
use fedcre::fl::model::SoftmaxModel;
use fedcre::fl::train::aggregate;
use fedcre::inner::{InnerContext, InnerParticipant, PenaltyModel};
use fedcre::outer::{simulated_annealing, AnnealOptions, RoundContext};
use fedcre::SystemConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn context(seed: u64) -> InnerContext {
    let cfg = SystemConfig::reference();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=3);
    let participants = (0..n)
        .map(|i| {
            let d = rng.random_range(700..1300);
            InnerParticipant {
                client: i,
                epoch_energy: epoch_energy(&cfg, d),
                epoch_latency: epoch_latency(&cfg, d),
                queue: rng.random_range(0.0..0.004),
                gain: large_scale_gain(rng.random_range(30.0..150.0), 2.0) * cfg.antenna_gain,
            }
        })
        .collect();
    let penalty = PenaltyModel {
        v: 10f64.powf(rng.random_range(-8.0..-3.0)),
        eta: cfg.eta,
        rho: rng.random_range(0.2..3.0),
        beta: rng.random_range(0.3..5.0),
        a1: rng.random_range(0.0..2.0),
        a3: rng.random_range(0.0..0.05),
        b1: rng.random_range(0.5..20.0),
        f_gap: rng.random_range(0.05..3.0),
    };
    InnerContext::new(&cfg, participants, 0.0, 3e-4, penalty)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rate_is_increasing_and_concave(dist in 20.0..500.0f64, p in 0.01..0.19f64) {
        let cfg = SystemConfig::reference();
        let h = large_scale_gain(dist, 2.0) * cfg.antenna_gain;
        let dp = 1e-3;
        let (lo, mid, hi) = (uplink_rate(p - dp, h, &cfg), uplink_rate(p, h, &cfg), uplink_rate(p + dp, h, &cfg));
        prop_assert!(lo < mid && mid < hi);
        prop_assert!(hi - 2.0 * mid + lo <= 1e-9 * mid);
    }

    #[test]
    fn upload_energy_is_strictly_increasing(dist in 20.0..500.0f64, p in 0.01..0.19f64) {
        let cfg = SystemConfig::reference();
        let h = large_scale_gain(dist, 2.0) * cfg.antenna_gain;
        let e = |x: f64| upload_energy_at_power(x, h, cfg.model_bits, cfg.b_up, cfg.n0);
        let fd = (e(p + 1e-6) - e(p - 1e-6)) / 2e-6;
        prop_assert!(fd > 0.0);
        prop_assert!(e(p * 1.01) > e(p));
    }

    #[test]
    fn queues_stay_nonnegative_and_bound_overspend(
        rounds in proptest::collection::vec(proptest::collection::vec(0.0..0.004f64, 3), 1..60),
    ) {
        let e_add = 0.00175;
        let mut q = EnergyQueueState::new(3);
        for consumed in &rounds {
            q.apply(consumed, e_add);
            prop_assert!(q.z.iter().all(|&z| z >= 0.0));
        }
        for i in 0..3 {
            // the queue dominates the total overspend
            prop_assert!(q.cumulative_consumed[i] - q.cumulative_budget[i] <= q.z[i] + 1e-15);
        }
    }

    #[test]
    fn loss_bound_is_convex_in_epochs(
        rho in 0.1..5.0f64, beta in 0.1..5.0f64, b1 in 0.5..30.0f64,
        a1 in 0.0..2.0f64, a3 in 0.0..0.2f64, gap in 0.01..5.0f64,
    ) {
        let est = ModelPropertyEstimates::new(rho, beta, 0.0, b1, 2);
        let eta = 0.05;
        let f = |t: f64| corollary1_bound(t, &est, eta, a1, a3, gap).unwrap();
        prop_assert!((f(0.0) - gap).abs() <= 1e-12 * gap);
        for k in 1..40 {
            let t = k as f64 * 0.5;
            let second = f(t + 0.5) - 2.0 * f(t) + f(t - 0.5);
            prop_assert!(second >= -1e-12 * f(t).abs());
        }
    }

    #[test]
    fn j2_is_convex_in_epochs_and_solver_descends(seed in 0u64..10_000) {
        let ctx = context(seed);
        let p = vec![0.15; ctx.participants.len()];
        let Ok(top) = ctx.tau_max(&p) else { return Ok(()) };
        let h = 0.25;
        let mut t = 1.0 + h;
        while t + h <= top {
            let second = ctx.j2_objective(t + h, &p) - 2.0 * ctx.j2_objective(t, &p) + ctx.j2_objective(t - h, &p);
            prop_assert!(second >= -1e-9 * ctx.j2_objective(t, &p));
            t += h;
        }
        if let Ok(sol) = ctx.alternate_solve(&mut ChaCha8Rng::seed_from_u64(seed)) {
            prop_assert!(sol.trace.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)));
            prop_assert!(sol.j2 <= sol.trace[0] * (1.0 + 1e-9));
        }
    }

    #[test]
    fn aggregation_ignores_client_order(seed in 0u64..10_000, n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let models: Vec<Vec<f64>> = (0..n).map(|_| (0..7).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let refs: Vec<&[f64]> = models.iter().map(Vec::as_slice).collect();
        let forward = aggregate(&refs, &w);
        let rev_refs: Vec<&[f64]> = refs.iter().rev().copied().collect();
        let rev_w: Vec<f64> = w.iter().rev().copied().collect();
        let backward = aggregate(&rev_refs, &rev_w);
        for (a, b) in forward.iter().zip(&backward) {
            prop_assert!((a - b).abs() <= 1e-14);
        }
        let equal = aggregate(&refs, &vec![1.0 / n as f64; n]);
        for (k, v) in equal.iter().enumerate() {
            let mean = models.iter().map(|m| m[k]).sum::<f64>() / n as f64;
            prop_assert!((v - mean).abs() <= 1e-14);
        }
    }

    #[test]
    fn centralized_descent_never_raises_the_loss(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = SoftmaxModel::new(4, 3);
        let blobs = BlobSpec { num_classes: 4, feature_dim: 3, class_separation: 2.0 };
        let data = blobs.balanced(&mut rng, 80, Owner::Pooled);
        let eta = 1.0 / model.smoothness_bound(&data);
        let mut theta = model.init(&mut rng, 1.0);
        let mut prev = model.loss(&theta, &data);
        for _ in 0..20 {
            let g = model.gradient(&theta, &data);
            theta.iter_mut().zip(&g).for_each(|(t, gi)| *t -= eta * gi);
            let now = model.loss(&theta, &data);
            prop_assert!(now <= prev + 1e-12);
            prev = now;
        }
    }

    #[test]
    fn annealer_output_is_valid(seed in 0u64..10_000, u in 2usize..8, c in 1usize..4) {
        let cfg = SystemConfig::reference()
            .with_raw(|r| {
                r.network.num_clients = u;
                r.network.num_channels = c;
                r.solver.sa_iters = 60;
            })
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let large: Vec<f64> = (0..u).map(|_| large_scale_gain(rng.random_range(50.0..450.0), 2.0)).collect();
        let link = LinkState::draw(&mut rng, &cfg, &large, 1);
        let queues: Vec<f64> = (0..u).map(|_| rng.random_range(0.0..0.003)).collect();
        let sizes: Vec<usize> = (0..u).map(|_| rng.random_range(800..1200)).collect();
        let mut est = ModelPropertyEstimates::new(2.0, 4.0, 0.0, 3.0, u);
        est.delta_hat = (0..u).map(|_| rng.random_range(0.1..1.0)).collect();
        let ctx = RoundContext::new(&cfg, &link, &queues, &sizes, &est, 1.0);
        let out = simulated_annealing(&ctx, &AnnealOptions::from_config(&cfg), &mut rng, &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).unwrap();
        prop_assert!(out.trace.windows(2).all(|w| w[1].best_j <= w[0].best_j));
        prop_assert!(out.best.solution().check(cfg.p_max).is_ok());
    }
}
