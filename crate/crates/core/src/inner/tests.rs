use super::*;
use crate::channel::{large_scale_gain, uplink_rate};
use crate::cost::{epoch_energy, epoch_latency};
use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn penalty(v: f64, a1: f64, a3: f64) -> PenaltyModel {
    PenaltyModel {
        v,
        eta: 0.05,
        rho: 2.0,
        beta: 4.0,
        a1,
        a3,
        b1: 3.0,
        f_gap: 1.5,
    }
}

fn participant(cfg: &SystemConfig, client: usize, samples: usize, queue: f64, gain: f64) -> InnerParticipant {
    InnerParticipant {
        client,
        epoch_energy: epoch_energy(cfg, samples),
        epoch_latency: epoch_latency(cfg, samples),
        queue,
        gain,
    }
}

fn random_context(rng: &mut ChaCha8Rng) -> InnerContext {
    let cfg = SystemConfig::reference();
    let n = rng.random_range(1..=3);
    let participants = (0..n)
        .map(|i| {
            let d = rng.random_range(50.0..500.0);
            let g = large_scale_gain(d, 2.0) * cfg.antenna_gain * rng.random_range(5.0..30.0);
            let q = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..0.004) };
            participant(&cfg, i, rng.random_range(700..1300), q, g)
        })
        .collect();
    let pen = penalty(rng.random_range(0.0..0.1), rng.random_range(0.0..1.0), rng.random_range(0.0..0.01));
    InnerContext::new(&cfg, participants, 0.0, rng.random_range(2e-4..6e-4), pen)
}

/// Exact minimum of J2 over integer tau and a 200-point per-client power grid.
fn grid_min(ctx: &InnerContext) -> f64 {
    let full = vec![ctx.p_max; ctx.participants.len()];
    let Ok(top) = ctx.tau_max(&full) else { return f64::INFINITY };
    let mut best = f64::INFINITY;
    for tau in 1..=top.floor() as u32 {
        let tau = tau as f64;
        let mut p = Vec::new();
        for i in 0..ctx.participants.len() {
            let lo = ctx.power_window(tau, i).unwrap().p_min;
            let pick = (0..200)
                .map(|k| lo + (ctx.p_max - lo) * k as f64 / 199.0)
                .map(|pi| (pi, ctx.queue_residual(i, tau, pi).powi(2)))
                .fold((lo, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
            p.push(pick.0);
        }
        best = best.min(ctx.j2_objective(tau, &p));
    }
    best
}

#[test]
fn tau_max_arithmetic() {
    let cfg = SystemConfig::reference();
    let mut ctx = InnerContext::new(&cfg, vec![participant(&cfg, 0, 1000, 0.0, 1e-2)], 0.0, 1e-3, penalty(0.0, 0.0, 0.0));
    // power whose upload takes exactly 5 ms
    let snr = (cfg.model_bits / (cfg.b_up * 0.005) * LN2).exp_m1();
    let p = snr * cfg.b_up * cfg.n0 / 1e-2;
    assert!((ctx.tau_max(&[p]).unwrap() - 20.0).abs() < 1e-9);

    ctx.participants.push(participant(&cfg, 1, 1000, 0.0, 1e-2));
    ctx.participants[1].epoch_latency = 2e-4 * 20.0 / 12.0;
    assert!((ctx.tau_max(&[p, p]).unwrap() - 12.0).abs() < 1e-9);

    let snr = (cfg.model_bits / (cfg.b_up * 0.009) * LN2).exp_m1();
    let p_slow = snr * cfg.b_up * cfg.n0 / 1e-2;
    assert!(matches!(ctx.tau_max(&[p_slow, p_slow]), Err(Error::InfeasibleLatency(_))));
}

#[test]
fn power_window_inversion() {
    let cfg = SystemConfig::reference();
    let h = 1e-3;
    let mut ctx = InnerContext::new(&cfg, vec![participant(&cfg, 0, 1000, 0.0, h)], 0.0, 0.0, penalty(0.0, 0.0, 0.0));
    ctx.model_bits = 1e4;
    ctx.t_max = 0.005 + 1e-4;
    ctx.participants[0].epoch_latency = 1e-4;
    let w = ctx.power_window(1.0, 0).unwrap();
    assert!((w.window - 0.005).abs() < 1e-15);
    assert!(((w.p_min - 3.0 * cfg.b_up * cfg.n0 / h) / w.p_min).abs() < 1e-9);
    assert!((w.e_min - w.p_min * 0.005).abs() < 1e-18);
    let e_max = cfg.p_max * 1e4 / uplink_rate(cfg.p_max, h, &cfg);
    assert!(((w.e_max - e_max) / e_max).abs() < 1e-12);

    ctx.t_max = 1e6;
    assert!(ctx.power_window(1.0, 0).unwrap().p_min < 1e-15);
    ctx.t_max = 0.005 + 1e-4;
    ctx.participants[0].gain = 1e300;
    assert_eq!(ctx.power_window(1.0, 0).unwrap().p_min, f64::MIN_POSITIVE);
}

#[test]
fn power_window_errors() {
    let cfg = SystemConfig::reference();
    let ctx = InnerContext::new(&cfg, vec![participant(&cfg, 0, 1000, 0.0, 1e-12)], 0.0, 1e-3, penalty(0.0, 0.0, 0.0));
    assert!(matches!(ctx.power_window(1.0, 0), Err(Error::InfeasiblePower { .. })));
    assert!(matches!(ctx.power_window(100.0, 0), Err(Error::InfeasibleLatency(_))));
}

#[test]
fn j2_without_penalty_is_queue_terms() {
    let cfg = SystemConfig::reference();
    let ctx = InnerContext::new(
        &cfg,
        vec![participant(&cfg, 0, 1000, 0.002, 0.05), participant(&cfg, 1, 800, 0.0, 0.01)],
        0.00175f64.powi(2) - 2.0 * 0.001 * 0.00175,
        4e-4,
        penalty(0.0, 0.5, 0.01),
    );
    let p = [0.1, 0.15];
    let tau = 3.0;
    let direct: f64 = (0..2)
        .map(|i| {
            let c = &ctx.participants[i];
            let e = p[i] * cfg.model_bits / uplink_rate(p[i], c.gain, &cfg);
            (c.queue + tau * c.epoch_energy + e - cfg.e_add).powi(2)
        })
        .sum::<f64>()
        + ctx.idle_queue_term;
    assert!((ctx.j2_objective(tau, &p) - direct).abs() < 1e-15);
}

#[test]
fn j2_with_no_participants() {
    let cfg = SystemConfig::reference();
    let pen = penalty(0.3, 0.5, 0.01);
    let idle = 10.0 * cfg.e_add * cfg.e_add;
    let ctx = InnerContext::new(&cfg, vec![], idle, 4e-4, pen);
    let expect = idle + 0.3 * pen.bound(2.0);
    assert!((ctx.j2_objective(2.0, &[]) - expect).abs() < 1e-15);
}

#[test]
fn penalty_matches_independent_formula() {
    let pen = penalty(0.7, 0.4, 0.02);
    for tau in [0.5, 1.0, 3.0, 7.5] {
        let x: f64 = pen.eta * pen.beta;
        let k = (2.0 * pen.eta - pen.eta * pen.eta * pen.beta) / (pen.b1 * pen.b1);
        let direct = pen.rho * pen.a1 / pen.beta * ((1.0 + x).powf(tau) - x * tau - 1.0)
            + tau * pen.a3
            + 2.0 / (k * tau + 2.0 / pen.f_gap);
        assert!((pen.value(tau) - 0.7 * direct).abs() < 1e-12 * direct);
    }
}

#[test]
fn tau_derivative_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..100 {
        let ctx = random_context(&mut rng);
        let p: Vec<f64> = (0..ctx.participants.len()).map(|_| rng.random_range(0.02..0.2)).collect();
        let tau = rng.random_range(0.5..15.0);
        let h = 1e-4;
        let fd = (ctx.j2_objective(tau + h, &p) - ctx.j2_objective(tau - h, &p)) / (2.0 * h);
        let an = ctx.j2_tau_derivative(tau, &p);
        let scale = an.abs().max(1e-9);
        assert!((fd - an).abs() / scale < 1e-6, "fd {fd} analytic {an}");
    }
}

#[test]
fn j2_is_convex_in_tau() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..100 {
        let ctx = random_context(&mut rng);
        let p: Vec<f64> = (0..ctx.participants.len()).map(|_| rng.random_range(0.02..0.2)).collect();
        let f: Vec<f64> = (0..60).map(|k| ctx.j2_objective(0.25 * k as f64, &p)).collect();
        for k in 1..f.len() - 1 {
            assert!(f[k + 1] - 2.0 * f[k] + f[k - 1] >= -1e-9 * f[k].abs().max(1e-12));
        }
    }
}

fn integer_argmin(ctx: &InnerContext, p: &[f64]) -> (u32, f64) {
    let top = ctx.tau_max(p).unwrap().floor() as u32;
    (1..=top)
        .map(|t| (t, ctx.j2_objective(t as f64, p)))
        .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a })
}

#[test]
fn tau_case_at_one() {
    let cfg = SystemConfig::reference();
    let ctx = InnerContext::new(&cfg, vec![participant(&cfg, 0, 1000, 0.01, 0.05)], 0.0, 4e-4, penalty(1e-9, 0.0, 0.0));
    let p = [0.05];
    assert_eq!(ctx.relaxed_tau(&p).unwrap().1, TauCase::AtOne);
    assert_eq!(ctx.optimal_tau(&p).unwrap(), 1);
    assert_eq!(integer_argmin(&ctx, &p).0, 1);
}

#[test]
fn tau_case_clipped() {
    let cfg = SystemConfig::reference();
    let ctx = InnerContext::new(&cfg, vec![participant(&cfg, 0, 1000, 0.0, 0.05)], 0.0, 4e-4, penalty(100.0, 0.0, 0.0));
    let p = [0.05];
    let (_, case) = ctx.relaxed_tau(&p).unwrap();
    assert_eq!(case, TauCase::Clipped);
    let top = ctx.tau_max(&p).unwrap().floor() as u32;
    assert_eq!(ctx.optimal_tau(&p).unwrap(), top);
    assert_eq!(integer_argmin(&ctx, &p).0, top);
}

#[test]
fn tau_case_interior() {
    let cfg = SystemConfig::reference();
    let ctx = InnerContext::new(&cfg, vec![participant(&cfg, 0, 1000, 5e-4, 0.05)], 0.0, 4e-4, penalty(0.0, 0.0, 0.0));
    let p = [0.01];
    let (t, case) = ctx.relaxed_tau(&p).unwrap();
    assert_eq!(case, TauCase::Interior);
    assert!(ctx.j2_tau_derivative(t, &p).abs() < 1e-9);
    let (best, best_j) = integer_argmin(&ctx, &p);
    let chosen = ctx.optimal_tau(&p).unwrap();
    assert_eq!(chosen, best);
    assert!(ctx.j2_objective(chosen as f64, &p) <= best_j);
}

#[test]
fn power_cases() {
    let cfg = SystemConfig::reference();
    // queue already over the round budget: minimal spend
    let over = InnerContext::new(&cfg, vec![participant(&cfg, 0, 1000, 0.01, 0.05)], 0.0, 4e-4, penalty(0.0, 0.0, 0.0));
    let w = over.power_window(1.0, 0).unwrap();
    assert_eq!(over.optimal_power(1.0, 0).unwrap(), w.p_min);
    // budget larger than the most expensive upload: full power
    let mut rich = over.clone();
    rich.participants[0].queue = 0.0;
    rich.e_add = 1.0;
    assert_eq!(rich.optimal_power(1.0, 0).unwrap(), cfg.p_max);
}

#[test]
fn interior_power_hits_energy_target() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut hits = 0;
    for _ in 0..300 {
        let ctx = random_context(&mut rng);
        let top = match ctx.tau_max(&vec![ctx.p_max; ctx.participants.len()]) {
            Ok(t) => t.floor(),
            Err(_) => continue,
        };
        let tau = rng.random_range(1..=top as u32) as f64;
        for i in 0..ctx.participants.len() {
            let w = ctx.power_window(tau, i).unwrap();
            let c = &ctx.participants[i];
            let target = ctx.e_add - c.queue - tau * c.epoch_energy;
            if target > w.e_min && target < w.e_max {
                let p = ctx.optimal_power(tau, i).unwrap();
                let e = ctx.upload_energy(i, p);
                assert!(((e - target) / target).abs() < 1e-9, "e {e} target {target}");
                hits += 1;
            }
        }
    }
    assert!(hits > 50, "only {hits} interior cases");
}

#[test]
fn no_participants_is_infeasible() {
    let cfg = SystemConfig::reference();
    let ctx = InnerContext::new(&cfg, vec![], 0.0, 4e-4, penalty(0.1, 0.0, 0.0));
    assert!(matches!(ctx.alternate_solve(&mut ChaCha8Rng::seed_from_u64(1)), Err(Error::Infeasible)));
}

#[test]
fn single_participant_without_penalty_tracks_budget() {
    let cfg = SystemConfig::reference();
    let ctx = InnerContext::new(&cfg, vec![participant(&cfg, 0, 1000, 0.0, 0.05)], 0.0, 4e-4, penalty(0.0, 0.0, 0.0));
    let sol = ctx.alternate_solve(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let grid = grid_min(&ctx);
    assert!(sol.j2 <= grid + 1e-3 * grid.abs() + 1e-15, "solver {} grid {grid}", sol.j2);
}

#[test]
fn alternation_close_to_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut solved = 0;
    for _ in 0..100 {
        let ctx = random_context(&mut rng);
        let grid = grid_min(&ctx);
        let Ok(sol) = ctx.alternate_solve(&mut rng) else {
            assert!(grid.is_infinite());
            continue;
        };
        solved += 1;
        assert!(sol.j2 <= grid + 1e-3 * grid.abs() + 1e-15, "solver {} grid {grid}", sol.j2);
        assert!(sol.trace.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].abs()));
        assert!(sol.tau >= 1);
        assert!(sol.powers.iter().all(|&p| p > 0.0 && p <= ctx.p_max));
    }
    assert!(solved > 50);
}

proptest! {
    #[test]
    fn window_power_meets_latency(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ctx = random_context(&mut rng);
        if let Ok(top) = ctx.tau_max(&vec![ctx.p_max; ctx.participants.len()]) {
            let tau = top.floor();
            for i in 0..ctx.participants.len() {
                let p = ctx.optimal_power(tau, i).unwrap();
                let t = ctx.t_down + tau * ctx.participants[i].epoch_latency + ctx.upload_time(i, p);
                prop_assert!(t <= ctx.t_max * (1.0 + 1e-9));
            }
        }
    }
}

