//! Link budget: path loss, Rician small-scale fading, Shannon rates, and the
//! latency/energy of moving a model over a link.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{DownlinkRule, SystemConfig};
use crate::error::{Error, Result};

/// Urban-macro path loss in dB, distance in metres and carrier in GHz.
pub fn path_loss_db(distance_m: f64, carrier_ghz: f64) -> f64 {
    28.0 + 22.0 * distance_m.log10() + 20.0 * carrier_ghz.log10()
}

pub fn large_scale_gain(distance_m: f64, carrier_ghz: f64) -> f64 {
    10f64.powf(-path_loss_db(distance_m, carrier_ghz) / 10.0)
}

/// Draws a Rician power gain `A^2`, where the envelope `A` has noncentrality `k`
/// and per-component scale `sigma`.
pub fn sample_small_scale<R: Rng + ?Sized>(rng: &mut R, k: f64, sigma: f64) -> f64 {
    let x: f64 = StandardNormal.sample(rng);
    let y: f64 = StandardNormal.sample(rng);
    let re = k + sigma * x;
    let im = sigma * y;
    // A zero draw only happens with probability zero; keep the gain positive anyway.
    (re * re + im * im).max(f64::MIN_POSITIVE)
}

/// `bandwidth * log2(1 + p h / (bandwidth N0))`.
pub fn shannon_rate(p: f64, h: f64, bandwidth: f64, n0: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    bandwidth * (p * h / (bandwidth * n0)).ln_1p() / std::f64::consts::LN_2
}

pub fn uplink_rate(p: f64, h: f64, cfg: &SystemConfig) -> f64 {
    shannon_rate(p, h, cfg.b_up, cfg.n0)
}

pub fn downlink_rate(h_down: &[f64], cfg: &SystemConfig) -> f64 {
    let rates = h_down
        .iter()
        .map(|&h| shannon_rate(cfg.p_down, h, cfg.b_down, cfg.n0));
    match cfg.downlink_rule {
        DownlinkRule::Min => rates.fold(f64::INFINITY, f64::min),
        DownlinkRule::Max => rates.fold(0.0, f64::max),
    }
}

pub fn transmission_latency(bits: f64, rate_bps: f64) -> Result<f64> {
    if bits == 0.0 {
        return Ok(0.0);
    }
    if rate_bps <= 0.0 {
        return Err(Error::ZeroRate { bits });
    }
    Ok(bits / rate_bps)
}

pub fn uplink_energy(p: f64, t: f64) -> f64 {
    p * t
}

/// Energy to upload `bits` at power `p` over gain `h`; the limit as `p -> 0`
/// is `bits N0 ln2 / h`.
pub fn upload_energy_at_power(p: f64, h: f64, bits: f64, bandwidth: f64, n0: f64) -> f64 {
    if p <= 0.0 {
        return bits * n0 * std::f64::consts::LN_2 / h;
    }
    p * bits / shannon_rate(p, h, bandwidth, n0)
}

/// One round's channel realization.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkState {
    pub round: usize,
    pub h_down: Vec<f64>,
    /// `h_up[i][c]`: gain of client `i` on uplink channel `c`.
    pub h_up: Vec<Vec<f64>>,
    pub v_down: f64,
    pub t_down: f64,
}

impl LinkState {
    /// Redraws small-scale fading for every (client, channel) pair; `large`
    /// holds the fixed per-client large-scale gains.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, cfg: &SystemConfig, large: &[f64], round: usize) -> Self {
        let mut h_down = Vec::with_capacity(large.len());
        let mut h_up = Vec::with_capacity(large.len());
        for &g in large {
            let base = g * cfg.antenna_gain;
            h_down.push(base * sample_small_scale(rng, cfg.rician_k, cfg.rician_sigma));
            h_up.push(
                (0..cfg.num_channels)
                    .map(|_| base * sample_small_scale(rng, cfg.rician_k, cfg.rician_sigma))
                    .collect(),
            );
        }
        let v_down = downlink_rate(&h_down, cfg);
        let t_down = if v_down > 0.0 { cfg.model_bits / v_down } else { f64::INFINITY };
        Self {
            round,
            h_down,
            h_up,
            v_down,
            t_down,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn unit_distance_unit_ghz_is_28_db() {
        assert!(rel(large_scale_gain(1.0, 1.0), 10f64.powf(-2.8)) < 1e-12);
        assert!(rel(large_scale_gain(1.0, 1.0), 1.5849e-3) < 1e-4);
    }

    #[test]
    fn uma_at_500m_2ghz() {
        // 28 + 22 log10(500) + 20 log10(2), evaluated by hand.
        assert!((path_loss_db(500.0, 2.0) - 93.397940).abs() < 1e-6);
        assert!(rel(large_scale_gain(500.0, 2.0), 4.5730e-10) < 1e-4);
    }

    #[test]
    fn per_decade_ratio() {
        let r = large_scale_gain(100.0, 2.0) / large_scale_gain(1000.0, 2.0);
        assert!(rel(r, 10f64.powf(2.2)) < 1e-12);
    }

    #[test]
    fn gain_decreases_with_distance() {
        let mut prev = f64::INFINITY;
        for d in [1.0, 2.0, 10.0, 55.0, 300.0, 500.0] {
            let g = large_scale_gain(d, 2.0);
            assert!(g < prev);
            prev = g;
        }
    }

    #[test]
    fn zero_scale_rician_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert!(rel(sample_small_scale(&mut rng, 4.0, 0.0), 16.0) < 1e-15);
        }
    }

    #[test]
    fn rician_second_moment() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let mean = (0..n).map(|_| sample_small_scale(&mut rng, 4.0, 1.0)).sum::<f64>() / n as f64;
        assert!(rel(mean, 18.0) < 0.01, "mean {mean}");
    }

    #[test]
    fn same_seed_same_stream() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            assert_eq!(sample_small_scale(&mut a, 4.0, 1.0), sample_small_scale(&mut b, 4.0, 1.0));
        }
    }

    #[test]
    fn downlink_rates() {
        let cfg = SystemConfig::reference();
        let unit = cfg.b_down * cfg.n0 / cfg.p_down;
        assert!(rel(downlink_rate(&[unit], &cfg), cfg.b_down) < 1e-12);
        assert!(rel(downlink_rate(&[unit, 3.0 * unit], &cfg), cfg.b_down) < 1e-12);
        assert!(rel(downlink_rate(&[3.0 * unit], &cfg), 4e7) < 1e-12);
        let max_cfg = cfg.with_raw(|r| r.network.downlink_rate_rule = DownlinkRule::Max).unwrap();
        assert!(rel(downlink_rate(&[unit, 3.0 * unit], &max_cfg), 4e7) < 1e-12);
    }

    #[test]
    fn uplink_rates() {
        let cfg = SystemConfig::reference();
        let h = 1e-3;
        let p1 = cfg.b_up * cfg.n0 / h;
        assert!(rel(uplink_rate(p1, h, &cfg), 1e6) < 1e-12);
        assert_eq!(uplink_rate(0.0, h, &cfg), 0.0);
        assert!(rel(uplink_rate(3.0 * p1, h, &cfg), 2e6) < 1e-12);
    }

    #[test]
    fn latency_and_energy() {
        assert!(rel(transmission_latency(318_080.0, 3.1808e7).unwrap(), 0.01) < 1e-12);
        assert_eq!(transmission_latency(0.0, 0.0).unwrap(), 0.0);
        assert!(matches!(transmission_latency(10.0, 0.0), Err(Error::ZeroRate { .. })));
        assert!(rel(uplink_energy(0.2, 0.005), 1e-3) < 1e-12);
    }

    #[test]
    fn rate_monotone_concave_on_grid() {
        let cfg = SystemConfig::reference();
        let h = 2e-2;
        let step = cfg.p_max / 400.0;
        let r: Vec<f64> = (0..=400).map(|k| uplink_rate(k as f64 * step, h, &cfg)).collect();
        for k in 1..r.len() {
            assert!(r[k] > r[k - 1]);
        }
        for k in 2..r.len() {
            assert!(r[k] - 2.0 * r[k - 1] + r[k - 2] <= 1e-6 * r[k]);
        }
    }

    #[test]
    fn upload_energy_increases_with_power() {
        let cfg = SystemConfig::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let h = 10f64.powf(rng.random_range(-6.0..-1.0));
            let bits = rng.random_range(1e3..1e6);
            let p = rng.random_range(1e-4..cfg.p_max);
            let dp = p * 1e-6;
            let hi = upload_energy_at_power(p + dp, h, bits, cfg.b_up, cfg.n0);
            let lo = upload_energy_at_power(p - dp, h, bits, cfg.b_up, cfg.n0);
            assert!(hi > lo, "h={h} p={p}");
        }
    }

    #[test]
    fn link_state_is_reproducible() {
        let cfg = SystemConfig::reference();
        let large = vec![large_scale_gain(100.0, 2.0), large_scale_gain(400.0, 2.0)];
        let a = LinkState::draw(&mut ChaCha8Rng::seed_from_u64(9), &cfg, &large, 1);
        let b = LinkState::draw(&mut ChaCha8Rng::seed_from_u64(9), &cfg, &large, 1);
        assert_eq!(a, b);
        assert_eq!(a.h_up[0].len(), cfg.num_channels);
        assert!(a.h_up.iter().flatten().all(|&h| h > 0.0));
        assert!(a.t_down > 0.0);
    }
}
