//! Local-computation cost and the per-client virtual energy queue.

use serde::Serialize;

use crate::config::SystemConfig;

/// Seconds for one full-batch epoch over `samples` samples.
pub fn epoch_latency(cfg: &SystemConfig, samples: usize) -> f64 {
    cfg.cycles_per_sample * samples as f64 / cfg.cpu_freq
}

/// Joules for one full-batch epoch over `samples` samples.
pub fn epoch_energy(cfg: &SystemConfig, samples: usize) -> f64 {
    cfg.energy_coeff * cfg.cpu_freq * cfg.cpu_freq * cfg.cycles_per_sample * samples as f64
}

/// Net energy input `q_i` of one round; negative when the client overspends.
pub fn round_energy_balance(e_add: f64, participates: bool, tau: f64, epoch_energy: f64, e_up: f64) -> f64 {
    if participates {
        e_add - (tau * epoch_energy + e_up)
    } else {
        e_add
    }
}

pub fn update_virtual_queue(z: f64, q: f64) -> f64 {
    (z - q).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyQueueState {
    pub z: Vec<f64>,
    pub cumulative_consumed: Vec<f64>,
    pub cumulative_budget: Vec<f64>,
}

impl EnergyQueueState {
    pub fn new(num_clients: usize) -> Self {
        Self {
            z: vec![0.0; num_clients],
            cumulative_consumed: vec![0.0; num_clients],
            cumulative_budget: vec![0.0; num_clients],
        }
    }

    /// Books one round of realized consumption (J per client).
    pub fn apply(&mut self, consumed: &[f64], e_add: f64) {
        for (i, &c) in consumed.iter().enumerate() {
            let q = e_add - c;
            self.z[i] = update_virtual_queue(self.z[i], q);
            self.cumulative_consumed[i] += c;
            self.cumulative_budget[i] += e_add;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn reference_epoch_costs() {
        let cfg = SystemConfig::reference();
        assert!(rel(epoch_latency(&cfg, 1000), 2e-4) < 1e-12);
        assert!(rel(epoch_latency(&cfg, 500), 1e-4) < 1e-12);
        assert!(rel(epoch_latency(&cfg, 2000), 2.0 * epoch_latency(&cfg, 1000)) < 1e-12);
        assert!(rel(epoch_energy(&cfg, 1000), 2.5e-4) < 1e-12);
        assert_eq!(epoch_energy(&cfg, 0), 0.0);
        let fast = cfg.with_raw(|r| r.compute.cpu_freq_hz *= 2.0).unwrap();
        assert!(rel(epoch_energy(&fast, 1000), 4.0 * epoch_energy(&cfg, 1000)) < 1e-12);
    }

    #[test]
    fn energy_balance_cases() {
        assert_eq!(round_energy_balance(0.00175, false, 5.0, 2.5e-4, 5e-4), 0.00175);
        assert!(round_energy_balance(0.00175, true, 5.0, 2.5e-4, 5e-4).abs() < 1e-15);
        assert!(round_energy_balance(0.00175, true, 7.0, 2.5e-4, 0.0).abs() < 1e-15);
    }

    #[test]
    fn queue_updates() {
        assert!((update_virtual_queue(0.01, 0.004) - 0.006).abs() < 1e-15);
        assert_eq!(update_virtual_queue(0.001, 0.02), 0.0);
        assert_eq!(update_virtual_queue(0.3, 0.0), 0.3);
        assert!((update_virtual_queue(0.0, -0.002) - 0.002).abs() < 1e-15);
    }

    #[test]
    fn state_books_consumption() {
        let mut s = EnergyQueueState::new(2);
        s.apply(&[0.003, 0.0], 0.00175);
        assert!((s.z[0] - 0.00125).abs() < 1e-15);
        assert_eq!(s.z[1], 0.0);
        assert_eq!(s.cumulative_budget, vec![0.00175, 0.00175]);
        assert_eq!(s.cumulative_consumed, vec![0.003, 0.0]);
    }
}
