//! Shared domain types and aggregation-weight arithmetic.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientProfile {
    pub id: usize,
    /// Distance to the base station, m.
    pub distance_m: f64,
    pub dataset_size: usize,
    pub non_iid_degree: f64,
}

/// Channel-to-client assignment, one slot per uplink channel.
///
/// Each channel serves at most one client by construction; [`Self::is_valid`]
/// additionally checks that no client holds two channels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct ChannelAllocation {
    slots: Vec<Option<usize>>,
}

impl ChannelAllocation {
    pub fn empty(num_channels: usize) -> Self {
        Self {
            slots: vec![None; num_channels],
        }
    }

    pub fn from_slots(slots: Vec<Option<usize>>) -> Self {
        Self { slots }
    }

    pub fn slots(&self) -> &[Option<usize>] {
        &self.slots
    }

    pub fn num_channels(&self) -> usize {
        self.slots.len()
    }

    pub fn set(&mut self, channel: usize, client: Option<usize>) {
        self.slots[channel] = client;
    }

    pub fn channel_of(&self, client: usize) -> Option<usize> {
        self.slots.iter().position(|&s| s == Some(client))
    }

    pub fn participants(&self, num_clients: usize) -> Vec<bool> {
        let mut a = vec![false; num_clients];
        for &c in self.slots.iter().flatten() {
            a[c] = true;
        }
        a
    }

    /// `(client, channel)` pairs ordered by client index.
    pub fn assignments(&self) -> Vec<(usize, usize)> {
        let mut v: Vec<_> = self
            .slots
            .iter()
            .enumerate()
            .filter_map(|(ch, s)| s.map(|cl| (cl, ch)))
            .collect();
        v.sort_unstable();
        v
    }

    pub fn num_assigned(&self) -> usize {
        self.slots.iter().flatten().count()
    }

    pub fn is_valid(&self, num_clients: usize) -> bool {
        let mut seen = vec![false; num_clients];
        for &c in self.slots.iter().flatten() {
            if c >= num_clients || seen[c] {
                return false;
            }
            seen[c] = true;
        }
        true
    }

    /// Binary C x U matrix form.
    pub fn to_matrix(&self, num_clients: usize) -> Vec<Vec<bool>> {
        self.slots
            .iter()
            .map(|s| (0..num_clients).map(|i| *s == Some(i)).collect())
            .collect()
    }

    pub fn from_matrix(r: &[Vec<bool>]) -> std::result::Result<Self, ConstraintViolation> {
        check_allocation_matrix(r)?;
        Ok(Self {
            slots: r.iter().map(|row| row.iter().position(|&b| b)).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConstraintViolation {
    /// Channel carries more than one client.
    ChannelShared { channel: usize },
    /// Client holds more than one channel.
    ClientMultiChannel { client: usize },
    /// Participation flag disagrees with the client's column sum.
    ParticipationMismatch { client: usize },
    /// Power is nonzero for an idle client or zero for a participant.
    PowerSupport { client: usize },
    PowerAboveMax { client: usize },
    ZeroEpochs,
    Shape,
}

/// Accepts exactly the binary matrices with row sums <= 1 and column sums in {0, 1};
/// returns the implied participation vector.
pub fn check_allocation_matrix(r: &[Vec<bool>]) -> std::result::Result<Vec<bool>, ConstraintViolation> {
    let Some(first) = r.first() else {
        return Err(ConstraintViolation::Shape);
    };
    let u = first.len();
    if r.iter().any(|row| row.len() != u) {
        return Err(ConstraintViolation::Shape);
    }
    for (c, row) in r.iter().enumerate() {
        if row.iter().filter(|&&b| b).count() > 1 {
            return Err(ConstraintViolation::ChannelShared { channel: c });
        }
    }
    let mut a = vec![false; u];
    for (i, ai) in a.iter_mut().enumerate() {
        match r.iter().filter(|row| row[i]).count() {
            0 => {}
            1 => *ai = true,
            _ => return Err(ConstraintViolation::ClientMultiChannel { client: i }),
        }
    }
    Ok(a)
}

/// The per-round decision: participation, channel allocation, uplink powers, local epochs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundSolution {
    pub a: Vec<bool>,
    pub allocation: ChannelAllocation,
    /// Uplink power per client, W (zero for idle clients).
    pub p_up: Vec<f64>,
    pub tau: u32,
}

impl RoundSolution {
    pub fn idle(num_clients: usize, num_channels: usize) -> Self {
        Self {
            a: vec![false; num_clients],
            allocation: ChannelAllocation::empty(num_channels),
            p_up: vec![0.0; num_clients],
            tau: 0,
        }
    }

    pub fn participants(&self) -> impl Iterator<Item = usize> + '_ {
        self.a.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn num_participants(&self) -> usize {
        self.a.iter().filter(|&&b| b).count()
    }

    pub fn check(&self, p_max: f64) -> std::result::Result<(), ConstraintViolation> {
        let u = self.a.len();
        if self.p_up.len() != u {
            return Err(ConstraintViolation::Shape);
        }
        let a = check_allocation_matrix(&self.allocation.to_matrix(u))?;
        for i in 0..u {
            if a[i] != self.a[i] {
                return Err(ConstraintViolation::ParticipationMismatch { client: i });
            }
            if self.a[i] != (self.p_up[i] > 0.0) {
                return Err(ConstraintViolation::PowerSupport { client: i });
            }
            if self.p_up[i] > p_max * (1.0 + 1e-12) {
                return Err(ConstraintViolation::PowerAboveMax { client: i });
            }
        }
        if self.num_participants() > 0 && self.tau == 0 {
            return Err(ConstraintViolation::ZeroEpochs);
        }
        Ok(())
    }
}

/// One metrics row per communication round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub participants: Vec<bool>,
    pub tau: u32,
    pub client_energy: Vec<f64>,
    pub queues: Vec<f64>,
    pub cumulative_energy: f64,
    pub global_loss: f64,
    pub test_accuracy: f64,
    pub bound_value: f64,
    pub objective_j: f64,
    /// Realized `F(theta^n) - F*` with the estimated optimum.
    pub loss_gap: f64,
    pub powers: Vec<f64>,
    pub channels: Vec<Option<usize>>,
}

impl RoundMetrics {
    pub fn round_energy(&self) -> f64 {
        self.client_energy.iter().sum()
    }

    pub fn max_queue(&self) -> f64 {
        self.queues.iter().copied().fold(0.0, f64::max)
    }

    pub fn num_participants(&self) -> usize {
        self.participants.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWeights {
    /// Full-participation weights `D_i / sum D`.
    pub w: Vec<f64>,
    /// Participation weights `a_i D_i / D^n`.
    pub w_tilde: Vec<f64>,
    /// Samples held by the participants.
    pub participating_samples: usize,
}

pub fn full_weights(sizes: &[usize]) -> Vec<f64> {
    let total: usize = sizes.iter().sum();
    sizes.iter().map(|&d| d as f64 / total as f64).collect()
}

pub fn aggregation_weights(sizes: &[usize], a: &[bool]) -> Result<AggregationWeights> {
    assert_eq!(sizes.len(), a.len());
    let dn: usize = sizes.iter().zip(a).filter(|(_, &ai)| ai).map(|(d, _)| d).sum();
    if dn == 0 {
        return Err(Error::EmptyParticipation);
    }
    let w_tilde = sizes
        .iter()
        .zip(a)
        .map(|(&d, &ai)| if ai { d as f64 / dn as f64 } else { 0.0 })
        .collect();
    Ok(AggregationWeights {
        w: full_weights(sizes),
        w_tilde,
        participating_samples: dn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn symmetric_pair() {
        let w = aggregation_weights(&[1000, 1000], &[true, true]).unwrap();
        assert_eq!(w.w_tilde, vec![0.5, 0.5]);
    }

    #[test]
    fn single_participant_takes_all_weight() {
        let w = aggregation_weights(&[1000, 3000], &[false, true]).unwrap();
        assert_eq!(w.w_tilde, vec![0.0, 1.0]);
        assert_eq!(w.participating_samples, 3000);
    }

    #[test]
    fn full_weights_by_size() {
        let w = aggregation_weights(&[1000, 3000], &[true, true]).unwrap();
        assert_eq!(w.w, vec![0.25, 0.75]);
    }

    #[test]
    fn empty_participation_is_error() {
        assert!(matches!(
            aggregation_weights(&[5, 6], &[false, false]),
            Err(Error::EmptyParticipation)
        ));
    }

    #[test]
    fn idle_solution_passes_checker() {
        assert!(RoundSolution::idle(4, 2).check(0.2).is_ok());
    }

    #[test]
    fn power_support_enforced() {
        let mut s = RoundSolution::idle(3, 2);
        s.p_up[1] = 0.1;
        assert_eq!(s.check(0.2), Err(ConstraintViolation::PowerSupport { client: 1 }));
        s.a[1] = true;
        s.allocation.set(0, Some(1));
        s.tau = 1;
        assert!(s.check(0.2).is_ok());
        s.p_up[1] = 0.3;
        assert_eq!(s.check(0.2), Err(ConstraintViolation::PowerAboveMax { client: 1 }));
    }

    fn brute_valid(r: &[Vec<bool>]) -> bool {
        r.iter().all(|row| row.iter().filter(|&&b| b).count() <= 1)
            && (0..r[0].len()).all(|i| r.iter().filter(|row| row[i]).count() <= 1)
    }

    proptest! {
        #[test]
        fn reduces_to_full_weights_under_full_participation(
            sizes in proptest::collection::vec(1usize..5000, 1..12)
        ) {
            let a = vec![true; sizes.len()];
            let w = aggregation_weights(&sizes, &a).unwrap();
            for (x, y) in w.w.iter().zip(&w.w_tilde) {
                prop_assert!((x - y).abs() < 1e-15);
            }
            prop_assert!((w.w_tilde.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn checker_matches_definition_and_single_flips(
            c in 1usize..4, u in 1usize..5, bits in proptest::collection::vec(any::<bool>(), 16)
        ) {
            let r: Vec<Vec<bool>> = (0..c).map(|ci| (0..u).map(|i| bits[ci * u + i]).collect()).collect();
            prop_assert_eq!(check_allocation_matrix(&r).is_ok(), brute_valid(&r));
            if brute_valid(&r) {
                for ci in 0..c {
                    for i in 0..u {
                        let mut flipped = r.clone();
                        flipped[ci][i] = !flipped[ci][i];
                        prop_assert_eq!(check_allocation_matrix(&flipped).is_ok(), brute_valid(&flipped));
                    }
                }
                let alloc = ChannelAllocation::from_matrix(&r).unwrap();
                prop_assert_eq!(alloc.to_matrix(u), r);
            }
        }
    }
}
