//! System configuration.
//!
//! The on-disk format is TOML with one section per physical subsystem. Every
//! key has a default taken from the reference system parameters, so a config
//! file only lists what it changes. Unknown keys are rejected.
//!
//! dB / dBm quantities are accepted only here; [`SystemConfig`] stores every
//! quantity in linear SI units.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the broadcast rate is derived from per-client downlink SNRs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DownlinkRule {
    /// Rate of the weakest client, so every client can decode the broadcast.
    #[default]
    Min,
    /// Rate of the strongest client.
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    #[default]
    Cre,
    Random,
    RoundRobin,
}

impl SchedulerKind {
    pub const ALL: [SchedulerKind; 3] = [Self::Cre, Self::Random, Self::RoundRobin];

    pub fn name(self) -> &'static str {
        match self {
            Self::Cre => "cre",
            Self::Random => "random",
            Self::RoundRobin => "round_robin",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub num_clients: usize,
    pub num_channels: usize,
    pub radius_m: f64,
    pub carrier_freq_ghz: f64,
    pub downlink_rate_rule: DownlinkRule,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            num_clients: 10,
            num_channels: 3,
            radius_m: 500.0,
            carrier_freq_ghz: 2.0,
            downlink_rate_rule: DownlinkRule::Min,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadioSection {
    pub p_down_w: f64,
    pub p_max_w: f64,
    pub b_down_hz: f64,
    pub b_up_hz: f64,
    pub n0_dbm_per_hz: f64,
    pub antenna_gain_db: f64,
    pub rician_k: f64,
    pub rician_sigma: f64,
}

impl Default for RadioSection {
    fn default() -> Self {
        Self {
            p_down_w: 1.0,
            p_max_w: 0.2,
            b_down_hz: 20e6,
            b_up_hz: 1e6,
            n0_dbm_per_hz: -174.0,
            antenna_gain_db: 65.0,
            rician_k: 4.0,
            rician_sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComputeSection {
    pub cycles_per_sample: f64,
    pub cpu_freq_hz: f64,
    pub energy_coeff: f64,
}

impl Default for ComputeSection {
    fn default() -> Self {
        Self {
            cycles_per_sample: 100.0,
            cpu_freq_hz: 5e8,
            energy_coeff: 1e-26,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundSection {
    pub t_max_s: f64,
    pub model_bits: f64,
    pub e_add_j: f64,
}

impl Default for RoundSection {
    fn default() -> Self {
        Self {
            t_max_s: 0.01,
            model_bits: 318_080.0,
            e_add_j: 0.00175,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningSection {
    pub eta: f64,
    pub rounds: usize,
    /// Standard deviation of the random initial model entries.
    pub init_scale: f64,
}

impl Default for LearningSection {
    fn default() -> Self {
        Self {
            eta: 0.05,
            rounds: 100,
            init_scale: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub mean_size: f64,
    pub sigma_size: f64,
    pub non_iid_degree: f64,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Distance of every class mean from the origin.
    pub class_separation: f64,
    pub test_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            mean_size: 1000.0,
            sigma_size: 100.0,
            non_iid_degree: 0.4,
            num_classes: 10,
            feature_dim: 16,
            class_separation: 3.0,
            test_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub v: f64,
    pub eps_p: f64,
    pub eps_tau: f64,
    /// Initial annealing temperature; derived from the all-idle objective when absent.
    pub sa_temp: Option<f64>,
    pub sa_decay: f64,
    pub sa_iters: usize,
    pub inner_max_iters: usize,
    /// Local epochs used by the fixed-rule baselines.
    pub tau_fixed: u32,
    /// Keep rho/beta estimates as running maxima across rounds.
    pub running_max_estimates: bool,
    /// Let the annealer return the all-idle allocation even when a feasible
    /// allocation with participants was found.
    pub idle_as_candidate: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            v: 0.1,
            eps_p: 1e-9,
            eps_tau: 1e-6,
            sa_temp: None,
            sa_decay: 0.95,
            sa_iters: 200,
            inner_max_iters: 100,
            tau_fixed: 2,
            running_max_estimates: false,
            idle_as_candidate: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub scheduler: SchedulerKind,
    pub v_values: Vec<f64>,
    pub d_values: Vec<f64>,
    pub sigma_values: Vec<f64>,
    pub replicates: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            scheduler: SchedulerKind::Cre,
            v_values: Vec::new(),
            d_values: Vec::new(),
            sigma_values: Vec::new(),
            replicates: 1,
        }
    }
}

/// Config file contents exactly as written by the user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RawConfig {
    pub seed: u64,
    pub network: NetworkSection,
    pub radio: RadioSection,
    pub compute: ComputeSection,
    pub round: RoundSection,
    pub learning: LearningSection,
    pub data: DataSection,
    pub solver: SolverSection,
    pub experiment: ExperimentSection,
}

impl Default for RawConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            network: NetworkSection::default(),
            radio: RadioSection::default(),
            compute: ComputeSection::default(),
            round: RoundSection::default(),
            learning: LearningSection::default(),
            data: DataSection::default(),
            solver: SolverSection::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

impl RawConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("RawConfig always serializes")
    }
}

/// Validated configuration in linear SI units.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    pub num_clients: usize,
    pub num_channels: usize,
    pub radius_m: f64,
    pub carrier_freq_ghz: f64,
    pub downlink_rule: DownlinkRule,
    pub p_down: f64,
    pub p_max: f64,
    pub b_down: f64,
    pub b_up: f64,
    /// Noise power spectral density, W/Hz.
    pub n0: f64,
    /// Linear antenna gain.
    pub antenna_gain: f64,
    pub rician_k: f64,
    pub rician_sigma: f64,
    pub cycles_per_sample: f64,
    pub cpu_freq: f64,
    pub energy_coeff: f64,
    pub t_max: f64,
    pub model_bits: f64,
    pub e_add: f64,
    pub eta: f64,
    pub rounds: usize,
    pub init_scale: f64,
    pub v: f64,
    pub eps_p: f64,
    pub eps_tau: f64,
    pub sa_temp: Option<f64>,
    pub sa_decay: f64,
    pub sa_iters: usize,
    pub inner_max_iters: usize,
    pub tau_fixed: u32,
    pub running_max_estimates: bool,
    pub idle_as_candidate: bool,
    pub data: DataSection,
    pub seed: u64,
    pub raw: RawConfig,
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// dBm/Hz to W/Hz.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

fn positive(name: &'static str, x: f64) -> Result<f64> {
    if x.is_finite() && x > 0.0 {
        Ok(x)
    } else {
        Err(Error::NonPositiveParameter(name))
    }
}

fn fraction(name: &'static str, x: f64, lo_open: bool, hi_open: bool) -> Result<f64> {
    let lo_ok = if lo_open { x > 0.0 } else { x >= 0.0 };
    let hi_ok = if hi_open { x < 1.0 } else { x <= 1.0 };
    if x.is_finite() && lo_ok && hi_ok {
        Ok(x)
    } else {
        Err(Error::InvalidFraction { name, value: x })
    }
}

/// Checks every invariant of the raw config and converts it to linear units.
pub fn validate_config(raw: RawConfig) -> Result<SystemConfig> {
    let n = &raw.network;
    if n.num_clients == 0 || n.num_channels == 0 {
        return Err(Error::DegenerateTopology {
            clients: n.num_clients,
            channels: n.num_channels,
        });
    }
    let r = &raw.radio;
    let c = &raw.compute;
    let rd = &raw.round;
    let l = &raw.learning;
    let s = &raw.solver;
    let d = &raw.data;

    if !(s.v.is_finite() && s.v >= 0.0) {
        return Err(Error::InvalidFraction { name: "solver.v", value: s.v });
    }
    if let Some(t0) = s.sa_temp {
        positive("solver.sa_temp", t0)?;
    }
    if s.sa_iters == 0 {
        return Err(Error::NonPositiveParameter("solver.sa_iters"));
    }
    if s.inner_max_iters == 0 {
        return Err(Error::NonPositiveParameter("solver.inner_max_iters"));
    }
    if s.tau_fixed == 0 {
        return Err(Error::NonPositiveParameter("solver.tau_fixed"));
    }
    if d.num_classes < 2 {
        return Err(Error::InvalidShape("need at least two classes".into()));
    }
    if d.feature_dim == 0 {
        return Err(Error::NonPositiveParameter("data.feature_dim"));
    }
    if !(l.init_scale.is_finite() && l.init_scale >= 0.0) {
        return Err(Error::InvalidFraction { name: "learning.init_scale", value: l.init_scale });
    }
    if !(d.sigma_size.is_finite() && d.sigma_size >= 0.0) {
        return Err(Error::InvalidFraction { name: "data.sigma_size", value: d.sigma_size });
    }
    for &dv in &raw.experiment.d_values {
        fraction("experiment.d_values", dv, false, false)?;
    }
    for &v in &raw.experiment.v_values {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::InvalidFraction { name: "experiment.v_values", value: v });
        }
    }
    for &sv in &raw.experiment.sigma_values {
        if !(sv.is_finite() && sv >= 0.0) {
            return Err(Error::InvalidFraction { name: "experiment.sigma_values", value: sv });
        }
    }

    let cfg = SystemConfig {
        num_clients: n.num_clients,
        num_channels: n.num_channels,
        radius_m: positive("network.radius_m", n.radius_m)?,
        carrier_freq_ghz: positive("network.carrier_freq_ghz", n.carrier_freq_ghz)?,
        downlink_rule: n.downlink_rate_rule,
        p_down: positive("radio.p_down_w", r.p_down_w)?,
        p_max: positive("radio.p_max_w", r.p_max_w)?,
        b_down: positive("radio.b_down_hz", r.b_down_hz)?,
        b_up: positive("radio.b_up_hz", r.b_up_hz)?,
        n0: positive("radio.n0_dbm_per_hz", dbm_to_watts(r.n0_dbm_per_hz))?,
        antenna_gain: positive("radio.antenna_gain_db", db_to_linear(r.antenna_gain_db))?,
        rician_k: positive("radio.rician_k", r.rician_k)?,
        rician_sigma: positive("radio.rician_sigma", r.rician_sigma)?,
        cycles_per_sample: positive("compute.cycles_per_sample", c.cycles_per_sample)?,
        cpu_freq: positive("compute.cpu_freq_hz", c.cpu_freq_hz)?,
        energy_coeff: positive("compute.energy_coeff", c.energy_coeff)?,
        t_max: positive("round.t_max_s", rd.t_max_s)?,
        model_bits: positive("round.model_bits", rd.model_bits)?,
        e_add: positive("round.e_add_j", rd.e_add_j)?,
        eta: positive("learning.eta", l.eta)?,
        rounds: l.rounds,
        init_scale: l.init_scale,
        v: s.v,
        eps_p: positive("solver.eps_p", s.eps_p)?,
        eps_tau: positive("solver.eps_tau", s.eps_tau)?,
        sa_temp: s.sa_temp,
        sa_decay: fraction("solver.sa_decay", s.sa_decay, true, true)?,
        sa_iters: s.sa_iters,
        inner_max_iters: s.inner_max_iters,
        tau_fixed: s.tau_fixed,
        running_max_estimates: s.running_max_estimates,
        idle_as_candidate: s.idle_as_candidate,
        data: DataSection {
            mean_size: positive("data.mean_size", d.mean_size)?,
            non_iid_degree: fraction("data.non_iid_degree", d.non_iid_degree, false, false)?,
            class_separation: positive("data.class_separation", d.class_separation)?,
            test_fraction: fraction("data.test_fraction", d.test_fraction, true, true)?,
            ..d.clone()
        },
        seed: raw.seed,
        raw,
    };
    Ok(cfg)
}

impl SystemConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        validate_config(RawConfig::from_toml_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    /// Reference parameter set with every default.
    pub fn reference() -> Self {
        validate_config(RawConfig::default()).expect("defaults are valid")
    }

    /// Re-validates after editing the raw form.
    pub fn with_raw(&self, edit: impl FnOnce(&mut RawConfig)) -> Result<Self> {
        let mut raw = self.raw.clone();
        edit(&mut raw);
        validate_config(raw)
    }
}
