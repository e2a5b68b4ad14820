use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter `{0}` must be strictly positive")]
    NonPositiveParameter(&'static str),

    #[error("parameter `{name}` = {value} is outside its allowed range")]
    InvalidFraction { name: &'static str, value: f64 },

    #[error("network needs at least one client and one channel (got U={clients}, C={channels})")]
    DegenerateTopology { clients: usize, channels: usize },

    #[error("config parse error: {0}")]
    ConfigParse(#[from] toml::de::Error),

    #[error("no client participates in this round")]
    EmptyParticipation,

    #[error("cannot send {bits} bits at zero rate")]
    ZeroRate { bits: f64 },

    #[error("model did not move during the previous round; estimate kept")]
    DegenerateStep,

    #[error("step size too large: eta * beta = {0} >= 1")]
    StepSizeTooLarge(f64),

    #[error("Lambert W_-1 undefined at x = {0}")]
    DomainError(f64),

    #[error("latency budget exhausted (epoch window {0})")]
    InfeasibleLatency(f64),

    #[error("required uplink power {required} W exceeds p_max {p_max} W")]
    InfeasiblePower { required: f64, p_max: f64 },

    #[error("no feasible local-epoch count for this allocation")]
    Infeasible,

    #[error("non-IID degree {0} outside [0, 1]")]
    InvalidDegree(f64),

    #[error("{clients} clients need at least as many classes (have {classes})")]
    TooManyClients { clients: usize, classes: usize },

    #[error("invalid data shape: {0}")]
    InvalidShape(String),

    #[error("training diverged (non-finite loss) for client {client}")]
    NonFiniteLoss { client: usize },

    #[error("malformed dataset file: {0}")]
    DatasetFormat(String),

    #[error("invalid experiment: {0}")]
    InvalidExperiment(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
