use thiserror::Error;

pub type Result<T, E = HzpError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HzpError {
    #[error("non-divisible configuration: {0}")]
    NonDivisible(String),

    #[error("model has no parameters")]
    EmptyModel,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("sharding group of size {group} exceeds data-parallel world size {world}")]
    ReplicaExceedsWorld { group: u64, world: u64 },

    #[error("no sharding configuration fits in {budget} bytes")]
    NoFeasibleConfig { budget: u64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dtype {0} is not supported by this collective")]
    DTypeUnsupported(&'static str),

    #[error("invalid task-graph policy: {0}")]
    InvalidPolicy(String),

    #[error("deadlock: {pending} tasks cannot start (first blocked task {first_blocked})")]
    DeadlockDetected { pending: usize, first_blocked: usize },

    #[error("unsupported pipeline variant: {0}")]
    UnsupportedVariant(String),

    #[error("invalid pipeline schedule: {0}")]
    InvalidSchedule(String),

    #[error("schedule does not match task graph: {0}")]
    ScheduleGraphMismatch(String),

    #[error("equivalence failure in {config} at step {step}: {tensor}[{index}] hzp={hzp} baseline={baseline}")]
    EquivalenceFailure { config: String, step: usize, tensor: String, index: usize, hzp: f64, baseline: f64 },

    #[error("config parse error: {0}")]
    Parse(String),
}
