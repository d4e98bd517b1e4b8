use thiserror::Error;

/// Every failure the simulator, operators and query harness can report.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("scratchpad exhausted: requested {requested} bytes, {available} available")]
    ScratchpadExhausted { requested: u64, available: u64 },
    #[error("unaligned access: {0}")]
    Unaligned(String),
    #[error("out of bounds: {0}")]
    OutOfBounds(String),
    #[error("deadlock detected in kernel {kernel} on dpu {dpu}: {detail}")]
    Deadlock { kernel: String, dpu: usize, detail: String },
    #[error("tasklet {tasklet} unlocked mutex {mutex} it does not hold")]
    UnlockNotHeld { tasklet: usize, mutex: usize },
    #[error("invalid tasklet count {0}")]
    TaskletCount(usize),
    #[error("bucket {bucket} overflowed its reserved range")]
    BucketOverflow { bucket: usize },
    #[error("bank memory exhausted on dpu {dpu}: need {requested} bytes, {available} free")]
    MramExhausted { dpu: usize, requested: u64, available: u64 },
    #[error("destination dpu {dpu} overflow: {bytes} bytes exceed capacity {capacity}")]
    DestinationOverflow { dpu: usize, bytes: u64, capacity: u64 },
    #[error("transfer on rank {rank} overlaps an active kernel")]
    KernelActiveConflict { rank: usize },
    #[error("invalid transfer: {0}")]
    Transfer(String),
    #[error("pipeline dependency cycle involving op {0}")]
    DependencyCycle(usize),
    #[error("join key ranges are not co-partitioned on dpu {0}")]
    RangeMismatch(usize),
    #[error("skew overflow: {0}")]
    SkewOverflow(String),
    #[error("duplicate inner join key {0}")]
    DuplicateInnerKey(i64),
    #[error("capacity overflow: {0}")]
    Capacity(String),
    #[error("unknown query {0}")]
    UnknownQuery(u32),
    #[error("table format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(String),
    #[error("kernel invariant violated: {0}")]
    Internal(String),
}

impl From<std::io::Error> for SimError {
    fn from(e: std::io::Error) -> Self {
        SimError::Io(e.to_string())
    }
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;
