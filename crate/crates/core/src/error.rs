use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at {line}:{col}: {msg}")]
    Parse { line: usize, col: usize, msg: String },

    #[error("kind mismatch: cannot substitute {to} for {from}")]
    KindMismatch { from: String, to: String },

    #[error("duplicate boundary label @{0}")]
    DuplicateLabel(String),

    #[error("term has unlabeled resource boundaries; run label_boundaries first")]
    Unlabeled,

    #[error("replication budgets not stamped; run replication_unfold before stepping")]
    UnstampedReplication,

    #[error("body under a resource scope is not sequential")]
    NonSequential,

    #[error("unknown policy {0}")]
    UnknownPolicy(String),

    #[error("nondeterministic policy {policy}: two transitions from {state} on {action}")]
    NondeterministicPolicy { policy: String, state: String, action: String },

    #[error("duplicate process name {0}")]
    DuplicateProcess(String),

    #[error("unknown process name {0}")]
    UnknownProcess(String),

    #[error("recursive process definition {0}")]
    RecursiveProcess(String),

    #[error("no entry point declared and no process named Main")]
    NoEntry,

    #[error("resource {0} is not declared in the process")]
    UndeclaredResource(String),

    #[error("reconfiguration script steps must be strictly increasing")]
    ScriptOrder,

    #[error("analysis exceeded its iteration ceiling; estimate did not stabilise")]
    FixpointCeiling,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
