use thiserror::Error;

/// Errors produced by the factorization and approximation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("inside set of the domain is not connected ({components} components)")]
    DisconnectedDomain { components: usize },
    #[error("basepoint {0:?} is not inside the domain")]
    BasepointOutside(Vec<usize>),
    #[error("omega_eps is empty for eps = {eps}")]
    EmptyResult { eps: f64 },
    #[error("unknown map case `{0}`")]
    UnknownCase(String),
    #[error("node {0} is not a node of the graph")]
    NodeNotInGraph(usize),
    #[error("source set is empty")]
    EmptySourceSet,
    #[error("class {class} has value spread {spread} above slack {slack}; tau is too large")]
    InconsistentClass { class: usize, spread: f64, slack: f64 },
    #[error("unknown class {0}")]
    UnknownClass(usize),
    #[error("cycle detected while growing the subtree at class {0}; the quotient is not a tree")]
    CycleDetected(usize),
    #[error("edge {0} has no embedded endpoint in the preceding edges")]
    OrderingViolation(usize),
    #[error("offset {offset} outside [0, {lambda}] on edge {edge}")]
    OffsetOutOfRange { edge: usize, offset: f64, lambda: f64 },
    #[error("delta {delta} exceeds lambda/4 = {limit}")]
    DeltaTooLarge { delta: f64, limit: f64 },
    #[error("could not reach sup error {target} (best {achieved}) after {retries} retries")]
    CannotMeetTolerance { target: f64, achieved: f64, retries: usize },
    #[error("samples {a} and {b} violate the Lipschitz bound {lipschitz}")]
    SamplesNotLipschitz { a: usize, b: usize, lipschitz: f64 },
    #[error("rank hypothesis violated at a fraction {fraction} of tested nodes")]
    HypothesisViolated { fraction: f64 },
    #[error("quotient is not a metric tree (four-point defect {defect})")]
    NotATree { defect: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code reported by the command-line tool.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::HypothesisViolated { .. } => 2,
            Error::NotATree { .. } => 3,
            Error::CannotMeetTolerance { .. } => 4,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
