use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid support: {0}")]
    InvalidSupport(String),

    #[error("probability vector does not belong to this support")]
    SupportMismatch,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("target {target} lies too far outside [{v_min}, {v_max}] for sigma {sigma}; widen the support range")]
    TargetOutOfRange {
        target: f64,
        v_min: f64,
        v_max: f64,
        sigma: f64,
    },

    #[error("invalid atoms: {0}")]
    InvalidAtoms(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("episode has terminated; call reset before stepping")]
    EpisodeOver,

    #[error("action {action} out of range for {num_actions} actions")]
    ActionOutOfRange { action: usize, num_actions: usize },

    #[error("environment must be deterministic (sticky_prob = 0, reward noise = 0)")]
    NonDeterministicEnv,

    #[error("requested {requested} samples from a source holding {available}")]
    Underfilled { requested: usize, available: usize },

    #[error("transition has no next action; SARSA targets need the logged successor action")]
    MissingNextAction,

    #[error("dataset does not cover the action set: actions {0:?} never appear")]
    Coverage(Vec<usize>),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("degenerate strata: {0}")]
    DegenerateStrata(String),

    #[error("config parse error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("config field `{field}`: {reason}")]
    ConfigValidation { field: String, reason: String },

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("output directory {0} is not empty; pass --force to overwrite")]
    OutputExists(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}
