use thiserror::Error;

/// Errors raised by the simulation library.
#[derive(Debug, Error)]
pub enum CavityError {
    #[error("invalid Hilbert-space layout: {0}")]
    InvalidLayout(String),

    #[error("Hilbert-space dimension {dim} exceeds the cap of {cap}")]
    DimensionCap { dim: usize, cap: usize },

    #[error("index {index} out of range (length {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error(
        "near-field singularity{}: separation {separation:e} is below r_min = {r_min:e}",
        pair.map(|(i, j)| format!(" between atoms {i} and {j}")).unwrap_or_default()
    )]
    NearField {
        pair: Option<(usize, usize)>,
        separation: f64,
        r_min: f64,
    },

    #[error("step size underflow at t = {t}: h = {h:e} (problem too stiff for the explicit integrator)")]
    StepUnderflow { t: f64, h: f64 },

    #[error("positivity violated at t = {t}: smallest diagonal entry {min_diag:e}")]
    PositivityViolation { t: f64, min_diag: f64 },

    #[error("non-finite value in state at t = {t}")]
    NonFinite { t: f64 },

    #[error("g2(0) undefined: photon number {photons:e} is below 1e-12")]
    UndefinedCorrelation { photons: f64 },

    #[error("cannot normalise: initial cycle-averaged energy is {0:e}")]
    ZeroInitialEnergy(f64),

    #[error("delay grid is not uniform")]
    NonUniformGrid,

    #[error("steady state is not unique: null space has dimension {dim}")]
    DegenerateNullSpace { dim: usize },

    #[error("linear solve failed: {0}")]
    Singular(String),

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CavityError>;
