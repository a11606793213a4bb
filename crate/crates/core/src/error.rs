use thiserror::Error;

/// A single field-level validation failure in a configuration document.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl FieldError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for FieldError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("step size {dt:e} s exceeds the stability bound {dt_max:e} s")]
    StepTooLarge { dt: f64, dt_max: f64 },

    #[error("bath grid spacing {dt:e} s is coarser than tau_c/10 = {limit:e} s")]
    BathGridTooCoarse { dt: f64, limit: f64 },

    #[error(
        "motional-narrowing estimate unreliable: delta_rms*tau_c = {product:.3} >= 1 (estimate {estimate:e} s)"
    )]
    RegimeViolation { product: f64, estimate: f64 },

    #[error("pulses not brief: pi pulse {pulse:e} s must be <= {limit:e} s")]
    PulsesNotBrief { pulse: f64, limit: f64 },

    #[error("invalid sequence: {0}")]
    Sequence(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("empty ensemble: n_ions must be >= 1")]
    EmptyEnsemble,

    #[error(
        "resource limit: estimated {estimated:.3e} integration steps exceeds the limit of {limit:.3e}"
    )]
    ResourceLimit { estimated: f64, limit: f64 },

    #[error("readout window [{start:e}, {end:e}] s holds {samples} samples, need at least {needed}")]
    ShortWindow {
        start: f64,
        end: f64,
        samples: usize,
        needed: usize,
    },

    #[error("fit needs at least 3 points, got {0}")]
    TooFewPoints(usize),

    #[error("amplitudes have mixed signs after outlier screening")]
    SignMixed,

    #[error("amplitudes do not decay (fitted rate {rate:e} 1/s)")]
    NotDecaying { rate: f64 },

    #[error("fit did not converge: {0}")]
    NoConvergence(String),

    #[error("spin cluster with {n} nuclei exceeds the cap of {max}")]
    DimensionCap { n: usize, max: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("configuration invalid:\n{}", .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Config(Vec<FieldError>),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Input or schema problems, as opposed to numerical failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_)
                | Error::InvalidArgument(_)
                | Error::Sequence(_)
                | Error::PulsesNotBrief { .. }
                | Error::BathGridTooCoarse { .. }
                | Error::EmptyEnsemble
                | Error::DimensionCap { .. }
                | Error::DimensionMismatch(_)
                | Error::Config(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_finite(x: f64, what: &'static str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite(what))
    }
}
