use thiserror::Error;

/// Errors raised across the design and evaluation pipeline.
#[derive(Debug, Error)]
pub enum ControlError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("eigendecomposition did not converge (matrix max-norm {norm:.6e})")]
    Eigendecomposition { norm: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(
        "under-parameterized {task} task: at least {required} independent phases are needed, \
         the waveform has {available}"
    )]
    UnderParameterized {
        task: &'static str,
        required: usize,
        available: usize,
    },

    #[error("design failed on every seed: {}", .reasons.join("; "))]
    DesignFailed { reasons: Vec<String> },

    #[error("sequence construction failed: {0}")]
    SequenceConstruction(String),

    #[error("decay fit did not converge after {iterations} iterations (residual norm {residual_norm:.6e})")]
    FitFailed {
        iterations: usize,
        residual_norm: f64,
    },

    #[error("schema error in field `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error("unsupported format version {found} (supported: {supported:?})")]
    Version { found: u32, supported: Vec<u32> },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ControlError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        ControlError::InvalidArgument(msg.into())
    }

    /// Whether the error is a validation problem (as opposed to a numerical one).
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            ControlError::Eigendecomposition { .. }
                | ControlError::Numerical(_)
                | ControlError::DesignFailed { .. }
                | ControlError::SequenceConstruction(_)
                | ControlError::FitFailed { .. }
        )
    }

    /// Stable snake-case name of the variant, for diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            ControlError::InvalidArgument(_) => "invalid_argument",
            ControlError::Eigendecomposition { .. } => "eigendecomposition",
            ControlError::Numerical(_) => "numerical",
            ControlError::UnderParameterized { .. } => "under_parameterized",
            ControlError::DesignFailed { .. } => "design_failed",
            ControlError::SequenceConstruction(_) => "sequence_construction",
            ControlError::FitFailed { .. } => "fit_failed",
            ControlError::Schema { .. } => "schema",
            ControlError::Version { .. } => "version",
            ControlError::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = ControlError> = std::result::Result<T, E>;
