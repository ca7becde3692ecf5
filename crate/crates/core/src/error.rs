use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix `{name}` is not Hermitian (relative asymmetry {asymmetry:.3e})")]
    NonHermitian { name: &'static str, asymmetry: f64 },

    #[error("matrix `{name}` is not positive definite (eigenvalue {eigenvalue:.6e})")]
    NotPositiveDefinite { name: &'static str, eigenvalue: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("interpolation exponent {0} outside [0, 1]")]
    GammaOutOfRange(f64),

    #[error("coordinate kind mismatch: {0}")]
    KindMismatch(String),

    #[error("empty time grid")]
    EmptyGrid,

    #[error("grid does not resolve the requested lags: {0}")]
    InsufficientGrid(String),

    #[error("spectral parameter {re}{im:+}i lies in the closed sector of half-angle {half_angle:.6}")]
    LambdaInSector { re: f64, im: f64, half_angle: f64 },

    #[error("singular linear system (residual {residual:.3e})")]
    SingularSystem { residual: f64 },

    #[error("contour too short: tail estimate {tail:.3e} above target {target:.3e}")]
    ContourTooShort { tail: f64, target: f64 },

    #[error("form is not coercive (alpha = {alpha:.6e}); shift it first")]
    NotCoercive { alpha: f64 },

    #[error("singular time step at t = {t:.6e} (dt = {dt:.3e})")]
    SingularStep { t: f64, dt: f64 },

    #[error("Dini condition violated: fitted exponent {q:.4} <= gamma/2 = {threshold:.4}")]
    DiniViolated { q: f64, threshold: f64 },

    #[error("no certified shift: shift {mu} exceeded the limit with P_s estimate {estimate:.4}")]
    ShiftDivergence { mu: f64, estimate: f64 },

    #[error("evolution requires a certified shift with ||P_s|| < 1/4 (estimate {estimate:.4})")]
    NoCertifiedShift { estimate: f64 },

    #[error("grid too coarse: {0}")]
    GridTooCoarse(String),

    #[error("Schatten exponent p = {0} outside [1, inf)")]
    POutOfRange(f64),

    #[error("mesh too coarse: n = {0} (need n >= 4)")]
    MeshTooCoarse(usize),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error, looking through stage tags.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
