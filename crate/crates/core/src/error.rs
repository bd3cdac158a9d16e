use thiserror::Error;

/// Errors raised by the spectroscopy toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{what} = {value} is outside the valid range {range}")]
    Range {
        what: &'static str,
        value: f64,
        range: String,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("filters are sampled on different frequency grids")]
    GridMismatch,

    #[error("cannot calibrate amplitude: every filter has zero overlap with the spectrum")]
    CalibrationImpossible,

    #[error("degenerate filter basis: no eigenvalue above the retention threshold")]
    DegenerateBasis,

    #[error("ill-conditioned inversion (condition number {condition:.3e})")]
    IllConditioned { condition: f64 },

    #[error("fidelity undefined: {0} has zero norm on the evaluation points")]
    UndefinedFidelity(&'static str),

    #[error("time-domain oracle requires an analytic (Lorentzian) spectrum")]
    UnsupportedOracle,

    #[error("Fisher operator is empty: every probability is degenerate")]
    EmptyOperator,

    #[error("objective undefined: filter vanishes on [0, cutoff]")]
    UndefinedObjective,

    #[error("degenerate components: the 2x2 coefficient system is singular")]
    DegenerateComponents,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("{module}: {inner}")]
    Stage {
        module: &'static str,
        inner: Box<Error>,
    },
}

impl Error {
    /// Tags the error with the pipeline stage that raised it.
    pub fn in_module(self, module: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                module,
                inner: Box::new(e),
            },
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_range(what: &'static str, value: f64, ok: bool, range: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Range {
            what,
            value,
            range: range.to_string(),
        })
    }
}
