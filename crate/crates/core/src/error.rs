use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{parameter} = {value} is outside its domain: {constraint}")]
    Domain {
        parameter: &'static str,
        value: f64,
        constraint: &'static str,
    },

    #[error("invalid spectrum: {0}")]
    Spectrum(String),

    #[error("aliasing: {grid} grid points cannot resolve {modes} modes (need at least {})", 2 * .modes)]
    Aliasing { grid: usize, modes: usize },

    #[error("trajectory diverged (non-finite state) at step {step}")]
    Divergence { step: usize },

    #[error("centering condition violated: measured bias {bias:.3e} with standard error {stderr:.3e}")]
    Centering { bias: f64, stderr: f64 },

    #[error("integrand envelope does not decay; cannot choose a truncation horizon")]
    Horizon,

    #[error("ill-conditioned covariance estimate: clipped mass {clipped:.3e} exceeds 20% of trace {trace:.3e}")]
    IllConditioned { clipped: f64, trace: f64 },

    #[error("memory guard: {requested} stored values exceed the budget of {budget}")]
    MemoryBudget { requested: usize, budget: usize },

    #[error("state norm {norm:.3e} is outside the validated range")]
    Range { norm: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{quarantined} of {paths} paths produced non-finite values")]
    Quarantine { quarantined: usize, paths: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension {
            context,
            expected,
            got,
        });
    }
    Ok(())
}

pub(crate) fn check_positive(parameter: &'static str, value: f64) -> Result<()> {
    if !(value > 0.0) || !value.is_finite() {
        return Err(Error::Domain {
            parameter,
            value,
            constraint: "must be finite and > 0",
        });
    }
    Ok(())
}
