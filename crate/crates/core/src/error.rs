use thiserror::Error;

/// Errors produced by model construction, the algebraic solvers and the integrator.
#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("electrical graph is disconnected; components: {components:?}")]
    Disconnected { components: Vec<Vec<usize>> },

    #[error("communication graph is disconnected; components: {components:?}")]
    CommDisconnected { components: Vec<Vec<usize>> },

    #[error("invalid load bank: {0}")]
    InvalidLoads(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {what} has length {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        got: usize,
        expected: usize,
    },

    #[error("non-positive voltage {value} at {what} index {index}")]
    Domain {
        what: &'static str,
        index: usize,
        value: f64,
    },

    #[error("singular matrix: {0}")]
    Singular(&'static str),

    #[error("load-voltage solve failed after {iterations} iterations (residual {residual:e} A)")]
    AlgebraicSolve { iterations: usize, residual: f64 },

    #[error("equilibrium solve failed after {iterations} iterations; residual history {history:?}")]
    EquilibriumSolve {
        iterations: usize,
        history: Vec<f64>,
    },

    #[error("voltage collapse at t = {t:e} s: bus {bus} at {voltage:e} V")]
    Collapse { t: f64, bus: usize, voltage: f64 },

    #[error("infeasible load flow at t = {t:e} s: {source}")]
    Infeasible {
        t: f64,
        #[source]
        source: Box<GridError>,
    },

    #[error("step size underflow at t = {t:e} s (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },

    #[error("malformed trajectory data: {0}")]
    Trajectory(String),
}

pub type Result<T, E = GridError> = std::result::Result<T, E>;

pub(crate) fn check_len(what: &'static str, got: usize, expected: usize) -> Result<()> {
    if got == expected {
        Ok(())
    } else {
        Err(GridError::Dimension {
            what,
            got,
            expected,
        })
    }
}

pub(crate) fn check_positive(what: &'static str, v: &[f64]) -> Result<()> {
    match v.iter().position(|&x| !(x > 0.0 && x.is_finite())) {
        None => Ok(()),
        Some(index) => Err(GridError::Domain {
            what,
            index,
            value: v[index],
        }),
    }
}
