use std::fmt;

use thiserror::Error;

/// Why a Riccati system was declared infeasible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InfeasibleReason {
    /// The trajectory diverged or produced a non-finite entry.
    Blowup,
    /// A kernel that must stay uniformly positive (Λ, Λ̄, Θ, Θ̄) dropped below the margin.
    PositivityViolated,
}

impl fmt::Display for InfeasibleReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InfeasibleReason::Blowup => write!(f, "Riccati blow-up"),
            InfeasibleReason::PositivityViolated => write!(f, "positivity violated"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite or diverged value at s={time}")]
    NonFinite { time: f64 },

    #[error("singular block system (condition number {cond:e})")]
    SingularBlock { cond: f64 },

    #[error("infeasible: {reason} at s={time}")]
    Infeasible { reason: InfeasibleReason, time: f64 },

    #[error("Σ or Σ̄ not invertible at s={time} (condition number {cond:e})")]
    SingularSigma { time: f64, cond: f64 },

    #[error("gain coupling is singular at s={time}")]
    SingularCoupling { time: f64 },

    #[error("no feasible attenuation level up to γ={gamma_hi}")]
    NoUpperBound { gamma_hi: f64 },

    #[error("feasibility is not monotone in γ: feasible at {feasible}, infeasible at {infeasible}")]
    NonMonotone { feasible: f64, infeasible: f64 },

    #[error("unsupported policy: {0}")]
    UnsupportedPolicy(String),

    #[error("problem too large: {size} exceeds limit {limit}")]
    TooLarge { size: usize, limit: usize },

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Infeasibility is a result of the analysis, not a malfunction.
    pub fn is_infeasible(&self) -> bool {
        matches!(
            self,
            Error::Infeasible { .. }
                | Error::NonFinite { .. }
                | Error::SingularSigma { .. }
                | Error::SingularCoupling { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
