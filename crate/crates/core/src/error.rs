use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("constraint violated: {0}")]
    Constraint(String),
    #[error("C_N below admissible threshold: found {found} interior critical points")]
    BumpThreshold { found: usize },
    #[error("infeasible c4: {0}")]
    InfeasibleC4(String),
    #[error("collar too short: {0}")]
    CollarTooShort(String),
    #[error("energy budget exceeded: {piece} has {energy:.6} > {bound:.6}")]
    Budget { piece: String, energy: f64, bound: f64 },
    #[error("inner solve did not converge (last tension norm {last_tension:.3e})")]
    InnerSolve { last_tension: f64 },
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
