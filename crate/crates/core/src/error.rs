use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    Grid(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid interval [{0}, {1}]")]
    Interval(f64, f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("step size underflow at t = {t} ({method}); the problem is too stiff for this method")]
    Stiffness { t: f64, method: &'static str },
    #[error("step budget of {0} steps exhausted")]
    Budget(usize),
    #[error("singular linear solve in implicit step at t = {0}")]
    SingularStep(f64),
    #[error("{0} needs the affine structure of the right-hand side")]
    NotAffine(&'static str),
    #[error("matrix {name} is not symmetric at t = {t} (relative asymmetry {asymmetry:e})")]
    NotSymmetric { name: &'static str, t: f64, asymmetry: f64 },
    #[error("not controllable: {0}")]
    NotControllable(String),
    #[error("Riccati breakdown at t = {t}: min eigenvalue {min_eig:e}")]
    RiccatiBreakdown { t: f64, min_eig: f64 },
    #[error("invalid partition: {0}")]
    Partition(String),
    #[error("singular KKT system (pivot {0})")]
    SingularKkt(usize),
    #[error("undefined rate: {0}")]
    UndefinedRate(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
