use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlamError {
    #[error("covariate sample is degenerate: {0}")]
    DegenerateSample(String),
    #[error("invalid spline order {0}")]
    InvalidOrder(usize),
    #[error("basis dimension {k} is smaller than the spline order {order}")]
    InvalidBasisDimension { k: usize, order: usize },
    #[error("point {t} lies outside [{lo}, {hi}]")]
    OutOfRange { t: f64, lo: f64, hi: f64 },
    #[error("all residuals are zero")]
    AllZeroResiduals,
    #[error("no convergence: {0}")]
    NoConvergence(String),
    #[error("median absolute deviation is zero")]
    ZeroMad,
    #[error("invalid penalty hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("penalty is not differentiable at zero")]
    NonDifferentiableAtZero,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("singular design: {0}")]
    SingularDesign(String),
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("log argument is not positive")]
    NonPositiveLogArgument,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("data error: {0}")]
    Data(String),
}

impl PlamError {
    /// True for failures that come from the numerics rather than from the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            PlamError::NoConvergence(_)
                | PlamError::SingularDesign(_)
                | PlamError::SingularSystem(_)
                | PlamError::AllZeroResiduals
                | PlamError::NonPositiveLogArgument
        )
    }
}

pub type Result<T> = std::result::Result<T, PlamError>;
