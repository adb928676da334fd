use daycast_core::active_learning::ALError;
use daycast_core::baselines::BaselineError;
use daycast_core::datastore::DataError;
use daycast_core::evaluation::EvalError;
use daycast_core::forecaster::ForecastError;
use daycast_core::metrics::MetricsError;

/// Service-level failure. Each variant has a stable machine code and an
/// HTTP status.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    Validation(String),
    #[error("no trained model yet")]
    NoModel,
    #[error("a {0} job is already running")]
    Busy(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0}")]
    DataUnavailable(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, ServiceError>;

impl ServiceError {
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::Validation(_) => "validation",
            ServiceError::NoModel => "no-model",
            ServiceError::Busy(_) => "busy",
            ServiceError::NotFound(_) => "not-found",
            ServiceError::DataUnavailable(_) => "data-unavailable",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::Internal(_) => "internal",
        }
    }

    pub fn http_status(&self) -> u16 {
        match self {
            ServiceError::Validation(_) | ServiceError::DataUnavailable(_) => 422,
            ServiceError::NoModel | ServiceError::Busy(_) | ServiceError::Conflict(_) => 409,
            ServiceError::NotFound(_) => 404,
            ServiceError::Internal(_) => 500,
        }
    }
}

impl From<DataError> for ServiceError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::NotFound(what) => ServiceError::NotFound(what),
            DataError::Conflict { .. } => ServiceError::Conflict(e.to_string()),
            DataError::Alignment(_) => ServiceError::DataUnavailable(e.to_string()),
            DataError::Io(_) => ServiceError::Internal(e.to_string()),
            _ => ServiceError::Validation(e.to_string()),
        }
    }
}

impl From<ForecastError> for ServiceError {
    fn from(e: ForecastError) -> Self {
        match e {
            ForecastError::Data(d) => d.into(),
            ForecastError::InsufficientData(_) | ForecastError::EmptyData => {
                ServiceError::DataUnavailable(e.to_string())
            }
            ForecastError::Level(_) | ForecastError::Config(_) => {
                ServiceError::Validation(e.to_string())
            }
            _ => ServiceError::Internal(e.to_string()),
        }
    }
}

impl From<MetricsError> for ServiceError {
    fn from(e: MetricsError) -> Self {
        ServiceError::Internal(e.to_string())
    }
}

impl From<BaselineError> for ServiceError {
    fn from(e: BaselineError) -> Self {
        match e {
            BaselineError::InsufficientData { .. } => ServiceError::DataUnavailable(e.to_string()),
            _ => ServiceError::Internal(e.to_string()),
        }
    }
}

impl From<EvalError> for ServiceError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::EmptySpan { .. } => ServiceError::Validation(e.to_string()),
            EvalError::Forecast(f) => f.into(),
            EvalError::Metrics(m) => m.into(),
            EvalError::Baseline(b) => b.into(),
        }
    }
}

impl From<ALError> for ServiceError {
    fn from(e: ALError) -> Self {
        match e {
            ALError::Domain(m) => ServiceError::Validation(m),
            ALError::Forecast(f) => f.into(),
            ALError::Metrics(m) => m.into(),
            ALError::Eval(v) => v.into(),
            ALError::Repository(_) | ALError::NothingToLearn => {
                ServiceError::Internal(e.to_string())
            }
        }
    }
}
