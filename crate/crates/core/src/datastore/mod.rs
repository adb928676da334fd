//! Time-indexed repository for load and weather series.
//!
//! The [`Store`] keeps every series in memory behind a read/write lock and
//! mirrors each mutation to a directory on disk, so a reopened store sees
//! the same data. Readers get cloned snapshots; there is one writer at a
//! time.

mod bundle;
mod ingest;
mod series;
mod store;
mod synthetic;

use chrono::{DateTime, Utc};

pub use bundle::{Covariate, DatasetBundle, RareEvent};
pub use ingest::{parse_csv, write_csv, ColumnMapping, CsvSchema, IngestReport};
pub use series::TimeSeries;
pub use store::Store;
pub use synthetic::{generate_synthetic, SyntheticConfig, COMFORT_TEMPERATURE};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("duplicate timestamp {0}")]
    DuplicateTimestamp(DateTime<Utc>),
    #[error("gap from {from} to {to} exceeds the interpolation limit")]
    GapTooLarge {
        from: DateTime<Utc>,
        to: DateTime<Utc>,
    },
    #[error("series '{0}' not found")]
    NotFound(String),
    #[error("alignment: {0}")]
    Alignment(String),
    #[error(
        "conflicting value for {series_id} at {timestamp}: stored {stored}, incoming {incoming}"
    )]
    Conflict {
        series_id: String,
        timestamp: DateTime<Utc>,
        stored: f64,
        incoming: f64,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("schema: {0}")]
    Schema(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("csv: {0}")]
    Csv(String),
    #[error("io: {0}")]
    Io(String),
    #[error("no data rows")]
    Empty,
    #[error("non-finite value in {series_id} at index {index}")]
    NonFinite { series_id: String, index: usize },
    #[error("invalid series id '{0}'")]
    InvalidId(String),
    #[error("bundle: {0}")]
    Bundle(String),
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, DataError>;
