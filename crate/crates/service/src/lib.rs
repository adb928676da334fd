//! HTTP service and CLI over the forecasting core.

pub mod cli;
pub mod clock;
pub mod engine;
pub mod error;
pub mod http;
pub mod jobs;
pub mod payload;

pub use clock::{Clock, FixedClock, SystemClock};
pub use engine::{CycleRequest, Engine, EngineOptions, Fault, Layout, TrainRequest};
pub use error::{Result, ServiceError};
pub use http::{router, serve, serve_on, AppState};
pub use jobs::{JobKind, JobState, JobStatus, Jobs};
