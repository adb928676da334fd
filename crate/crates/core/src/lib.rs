pub mod active_learning;
pub mod autodiff;
pub mod baselines;
pub mod datastore;
pub mod evaluation;
pub mod exec;
pub mod forecaster;
pub mod metrics;
