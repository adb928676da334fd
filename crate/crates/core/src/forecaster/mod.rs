//! Encoder-decoder LSTM day-ahead forecaster with a Gaussian output head.
//!
//! Inputs are min/max scaled with parameters fitted on the training split.
//! Each forecast step is a Gaussian `(mu, sigma^2)`; training minimizes the
//! mean Gaussian negative log likelihood with Adam on minibatches that are
//! split into fixed-size shards (see [`crate::exec`]).

mod loss;
mod model_io;
mod network;
mod predict;
mod scaler;
mod train;
mod windows;

use serde::{Deserialize, Serialize};

pub use loss::{gnll_loss, GNLL_CONSTANT};
pub use model_io::{decode_model, encode_model, MODEL_FORMAT_VERSION};
pub use network::{NetDims, Network, Params, ShardMasks, PARAM_NAMES};
pub use predict::{
    check_scale, predict_batch, predict_contexts, predict_day_ahead, prediction_interval, z_score,
    ForecastRecord, ForecastStep, ScaleWarning,
};
pub use scaler::{fit_scaler, ScalerParams};
pub use train::{
    evaluate_gnll, fine_tune, fine_tune_options, train, train_with, EpochHook, EpochRecord,
    Provenance, TrainOptions, TrainedModel, TrainingLog,
};
pub use windows::{
    calendar_features, decoder_feature_count, encoder_feature_names, make_windows, FeatureFrame,
    ForecastContext, SplitSpec, WindowSample, WindowSet, CALENDAR_FEATURES, LOAD_FEATURE,
};

use crate::autodiff::AutodiffError;
use crate::datastore::DataError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ForecastError {
    #[error("empty input")]
    EmptyData,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("variance {value} below floor {floor} at index {index}")]
    Variance {
        index: usize,
        value: f64,
        floor: f64,
    },
    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("shape: {0}")]
    Shape(String),
    #[error("invalid hyperparameters: {0}")]
    Config(String),
    #[error("interval level {0} outside (0, 1)")]
    Level(f64),
    #[error("model file: {0}")]
    Format(String),
    #[error("model file version {found} is newer than supported version {supported}")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, ForecastError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub history_horizon: usize,
    pub forecast_horizon: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub fc_hidden: usize,
    pub fc_dropout: f64,
    pub lstm_dropout: f64,
    pub leaky_relu_alpha: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub early_stop_patience: usize,
    /// Lower bound on the predicted variance, in scaled units.
    pub variance_floor: f64,
    pub stride_hours: usize,
    /// Feed observed weather over the horizon to the decoder, as if a perfect
    /// weather forecast were available.
    pub known_future_weather: bool,
    pub utc_offset_minutes: i32,
    pub grad_clip_norm: f64,
    /// Samples per gradient shard. Fixed so results do not depend on the
    /// number of threads.
    pub shard_size: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            history_horizon: 168,
            forecast_horizon: 24,
            lstm_hidden: 64,
            lstm_layers: 1,
            fc_hidden: 32,
            fc_dropout: 0.4,
            lstm_dropout: 0.3,
            leaky_relu_alpha: 0.1,
            max_epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            early_stop_patience: 8,
            variance_floor: 1e-6,
            stride_hours: 24,
            known_future_weather: true,
            utc_offset_minutes: 0,
            grad_clip_norm: 5.0,
            shard_size: 8,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ForecastError::Config(m));
        if self.history_horizon == 0 || self.forecast_horizon == 0 {
            return bad("horizons must be positive".into());
        }
        for (name, p) in [
            ("fc_dropout", self.fc_dropout),
            ("lstm_dropout", self.lstm_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.lstm_layers != 1 {
            return bad("only a single LSTM layer is supported".into());
        }
        if self.lstm_hidden == 0
            || self.fc_hidden == 0
            || self.batch_size == 0
            || self.shard_size == 0
        {
            return bad("layer widths and batch sizes must be positive".into());
        }
        if self.variance_floor.is_nan() || self.variance_floor <= 0.0 {
            return bad("variance_floor must be positive".into());
        }
        if self.stride_hours == 0 {
            return bad("stride_hours must be positive".into());
        }
        if self.grad_clip_norm.is_nan() || self.grad_clip_norm <= 0.0 {
            return bad("grad_clip_norm must be positive".into());
        }
        Ok(())
    }

    pub fn dims(&self, enc_features: usize, dec_features: usize) -> NetDims {
        NetDims {
            enc_features,
            dec_features,
            hidden: self.lstm_hidden,
            fc_hidden: self.fc_hidden,
            history: self.history_horizon,
            horizon: self.forecast_horizon,
            leaky_alpha: self.leaky_relu_alpha,
            lstm_dropout: self.lstm_dropout,
            fc_dropout: self.fc_dropout,
            variance_floor: self.variance_floor,
        }
    }
}
