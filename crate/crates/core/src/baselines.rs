//! Reference forecasters: seasonal-naive and autoregressive models fitted by
//! conditional least squares (optionally on first differences).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BaselineError {
    #[error("insufficient data: need {need} points, have {have}")]
    InsufficientData { need: usize, have: usize },
    #[error("regressor matrix is singular (condition number {condition:e})")]
    Singular { condition: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
}

pub type Result<T> = std::result::Result<T, BaselineError>;

/// Reciprocal condition number below which the regressors are treated as
/// collinear.
const RCOND: f64 = 1e-10;

pub const WEEK_HOURS: usize = 168;

/// `forecast(t) = history(t - season)`, repeating the last season for
/// horizons longer than one season.
pub fn seasonal_naive(history: &[f64], season: usize, horizon: usize) -> Result<Vec<f64>> {
    if season == 0 {
        return Err(BaselineError::Config("season must be positive".into()));
    }
    if history.len() < season {
        return Err(BaselineError::InsufficientData {
            need: season,
            have: history.len(),
        });
    }
    let tail = &history[history.len() - season..];
    Ok((0..horizon).map(|k| tail[k % season]).collect())
}

/// Standard deviation of the seasonal difference `y_t - y_{t-season}` over
/// `history`, the one-season-ahead error scale of [`seasonal_naive`].
pub fn seasonal_naive_sigma(history: &[f64], season: usize) -> Result<f64> {
    if history.len() < season + 2 {
        return Err(BaselineError::InsufficientData {
            need: season + 2,
            have: history.len(),
        });
    }
    let d: Vec<f64> = (season..history.len())
        .map(|t| history[t] - history[t - season])
        .collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (d.len() - 1) as f64;
    Ok(var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ARModel {
    pub p: usize,
    /// Seasonal lag, 0 for none.
    pub seasonal_lag: usize,
    /// Differencing order, 0 or 1.
    pub d: usize,
    pub phi: Vec<f64>,
    pub seasonal_phi: Option<f64>,
    pub intercept: f64,
    /// `RSS / (n - k)` of the one-step fit, in differenced units when `d = 1`.
    pub residual_variance: f64,
}

impl ARModel {
    fn max_lag(&self) -> usize {
        self.p.max(self.seasonal_lag)
    }

    /// Lag polynomial coefficients `a_1..a_L` of the (differenced) process.
    fn lag_coefficients(&self) -> Vec<f64> {
        let mut a = vec![0.0; self.max_lag()];
        a[..self.p].copy_from_slice(&self.phi);
        if let Some(sp) = self.seasonal_phi {
            a[self.seasonal_lag - 1] += sp;
        }
        a
    }

    fn predict_one(&self, w: &[f64], t: usize) -> f64 {
        let mut y = self.intercept;
        for (i, phi) in self.phi.iter().enumerate() {
            y += phi * w[t - 1 - i];
        }
        if let Some(sp) = self.seasonal_phi {
            y += sp * w[t - self.seasonal_lag];
        }
        y
    }
}

fn difference(series: &[f64], d: usize) -> Vec<f64> {
    if d == 0 {
        series.to_vec()
    } else {
        series.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

fn check_finite(series: &[f64]) -> Result<()> {
    match series.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(BaselineError::NonFinite(i)),
        None => Ok(()),
    }
}

/// Least-squares fit of
/// `w_t = c + sum_i phi_i w_{t-i} + Phi w_{t-S} + e_t` where `w` is the
/// series differenced `d` times.
pub fn fit_ar(series: &[f64], p: usize, seasonal_lag: usize, d: usize) -> Result<ARModel> {
    if p == 0 {
        return Err(BaselineError::Config("order p must be at least 1".into()));
    }
    if d > 1 {
        return Err(BaselineError::Config(format!(
            "differencing order {d} not supported"
        )));
    }
    if seasonal_lag != 0 && seasonal_lag <= p {
        return Err(BaselineError::Config(format!(
            "seasonal lag {seasonal_lag} must exceed the order {p}"
        )));
    }
    check_finite(series)?;
    let seasonal = seasonal_lag > 0;
    let need = 10 * (p + seasonal as usize);
    if series.len() < need {
        return Err(BaselineError::InsufficientData {
            need,
            have: series.len(),
        });
    }
    let w = difference(series, d);
    let lag = p.max(seasonal_lag);
    let k = 1 + p + seasonal as usize;
    if w.len() <= lag + k {
        return Err(BaselineError::InsufficientData {
            need: lag + k + 1 + d,
            have: series.len(),
        });
    }
    let rows = w.len() - lag;
    let x = DMatrix::from_fn(rows, k, |r, c| {
        let t = r + lag;
        match c {
            0 => 1.0,
            c if c <= p => w[t - c],
            _ => w[t - seasonal_lag],
        }
    });
    let y = DVector::from_iterator(rows, w[lag..].iter().copied());

    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smax.is_nan() || smax <= 0.0 || smin / smax < RCOND {
        return Err(BaselineError::Singular {
            condition: if smin > 0.0 {
                smax / smin
            } else {
                f64::INFINITY
            },
        });
    }
    let beta = svd
        .solve(&y, smax * RCOND)
        .map_err(|e| BaselineError::Config(e.to_string()))?;
    let resid = &y - &x * &beta;
    let rss = resid.dot(&resid);
    Ok(ARModel {
        p,
        seasonal_lag,
        d,
        phi: beta.as_slice()[1..=p].to_vec(),
        seasonal_phi: seasonal.then(|| beta[p + 1]),
        intercept: beta[0],
        residual_variance: rss / (rows - k) as f64,
    })
}

/// Iterated one-step forecasts, fed back as inputs; differencing is undone
/// from the last observed value.
pub fn forecast_ar(model: &ARModel, history: &[f64], horizon: usize) -> Result<Vec<f64>> {
    forecast_ar_with_sigma(model, history, horizon).map(|(m, _)| m)
}

/// Forecast means and Gaussian standard deviations from the model's
/// moving-average representation.
pub fn forecast_ar_with_sigma(
    model: &ARModel,
    history: &[f64],
    horizon: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let need = model.max_lag() + model.d;
    if history.len() < need.max(1) {
        return Err(BaselineError::InsufficientData {
            need: need.max(1),
            have: history.len(),
        });
    }
    check_finite(history)?;
    let mut w = difference(history, model.d);
    let n = w.len();
    for _ in 0..horizon {
        let t = w.len();
        let next = model.predict_one(&w, t);
        w.push(next);
    }
    let mut mean = w[n..].to_vec();
    if model.d == 1 {
        let mut level = *history.last().expect("non-empty");
        for m in &mut mean {
            level += *m;
            *m = level;
        }
    }

    let a = model.lag_coefficients();
    let mut psi = vec![1.0];
    for j in 1..horizon {
        let v = (1..=j.min(a.len())).map(|i| a[i - 1] * psi[j - i]).sum();
        psi.push(v);
    }
    if model.d == 1 {
        for j in 1..psi.len() {
            psi[j] += psi[j - 1];
        }
    }
    let mut acc = 0.0;
    let sigma = psi
        .iter()
        .map(|p| {
            acc += p * p;
            (model.residual_variance * acc).sqrt()
        })
        .collect();
    Ok((mean, sigma))
}
