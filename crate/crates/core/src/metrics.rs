//! Point and probabilistic forecast scores.
//!
//! PICP is reported in percent with closed-interval coverage; sharpness is
//! in the unit of the bounds, carried on [`MetricsReport::unit`].

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    Shape(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("interval {index} has upper bound below lower bound")]
    InvertedInterval { index: usize },
    #[error("quantile level {0} outside (0, 1)")]
    Domain(f64),
    #[error("parse: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// `N` prediction intervals at a common nominal level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalSet {
    pub bounds: Vec<(f64, f64)>,
    pub level: f64,
}

impl IntervalSet {
    pub fn new(bounds: Vec<(f64, f64)>, level: f64) -> Result<Self> {
        if !(level > 0.0 && level < 1.0) {
            return Err(MetricsError::Domain(level));
        }
        for (i, &(l, u)) in bounds.iter().enumerate() {
            if !l.is_finite() || !u.is_finite() {
                return Err(MetricsError::NonFinite(i));
            }
            if u < l {
                return Err(MetricsError::InvertedInterval { index: i });
            }
        }
        Ok(Self { bounds, level })
    }

    pub fn len(&self) -> usize {
        self.bounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bounds.is_empty()
    }
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(MetricsError::Shape(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(i) = a
        .iter()
        .zip(b)
        .position(|(x, y)| !x.is_finite() || !y.is_finite())
    {
        return Err(MetricsError::NonFinite(i));
    }
    Ok(())
}

/// `(mse, rmse, mae)`.
pub fn point_metrics(actuals: &[f64], predictions: &[f64]) -> Result<(f64, f64, f64)> {
    check_pair(actuals, predictions)?;
    let n = actuals.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (y, p) in actuals.iter().zip(predictions) {
        let e = y - p;
        se += e * e;
        ae += e.abs();
    }
    let mse = se / n;
    Ok((mse, mse.sqrt(), ae / n))
}

/// Percentage of actuals with `L <= y <= U`.
pub fn picp(actuals: &[f64], intervals: &IntervalSet) -> Result<f64> {
    if actuals.len() != intervals.len() {
        return Err(MetricsError::Shape(actuals.len(), intervals.len()));
    }
    if actuals.is_empty() {
        return Err(MetricsError::Empty);
    }
    let covered = actuals
        .iter()
        .zip(&intervals.bounds)
        .filter(|&(&y, &(l, u))| l <= y && y <= u)
        .count();
    Ok(100.0 * covered as f64 / actuals.len() as f64)
}

/// Mean interval width.
pub fn sharpness(intervals: &IntervalSet) -> Result<f64> {
    if intervals.is_empty() {
        return Err(MetricsError::Empty);
    }
    let total: f64 = intervals.bounds.iter().map(|(l, u)| u - l).sum();
    Ok(total / intervals.len() as f64)
}

/// Mean pinball loss of quantile forecasts `q_i` at levels `tau_i`.
pub fn pinball(actuals: &[f64], quantiles: &[f64], taus: &[f64]) -> Result<f64> {
    check_pair(actuals, quantiles)?;
    if taus.len() != actuals.len() {
        return Err(MetricsError::Shape(actuals.len(), taus.len()));
    }
    let mut total = 0.0;
    for ((&y, &q), &tau) in actuals.iter().zip(quantiles).zip(taus) {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(MetricsError::Domain(tau));
        }
        total += if y >= q {
            tau * (y - q)
        } else {
            (1.0 - tau) * (q - y)
        };
    }
    Ok(total / actuals.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    pub sharpness: f64,
    /// Percent.
    pub picp: f64,
    pub pinball: Option<f64>,
    pub sample_count: usize,
    /// Unit of the errors and of sharpness, e.g. `MW` or `scaled`.
    pub unit: String,
    pub level: f64,
}

const FIELDS: [&str; 9] = [
    "mse",
    "rmse",
    "mae",
    "sharpness",
    "picp",
    "pinball",
    "sample_count",
    "unit",
    "level",
];

impl MetricsReport {
    /// Scores interval forecasts. Pinball loss is the mean over both
    /// interval bounds, taken as the `(1-level)/2` and `(1+level)/2`
    /// quantiles.
    pub fn compute(
        actuals: &[f64],
        predictions: &[f64],
        intervals: &IntervalSet,
        unit: &str,
    ) -> Result<Self> {
        let (mse, rmse, mae) = point_metrics(actuals, predictions)?;
        let picp = picp(actuals, intervals)?;
        let sharpness = sharpness(intervals)?;
        let lo_tau = (1.0 - intervals.level) / 2.0;
        let hi_tau = (1.0 + intervals.level) / 2.0;
        let lower: Vec<f64> = intervals.bounds.iter().map(|b| b.0).collect();
        let upper: Vec<f64> = intervals.bounds.iter().map(|b| b.1).collect();
        let n = actuals.len();
        let pl = pinball(actuals, &lower, &vec![lo_tau; n])?;
        let pu = pinball(actuals, &upper, &vec![hi_tau; n])?;
        Ok(Self {
            mse,
            rmse,
            mae,
            sharpness,
            picp,
            pinball: Some((pl + pu) / 2.0),
            sample_count: n,
            unit: unit.to_string(),
            level: intervals.level,
        })
    }

    fn values(&self) -> [String; 9] {
        [
            fmt_f64(self.mse),
            fmt_f64(self.rmse),
            fmt_f64(self.mae),
            fmt_f64(self.sharpness),
            fmt_f64(self.picp),
            self.pinball.map(fmt_f64).unwrap_or_default(),
            self.sample_count.to_string(),
            self.unit.clone(),
            fmt_f64(self.level),
        ]
    }

    /// `key=value` lines in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in FIELDS.iter().zip(self.values()) {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MetricsError::Parse(format!("not a key=value line: {line}")))?;
            map.insert(k.trim(), v.trim());
        }
        let get = |k: &str| {
            map.get(k)
                .copied()
                .ok_or_else(|| MetricsError::Parse(format!("missing {k}")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| MetricsError::Parse(format!("bad {k}")))
        };
        let pinball = match get("pinball")? {
            "" => None,
            s => Some(
                s.parse()
                    .map_err(|_| MetricsError::Parse("bad pinball".into()))?,
            ),
        };
        Ok(Self {
            mse: num("mse")?,
            rmse: num("rmse")?,
            mae: num("mae")?,
            sharpness: num("sharpness")?,
            picp: num("picp")?,
            pinball,
            sample_count: get("sample_count")?
                .parse()
                .map_err(|_| MetricsError::Parse("bad sample_count".into()))?,
            unit: get("unit")?.to_string(),
            level: num("level")?,
        })
    }

    pub fn csv_header() -> String {
        FIELDS.join(",")
    }

    pub fn to_csv_row(&self) -> String {
        self.values().join(",")
    }
}

/// Shortest decimal that round-trips.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iv(b: &[(f64, f64)]) -> IntervalSet {
        IntervalSet::new(b.to_vec(), 0.95).unwrap()
    }

    #[test]
    fn point_examples() {
        assert_eq!(
            point_metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap(),
            (0.0, 0.0, 0.0)
        );
        assert_eq!(
            point_metrics(&[0.0, 0.0], &[1.0, -1.0]).unwrap(),
            (1.0, 1.0, 1.0)
        );
        assert_eq!(point_metrics(&[2.0], &[5.0]).unwrap(), (9.0, 3.0, 3.0));
        assert_eq!(
            point_metrics(&[1.0], &[1.0, 2.0]),
            Err(MetricsError::Shape(1, 2))
        );
    }

    #[test]
    fn picp_examples() {
        assert_eq!(
            picp(&[1.0, 2.0], &iv(&[(0.0, 5.0), (0.0, 5.0)])).unwrap(),
            100.0
        );
        let p = picp(&[1.0, 2.0, 3.0], &iv(&[(0.0, 2.0), (0.0, 1.0), (2.0, 4.0)])).unwrap();
        assert!((p - 66.667).abs() < 1e-3);
        assert_eq!(picp(&[4.0], &iv(&[(2.0, 4.0)])).unwrap(), 100.0);
        assert!(matches!(
            picp(&[1.0], &iv(&[])),
            Err(MetricsError::Shape(1, 0))
        ));
    }

    #[test]
    fn sharpness_examples() {
        assert_eq!(sharpness(&iv(&[(0.0, 2.0), (1.0, 4.0)])).unwrap(), 2.5);
        assert_eq!(sharpness(&iv(&[(3.0, 3.0), (1.0, 1.0)])).unwrap(), 0.0);
        assert!((sharpness(&iv(&[(80.40, 119.60)])).unwrap() - 39.2).abs() < 1e-12);
    }

    #[test]
    fn pinball_examples() {
        assert_eq!(pinball(&[3.0], &[3.0], &[0.3]).unwrap(), 0.0);
        assert!((pinball(&[10.0], &[8.0], &[0.9]).unwrap() - 1.8).abs() < 1e-12);
        assert!((pinball(&[8.0], &[10.0], &[0.9]).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(
            pinball(&[1.0], &[1.0], &[1.0]),
            Err(MetricsError::Domain(1.0))
        );
    }

    #[test]
    fn inverted_interval_rejected() {
        assert_eq!(
            IntervalSet::new(vec![(1.0, 0.0)], 0.9),
            Err(MetricsError::InvertedInterval { index: 0 })
        );
    }

    #[test]
    fn report_round_trips() {
        let r = MetricsReport::compute(
            &[1.0, 2.0, 3.0],
            &[1.1, 2.0, 2.7],
            &iv(&[(0.0, 2.0), (1.0, 3.0), (2.0, 4.0)]),
            "MW",
        )
        .unwrap();
        assert!((r.rmse - r.mse.sqrt()).abs() < 1e-15);
        assert_eq!(MetricsReport::from_kv(&r.to_kv()).unwrap(), r);
        assert_eq!(
            r.to_csv_row().split(',').count(),
            MetricsReport::csv_header().split(',').count()
        );
        assert!(r.to_kv().starts_with("mse="));
    }
}
