//! Deterministic synthetic load and weather.
//!
//! Load follows a daily sinusoid (damped on weekends), a U-shaped response
//! to temperature around [`COMFORT_TEMPERATURE`], and Gaussian noise whose
//! spread differs between weekdays and weekends. Heat waves of 48 hours and
//! +8 degC are injected at seeded offsets and reported in the bundle.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use chrono::{DateTime, Datelike, TimeDelta, TimeZone, Timelike, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Covariate, DataError, DatasetBundle, RareEvent, Result, TimeSeries};

pub const COMFORT_TEMPERATURE: f64 = 20.0;
const HEAT_WAVE_HOURS: i64 = 48;
const HEAT_WAVE_DELTA: f64 = 8.0;
/// Daily load peak lands at 19:00.
const DAILY_PHASE: f64 = 2.0 * PI * 13.0 / 24.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_days: usize,
    pub start: DateTime<Utc>,
    pub base_load: f64,
    pub daily_amplitude: f64,
    pub weekly_weekend_factor: f64,
    /// MW per degC squared.
    pub temp_sensitivity: f64,
    pub noise_sigma_weekday: f64,
    pub noise_sigma_weekend: f64,
    pub rare_event_count: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_days: 120,
            // a Monday, 60 days before the temperature minimum, so a 120-day
            // span sees the same temperature range at both ends
            start: Utc.with_ymd_and_hms(2022, 11, 21, 0, 0, 0).unwrap(),
            base_load: 5000.0,
            daily_amplitude: 1200.0,
            weekly_weekend_factor: 0.7,
            temp_sensitivity: 6.0,
            noise_sigma_weekday: 60.0,
            noise_sigma_weekend: 240.0,
            rare_event_count: 2,
            seed: 1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        if self.n_days < 14 {
            return bad("n_days must be at least 14");
        }
        if self.base_load < 0.0 || self.daily_amplitude < 0.0 || self.temp_sensitivity < 0.0 {
            return bad("amplitudes must be non-negative");
        }
        if !(self.weekly_weekend_factor > 0.0 && self.weekly_weekend_factor <= 1.0) {
            return bad("weekly_weekend_factor must lie in (0, 1]");
        }
        if self.noise_sigma_weekday < 0.0 || self.noise_sigma_weekend < 0.0 {
            return bad("noise sigmas must be non-negative");
        }
        if self.start.timestamp() % 86_400 != 0 {
            return bad("start must be midnight UTC");
        }
        // events start on days 7..=n_days-2, at least 3 days apart
        let candidate_days = self.n_days - 8;
        if self.rare_event_count > 0 && (self.rare_event_count - 1) * 3 + 1 > candidate_days {
            return bad("too many rare events for the span");
        }
        if ![
            self.base_load,
            self.daily_amplitude,
            self.weekly_weekend_factor,
            self.temp_sensitivity,
            self.noise_sigma_weekday,
            self.noise_sigma_weekend,
        ]
        .iter()
        .all(|v| v.is_finite())
        {
            return bad("non-finite parameter");
        }
        Ok(())
    }
}

fn is_weekend(t: DateTime<Utc>) -> bool {
    t.weekday().number_from_monday() >= 6
}

/// Pure function of `config` (including its seed).
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<DatasetBundle> {
    config.validate()?;
    let n = config.n_days * 24;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let events = place_events(config, &mut rng);
    let in_event = |i: usize| {
        let t = config.start + TimeDelta::hours(i as i64);
        events.iter().any(|e| e.start <= t && t < e.end)
    };

    let mut temperature = Vec::with_capacity(n);
    let mut wind_speed = Vec::with_capacity(n);
    let mut wind_direction = Vec::with_capacity(n);
    let mut precipitation = Vec::with_capacity(n);
    let mut load = Vec::with_capacity(n);

    let (mut temp_noise, mut wind_noise) = (0.0f64, 0.0f64);
    let mut direction: f64 = rng.random_range(0.0..360.0);
    let mut rain_left = 0u32;
    let mut rain_rate = 0.0;

    for i in 0..n {
        let t = config.start + TimeDelta::hours(i as i64);
        let hour = t.hour() as f64;
        let doy = t.ordinal0() as f64;

        temp_noise = 0.9 * temp_noise + 0.45 * unit.sample(&mut rng);
        let mut temp = 16.0
            + 9.0 * (2.0 * PI * (doy - 110.0) / 365.25).sin()
            + 4.0 * (2.0 * PI * (hour - 9.0) / 24.0).sin()
            + temp_noise;
        if in_event(i) {
            temp += HEAT_WAVE_DELTA;
        }

        wind_noise = 0.95 * wind_noise + 0.6 * unit.sample(&mut rng);
        let speed = (5.0 + 1.5 * (2.0 * PI * hour / 24.0).sin() + wind_noise).abs();
        direction = (direction + 12.0 * unit.sample(&mut rng)).rem_euclid(360.0);

        if rain_left == 0 && rng.random::<f64>() < 0.015 {
            rain_left = rng.random_range(2..10);
            rain_rate = rng.random_range(0.2..4.0);
        }
        let rain = if rain_left > 0 {
            rain_left -= 1;
            rain_rate
        } else {
            0.0
        };

        let weekend = is_weekend(t);
        let mut daily = config.daily_amplitude * (2.0 * PI * hour / 24.0 - DAILY_PHASE).sin();
        if weekend {
            daily *= config.weekly_weekend_factor;
        }
        let sigma = if weekend {
            config.noise_sigma_weekend
        } else {
            config.noise_sigma_weekday
        };
        let eps = unit.sample(&mut rng);
        let value = config.base_load
            + daily
            + config.temp_sensitivity * (temp - COMFORT_TEMPERATURE).powi(2)
            + sigma * eps;

        temperature.push(temp);
        wind_speed.push(speed);
        wind_direction.push(direction);
        precipitation.push(rain);
        load.push(value);
    }

    let start = config.start;
    let mk = |c: Covariate, v: Vec<f64>| TimeSeries::hourly(c.id(), start, c.unit(), v);
    let mut covariates = BTreeMap::new();
    covariates.insert(
        Covariate::Temperature,
        mk(Covariate::Temperature, temperature)?,
    );
    covariates.insert(Covariate::WindSpeed, mk(Covariate::WindSpeed, wind_speed)?);
    covariates.insert(
        Covariate::WindDirection,
        mk(Covariate::WindDirection, wind_direction)?,
    );
    covariates.insert(
        Covariate::Precipitation,
        mk(Covariate::Precipitation, precipitation)?,
    );
    let mut bundle =
        DatasetBundle::new(TimeSeries::hourly("load", start, "MW", load)?, covariates)?;
    bundle.events = events;
    Ok(bundle)
}

/// Non-overlapping, day-aligned heat waves after the first week, at least
/// three days apart.
fn place_events(config: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Vec<RareEvent> {
    let k = config.rare_event_count;
    if k == 0 {
        return Vec::new();
    }
    // distinct sorted slots, then spread by 2 days per preceding event
    let slots = (config.n_days - 8) - 2 * (k - 1);
    let mut picks = rand::seq::index::sample(rng, slots, k).into_vec();
    picks.sort_unstable();
    picks
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let day = 7 + s + 2 * i;
            let start = config.start + TimeDelta::days(day as i64);
            RareEvent {
                start,
                end: start + TimeDelta::hours(HEAT_WAVE_HOURS),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> SyntheticConfig {
        SyntheticConfig {
            n_days: 14,
            daily_amplitude: 0.0,
            temp_sensitivity: 0.0,
            noise_sigma_weekday: 0.0,
            noise_sigma_weekend: 0.0,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn degenerate_config_is_constant() {
        let b = generate_synthetic(&quiet()).unwrap();
        assert_eq!(b.len(), 14 * 24);
        assert!(b.load.values.iter().all(|&v| v == 5000.0));
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SyntheticConfig::default();
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&SyntheticConfig { seed: 2, ..cfg }).unwrap();
        assert_ne!(a.load.values, c.load.values);
    }

    #[test]
    fn invalid_configs_rejected() {
        let short = SyntheticConfig {
            n_days: 13,
            ..SyntheticConfig::default()
        };
        assert!(matches!(
            generate_synthetic(&short),
            Err(DataError::Config(_))
        ));
        let neg = SyntheticConfig {
            noise_sigma_weekend: -1.0,
            ..SyntheticConfig::default()
        };
        assert!(generate_synthetic(&neg).is_err());
    }

    #[test]
    fn events_are_48h_heat_waves() {
        let cfg = SyntheticConfig {
            rare_event_count: 3,
            ..SyntheticConfig::default()
        };
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(b.events.len(), 3);
        for w in b.events.windows(2) {
            assert!(w[1].start - w[0].start >= TimeDelta::days(3));
        }
        for e in &b.events {
            assert_eq!(e.end - e.start, TimeDelta::hours(48));
            assert!(e.end <= b.end());
        }
    }
}
