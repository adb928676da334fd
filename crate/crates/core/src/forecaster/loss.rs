use super::{ForecastError, Result};

/// `ln(2 pi) / 2`
pub const GNLL_CONSTANT: f64 = 0.918_938_533_204_672_7;

/// Mean Gaussian negative log likelihood:
/// `(1/T) sum_t [ ln(2 pi sigma_t^2) / 2 + (y_t - mu_t)^2 / (2 sigma_t^2) ]`.
pub fn gnll_loss(mu: &[f64], sigma2: &[f64], y: &[f64], variance_floor: f64) -> Result<f64> {
    if mu.is_empty() {
        return Err(ForecastError::EmptyData);
    }
    if mu.len() != sigma2.len() || mu.len() != y.len() {
        return Err(ForecastError::Shape(format!(
            "lengths {} / {} / {}",
            mu.len(),
            sigma2.len(),
            y.len()
        )));
    }
    let mut total = 0.0;
    for (i, ((&m, &v), &obs)) in mu.iter().zip(sigma2).zip(y).enumerate() {
        if !(v >= variance_floor && v > 0.0) {
            return Err(ForecastError::Variance {
                index: i,
                value: v,
                floor: variance_floor,
            });
        }
        let r = obs - m;
        total += 0.5 * (2.0 * std::f64::consts::PI * v).ln() + r * r / (2.0 * v);
    }
    Ok(total / mu.len() as f64)
}
