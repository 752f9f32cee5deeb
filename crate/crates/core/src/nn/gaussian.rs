use std::f64::consts::PI;

use crate::error::{check_len, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal Gaussian log density:
/// `-1/2 * sum_i [ln(2 pi sigma_i^2) + (a_i - mu_i)^2 / sigma_i^2]`.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> Result<f64> {
    check_len("log_std", mean.len(), log_std.len())?;
    check_len("action", mean.len(), action.len())?;
    Ok(log_prob_unchecked(mean, log_std, action))
}

#[inline]
pub(crate) fn log_prob_unchecked(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((&m, &ls), &a) in mean.iter().zip(log_std).zip(action) {
        let z = (a - m) * (-ls).exp();
        acc += LN_2PI + 2.0 * ls + z * z;
    }
    -0.5 * acc
}

/// Standard normal density, for integration checks.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}
