//! Power-law rate fitting on log-log axes.

use serde::Serialize;

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerLawFit {
    pub slope: f64,
    /// Natural-log intercept: `ln value ≈ intercept + slope · ln k`.
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

/// Least-squares fit of `ln value` against `ln k`.
pub fn fit_power_law(curve: &[(f64, f64)]) -> Result<PowerLawFit> {
    if curve.len() < 5 {
        return Err(invalid(format!("a rate fit needs at least 5 points, got {}", curve.len())));
    }
    if let Some(&(k, v)) = curve.iter().find(|&&(k, v)| !(k > 0.0 && v > 0.0 && k.is_finite() && v.is_finite())) {
        return Err(invalid(format!("rate fit needs positive finite data, got ({k}, {v})")));
    }
    let n = curve.len() as f64;
    let xs: Vec<f64> = curve.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = curve.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(invalid("rate fit needs at least two distinct k"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r_squared = if ss_tot <= f64::EPSILON * ys.len() as f64 * (1.0 + my * my) {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(PowerLawFit {
        slope,
        intercept,
        r_squared,
        points: curve.len(),
    })
}

/// Keeps points with `k ≥ from`, thinned to at most `per_decade` per decade.
pub fn log_subsample(curve: &[(f64, f64)], from: f64, per_decade: usize) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    let mut last_bin = None;
    for &(k, v) in curve.iter().filter(|p| p.0 >= from) {
        let bin = (k.log10() * per_decade as f64).floor() as i64;
        if last_bin != Some(bin) {
            out.push((k, v));
            last_bin = Some(bin);
        }
    }
    out
}

/// Median of a sample; NaN for an empty one.
pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Linear-interpolated quantile.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}
