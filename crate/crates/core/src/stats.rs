//! Replica summaries, normal-approximation confidence intervals and
//! least-squares rate fits.

use serde::{Deserialize, Serialize};

/// Two-sided 95% standard normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

impl Estimate {
    /// Sample mean with a 95% normal-approximation interval.
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        let nf = n as f64;
        let mean = samples.iter().sum::<f64>() / nf;
        let var = if n > 1 {
            samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (nf - 1.0)
        } else {
            f64::NAN
        };
        let std_err = (var / nf).sqrt();
        Self {
            mean,
            std_err,
            ci_low: mean - Z95 * std_err,
            ci_high: mean + Z95 * std_err,
            n,
        }
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci_low <= value && value <= self.ci_high
    }

    pub fn overlaps(&self, other: &Estimate) -> bool {
        self.ci_low <= other.ci_high && other.ci_low <= self.ci_high
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Slope of the fitted line; for exponential fits this is the decay rate (sign flipped).
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope.
    pub std_err: f64,
    pub r_squared: f64,
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FitError {
    #[error("need at least two points with distinct abscissae, got {0}")]
    TooFewPoints(usize),
    #[error("non-finite or non-positive value where a logarithm is taken")]
    NonPositive,
}

/// Ordinary least squares `y ≈ intercept + slope · x`.
pub fn fit_linear(x: &[f64], y: &[f64]) -> Result<FitResult, FitError> {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    if n < 2 {
        return Err(FitError::TooFewPoints(n));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(FitError::TooFewPoints(1));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - (intercept + slope * a)).collect();
    let ss_res: f64 = residuals.iter().map(|r| r * r).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let r_squared = if ss_tot > 0.0 {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    } else {
        1.0
    };
    let std_err = if n > 2 {
        (ss_res / (nf - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(FitResult {
        slope,
        intercept,
        std_err,
        r_squared,
        residuals,
    })
}

fn logs(v: &[f64]) -> Result<Vec<f64>, FitError> {
    v.iter()
        .map(|&a| if a > 0.0 && a.is_finite() { Ok(a.ln()) } else { Err(FitError::NonPositive) })
        .collect()
}

/// Fits `stat ≈ C · param^slope` on log-log axes.
pub fn fit_power_law(param: &[f64], stat: &[f64]) -> Result<FitResult, FitError> {
    fit_linear(&logs(param)?, &logs(stat)?)
}

/// Fits `value − plateau ≈ a · e^{−rate t}`; the returned `slope` is the rate.
pub fn fit_exponential_decay(t: &[f64], value: &[f64], plateau: f64) -> Result<FitResult, FitError> {
    let shifted: Vec<f64> = value.iter().map(|v| v - plateau).collect();
    let mut fit = fit_linear(t, &logs(&shifted)?)?;
    fit.slope = -fit.slope;
    Ok(fit)
}
