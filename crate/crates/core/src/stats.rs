//! Sample statistics and least-squares fits used by the experiments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance.
pub fn variance(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64
}

/// Standard error of the mean.
pub fn stderr(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    (variance(x) / x.len() as f64).sqrt()
}

/// Sample skewness and excess kurtosis with their large-sample standard
/// errors `√(6/n)` and `√(24/n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeMoments {
    pub skewness: f64,
    pub skewness_se: f64,
    pub excess_kurtosis: f64,
    pub kurtosis_se: f64,
}

pub fn shape_moments(x: &[f64]) -> Result<ShapeMoments> {
    let n = x.len();
    if n < 4 {
        return Err(Error::InsufficientData(format!("need at least 4 samples, got {n}")));
    }
    let m = mean(x);
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in x {
        let d = v - m;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let nf = n as f64;
    m2 /= nf;
    m3 /= nf;
    m4 /= nf;
    Ok(ShapeMoments {
        skewness: m3 / m2.powf(1.5),
        skewness_se: (6.0 / nf).sqrt(),
        excess_kurtosis: m4 / (m2 * m2) - 3.0,
        kurtosis_se: (24.0 / nf).sqrt(),
    })
}

/// Straight-line fit `y = intercept + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub r_squared: f64,
    pub n: usize,
}

/// Weighted least squares with weights `w` (typically inverse variances).
pub fn weighted_line_fit(x: &[f64], y: &[f64], w: &[f64]) -> Result<LineFit> {
    let n = x.len();
    if y.len() != n || w.len() != n {
        return Err(Error::Dimension("fit inputs have different lengths".into()));
    }
    if n < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 points for a line, got {n}")));
    }
    if w.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::Argument("fit weights must be positive and finite".into()));
    }
    let sw: f64 = w.iter().sum();
    let xm = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let ym = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for i in 0..n {
        let dx = x[i] - xm;
        let dy = y[i] - ym;
        sxx += w[i] * dx * dx;
        sxy += w[i] * dx * dy;
        syy += w[i] * dy * dy;
    }
    if sxx <= 0.0 {
        return Err(Error::InsufficientData("abscissae are all equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let sse: f64 = (0..n).map(|i| w[i] * (y[i] - intercept - slope * x[i]).powi(2)).sum();
    let r_squared = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let slope_se = if n > 2 {
        (sse / (n - 2) as f64 / sxx).sqrt()
    } else {
        0.0
    };
    Ok(LineFit {
        slope,
        intercept,
        slope_se,
        r_squared,
        n,
    })
}

pub fn line_fit(x: &[f64], y: &[f64]) -> Result<LineFit> {
    weighted_line_fit(x, y, &vec![1.0; x.len()])
}

/// `[p − z·se, p + z·se]` intervals intersect.
pub fn intervals_overlap(a: f64, se_a: f64, b: f64, se_b: f64, z: f64) -> bool {
    (a - b).abs() <= z * (se_a + se_b)
}

/// `|a − b| ≤ z·√(se_a² + se_b²)`.
pub fn within_joint(a: f64, se_a: f64, b: f64, se_b: f64, z: f64) -> bool {
    (a - b).abs() <= z * (se_a * se_a + se_b * se_b).sqrt()
}
