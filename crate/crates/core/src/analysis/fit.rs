//! Distribution and regression fits.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    Normal,
    LogNormal,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Normal => "normal",
            Family::LogNormal => "lognormal",
        }
    }
}

/// Method-of-moments fit. For the lognormal family `mu` and `sigma`
/// describe the natural log of the samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionFit {
    pub family: Family,
    pub mu: f64,
    pub sigma: f64,
    /// Kolmogorov-Smirnov distance to the fitted distribution.
    pub ks: f64,
    pub n: usize,
}

impl DistributionFit {
    /// Mean on the linear scale.
    pub fn linear_mean(&self) -> f64 {
        match self.family {
            Family::Normal => self.mu,
            Family::LogNormal => (self.mu + self.sigma * self.sigma / 2.0).exp(),
        }
    }
}

/// Sample mean and (n − 1) standard deviation.
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (m, 0.0);
    }
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

/// KS distance between the sample and N(mu, sigma²).
pub fn ks_normal(x: &[f64], mu: f64, sigma: f64) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let cdf = |v: f64| -> f64 {
        if sigma > 0.0 {
            Normal::new(mu, sigma).map(|d| d.cdf(v)).unwrap_or(f64::NAN)
        } else if v < mu {
            0.0
        } else {
            1.0
        }
    };
    s.iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

pub fn fit_distribution(samples: &[f64], family: Family) -> Result<DistributionFit> {
    if samples.len() < 2 {
        return Err(Error::param("samples", "need at least 2"));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::param("samples", "must be finite"));
    }
    let x: Vec<f64> = match family {
        Family::Normal => samples.to_vec(),
        Family::LogNormal => {
            if samples.iter().any(|&v| v <= 0.0) {
                return Err(Error::Domain("lognormal fit needs positive samples".into()));
            }
            samples.iter().map(|v| v.ln()).collect()
        }
    };
    let (mu, sigma) = mean_std(&x);
    // constant samples: the fitted law is a point mass, matched exactly
    let constant = x.iter().all(|&v| v == x[0]);
    let sigma = if constant { 0.0 } else { sigma };
    Ok(DistributionFit {
        family,
        mu,
        sigma,
        ks: if constant { 0.0 } else { ks_normal(&x, mu, sigma) },
        n: x.len(),
    })
}

/// Empirical quantiles at `rows` evenly spaced probabilities in [0, 1],
/// linearly interpolated. Returns (probability, value).
pub fn cdf_table(samples: &[f64], rows: usize) -> Vec<(f64, f64)> {
    if samples.is_empty() || rows == 0 {
        return Vec::new();
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    (0..rows)
        .map(|i| {
            let p = if rows == 1 { 1.0 } else { i as f64 / (rows - 1) as f64 };
            let h = p * (n - 1) as f64;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            (p, s[lo] + (h - lo as f64) * (s[hi] - s[lo]))
        })
        .collect()
}

/// Least-squares fit `L = A + 10 n log10(d/d0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathLossFit {
    pub intercept_db: f64,
    pub exponent: f64,
    /// Residual standard deviation (n − 2 degrees of freedom), i.e. the
    /// shadow-fading spread.
    pub sigma_db: f64,
    pub residuals: Vec<f64>,
}

pub fn fit_path_loss(distances_m: &[f64], loss_db: &[f64], d0_m: f64, cutoff_m: f64) -> Result<PathLossFit> {
    if distances_m.len() != loss_db.len() {
        return Err(Error::param("samples", "distance and loss counts differ"));
    }
    if !(d0_m > 0.0) {
        return Err(Error::param("d0", "must be > 0"));
    }
    if distances_m.iter().any(|&d| !(d >= cutoff_m) || !(d >= d0_m)) {
        return Err(Error::Domain("distance below the near-field cutoff".into()));
    }
    let x: Vec<f64> = distances_m.iter().map(|d| 10.0 * (d / d0_m).log10()).collect();
    let n = x.len() as f64;
    if x.len() < 2 {
        return Err(Error::param("samples", "need at least 2"));
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = loss_db.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if !(sxx > 1e-12 * n) {
        return Err(Error::Domain("path-loss design is degenerate: distances coincide".into()));
    }
    let sxy: f64 = x.iter().zip(loss_db).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let a = my - slope * mx;
    let residuals: Vec<f64> = x.iter().zip(loss_db).map(|(xi, yi)| yi - (a + slope * xi)).collect();
    let sigma = if x.len() > 2 {
        (residuals.iter().map(|r| r * r).sum::<f64>() / (n - 2.0)).sqrt()
    } else {
        0.0
    };
    Ok(PathLossFit {
        intercept_db: a,
        exponent: slope,
        sigma_db: sigma,
        residuals,
    })
}
