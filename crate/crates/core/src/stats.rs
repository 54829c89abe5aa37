//! Small numerical helpers shared by the estimators.

use serde::{Deserialize, Serialize};

/// Neumaier compensated summation.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut acc = CompensatedSum::new();
    for x in xs {
        acc.add(x);
    }
    acc.value()
}

/// Monte Carlo estimate of a mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self { mean: f64::NAN, se: f64::NAN, count: 0 };
        }
        let mean = compensated_sum(xs.iter().copied()) / n as f64;
        let se = if n > 1 {
            let ss = compensated_sum(xs.iter().map(|x| (x - mean) * (x - mean)));
            (ss / (n - 1) as f64 / n as f64).sqrt()
        } else {
            f64::INFINITY
        };
        Self { mean, se, count: n }
    }

    /// Number of standard errors separating the estimate from `target`.
    pub fn z_score(&self, target: f64) -> f64 {
        if self.se == 0.0 {
            if self.mean == target {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.mean - target) / self.se
        }
    }

    pub fn within(&self, target: f64, n_se: f64) -> bool {
        self.z_score(target).abs() <= n_se
    }

    /// Two-sample comparison with independent standard errors.
    pub fn agrees_with(&self, other: &Estimate, n_se: f64) -> bool {
        (self.mean - other.mean).abs() <= n_se * self.se.hypot(other.se)
    }
}

/// Weighted least squares fit `y = a + b x`; returns (a, b, se_a, se_b).
pub fn weighted_linear_fit(x: &[f64], y: &[f64], w: &[f64]) -> (f64, f64, f64, f64) {
    let sw: f64 = w.iter().sum();
    let sx: f64 = x.iter().zip(w).map(|(x, w)| w * x).sum();
    let sy: f64 = y.iter().zip(w).map(|(y, w)| w * y).sum();
    let sxx: f64 = x.iter().zip(w).map(|(x, w)| w * x * x).sum();
    let sxy: f64 = x.iter().zip(y).zip(w).map(|((x, y), w)| w * x * y).sum();
    let det = sw * sxx - sx * sx;
    let b = (sw * sxy - sx * sy) / det;
    let a = (sy - b * sx) / sw;
    (a, b, (sxx / det).sqrt(), (sw / det).sqrt())
}

/// Effective sample size of a set of nonnegative weights.
pub fn effective_sample_size(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|x| x * x).sum();
    if s2 == 0.0 {
        0.0
    } else {
        s * s / s2
    }
}
