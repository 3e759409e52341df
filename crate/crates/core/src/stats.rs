//! Summation and Monte Carlo summaries.

use serde::{Deserialize, Serialize};

/// Pairwise summation; error grows like log n instead of n.
pub fn pairwise_sum(x: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if x.len() <= BLOCK {
        return x.iter().sum();
    }
    let (a, b) = x.split_at(x.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(x: &[f64]) -> Self {
        let n = x.len();
        if n == 0 {
            return Self { mean: f64::NAN, se: f64::NAN, n };
        }
        let mean = pairwise_sum(x) / n as f64;
        if n == 1 {
            return Self { mean, se: f64::INFINITY, n };
        }
        let dev: Vec<f64> = x.iter().map(|v| (v - mean) * (v - mean)).collect();
        let var = pairwise_sum(&dev) / (n - 1) as f64;
        Self { mean, se: (var / n as f64).sqrt(), n }
    }

    /// |mean - target| within k standard errors.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.se
    }

    /// Number of standard errors between mean and target.
    pub fn z_score(&self, target: f64) -> f64 {
        (self.mean - target) / self.se
    }
}

/// Unbiased sample variance with a delta-method standard error.
pub fn variance_estimate(x: &[f64]) -> Estimate {
    let m = Estimate::from_samples(x).mean;
    let sq: Vec<f64> = x.iter().map(|v| (v - m) * (v - m)).collect();
    let e = Estimate::from_samples(&sq);
    let n = x.len() as f64;
    Estimate { mean: e.mean * n / (n - 1.0), se: e.se * n / (n - 1.0), n: x.len() }
}

/// Empirical quantile by linear interpolation, q ∈ [0, 1].
pub fn quantile(x: &[f64], q: f64) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pairwise_matches_exact_sum() {
        let x: Vec<f64> = (1..=1000).map(|k| k as f64).collect();
        assert_eq!(pairwise_sum(&x), 500500.0);
        let tiny = vec![0.1; 1_000_000];
        assert_relative_eq!(pairwise_sum(&tiny), 100000.0, max_relative = 1e-13);
    }

    #[test]
    fn estimates() {
        let e = Estimate::from_samples(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.mean, 2.5);
        assert_relative_eq!(e.se, (5.0f64 / 12.0).sqrt(), max_relative = 1e-14);
        assert!(e.within(2.0, 1.0));
        assert_relative_eq!(variance_estimate(&[1.0, 2.0, 3.0, 4.0]).mean, 5.0 / 3.0, max_relative = 1e-14);
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
    }
}
