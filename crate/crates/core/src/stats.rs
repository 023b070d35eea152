//! Streaming moments for vector-valued samples.

use serde::{Deserialize, Serialize};

/// Welford accumulator of per-component mean and variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn push(&mut self, sample: &[f64]) {
        assert_eq!(sample.len(), self.mean.len(), "sample dimension");
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(sample) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }

    /// Combines two accumulators as if their samples had been pushed into one.
    pub fn merge(&mut self, other: &Moments) {
        assert_eq!(self.mean.len(), other.mean.len(), "sample dimension");
        if other.count == 0 {
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for k in 0..self.mean.len() {
            let delta = other.mean[k] - self.mean[k];
            self.mean[k] += delta * nb / n;
            self.m2[k] += other.m2[k] + delta * delta * na * nb / n;
        }
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unbiased per-component variances.
    pub fn variance(&self) -> Vec<f64> {
        let denom = (self.count.max(2) - 1) as f64;
        self.m2.iter().map(|s| s / denom).collect()
    }

    /// Sum of the per-component variances.
    pub fn trace_cov(&self) -> f64 {
        self.variance().iter().sum()
    }

    /// Standard errors of the per-component means.
    pub fn std_errors(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.variance().iter().map(|v| (v / n).sqrt()).collect()
    }
}

/// Upper 1% point of the standard normal, for one-sided 99% tests.
pub const Z_99_ONE_SIDED: f64 = 2.326_347_874_040_841;

/// Whether `mean` lies within `k` standard errors of `target` in every
/// component. A component with zero standard error must match to `1e-12`.
pub fn within_std_errors(mean: &[f64], target: &[f64], std_errors: &[f64], k: f64) -> bool {
    mean.iter()
        .zip(target)
        .zip(std_errors)
        .all(|((m, t), se)| (m - t).abs() <= k * se + 1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matches_two_pass_formulas() {
        let data = [[1.0, 2.0], [3.0, -1.0], [0.5, 0.5], [2.0, 4.0]];
        let mut m = Moments::new(2);
        for d in &data {
            m.push(d);
        }
        // Oracle: textbook two-pass mean and variance.
        for k in 0..2 {
            let mean = data.iter().map(|d| d[k]).sum::<f64>() / 4.0;
            let var = data.iter().map(|d| (d[k] - mean).powi(2)).sum::<f64>() / 3.0;
            assert!((m.mean()[k] - mean).abs() < 1e-14);
            assert!((m.variance()[k] - var).abs() < 1e-14);
        }
    }

    #[test]
    fn constant_samples_have_zero_trace() {
        let mut m = Moments::new(3);
        for _ in 0..10 {
            m.push(&[1.5, -2.0, 0.25]);
        }
        assert_eq!(m.trace_cov(), 0.0);
        assert!(m.std_errors().iter().all(|&s| s == 0.0));
    }

    proptest! {
        #[test]
        fn merge_equals_sequential(
            a in proptest::collection::vec(-10.0f64..10.0, 1..40),
            b in proptest::collection::vec(-10.0f64..10.0, 1..40),
        ) {
            let mut whole = Moments::new(1);
            let mut left = Moments::new(1);
            let mut right = Moments::new(1);
            for v in &a { whole.push(&[*v]); left.push(&[*v]); }
            for v in &b { whole.push(&[*v]); right.push(&[*v]); }
            left.merge(&right);
            prop_assert_eq!(left.count(), whole.count());
            prop_assert!((left.mean()[0] - whole.mean()[0]).abs() < 1e-9);
            prop_assert!((left.variance()[0] - whole.variance()[0]).abs() < 1e-8);
        }
    }
}
