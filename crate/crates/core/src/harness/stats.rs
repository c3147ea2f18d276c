//! Binomial summaries for success rates.

use serde::{Deserialize, Serialize};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.96;

/// Wilson score interval for `successes` out of `trials`. Returns (0, 1)
/// when there are no trials.
pub fn wilson_interval(successes: usize, trials: usize, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub trials: usize,
    pub successes: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl RateSummary {
    pub fn new(successes: usize, trials: usize) -> Self {
        let (ci_low, ci_high) = wilson_interval(successes, trials, Z_95);
        RateSummary {
            trials,
            successes,
            rate: if trials == 0 { 0.0 } else { successes as f64 / trials as f64 },
            ci_low,
            ci_high,
        }
    }

    pub fn from_bools(xs: impl IntoIterator<Item = bool>) -> Self {
        let (k, n) = xs.into_iter().fold((0, 0), |(k, n), b| (k + b as usize, n + 1));
        RateSummary::new(k, n)
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matches_tabulated_wilson_intervals() {
        // Newcombe (1998), score method without continuity correction
        let table = [
            (81, 263, 0.2553, 0.3662),
            (15, 148, 0.0624, 0.1605),
            (0, 20, 0.0, 0.1611),
            (1, 29, 0.0061, 0.1718),
        ];
        for (k, n, lo, hi) in table {
            let (a, b) = wilson_interval(k, n, Z_95);
            assert!((a - lo).abs() < 6e-5, "{k}/{n}: {a}");
            assert!((b - hi).abs() < 6e-5, "{k}/{n}: {b}");
        }
    }

    #[test]
    fn rate_is_mean_of_booleans() {
        let s = RateSummary::from_bools([true, false, true, true]);
        assert_eq!((s.successes, s.trials), (3, 4));
        assert_eq!(s.rate, 0.75);
    }

    proptest! {
        #[test]
        fn interval_contains_estimate(n in 1usize..2000, frac in 0.0f64..=1.0) {
            let k = ((n as f64) * frac).round() as usize;
            let (lo, hi) = wilson_interval(k, n, Z_95);
            let p = k as f64 / n as f64;
            prop_assert!(0.0 <= lo && lo <= p + 1e-12 && p <= hi + 1e-12 && hi <= 1.0);
        }
    }
}
