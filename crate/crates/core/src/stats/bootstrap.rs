use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const N_RESAMPLES: usize = 10_000;
/// Two-sided coverage of the reported interval.
pub const CONFIDENCE: f64 = 0.90;

const CHUNK: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    /// Mean of the resample means.
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_resamples: usize,
}

impl BootstrapSummary {
    pub fn contains(&self, x: f64) -> bool {
        self.ci_low <= x && x <= self.ci_high
    }
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Means of `n_resamples` with-replacement resamples of `values`. The
/// stream for chunk `k` comes from `derive(seed, "bootstrap", k)`, so the
/// result does not depend on thread scheduling.
pub fn resample_means(values: &[f64], n_resamples: usize, seed: u64) -> Vec<f64> {
    let n = values.len();
    let chunks: Vec<usize> = (0..n_resamples.div_ceil(CHUNK)).collect();
    chunks
        .par_iter()
        .flat_map_iter(|&k| {
            let mut rng = seed::rng(seed, "bootstrap", k as u64);
            let count = CHUNK.min(n_resamples - k * CHUNK);
            (0..count)
                .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Percentile bootstrap of the mean.
pub fn bootstrap_mean(values: &[f64], n_resamples: usize, seed: u64) -> Result<BootstrapSummary> {
    if values.is_empty() || n_resamples == 0 {
        return Err(Error::InvalidConfig("bootstrap needs values and at least one resample".into()));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig(format!("bootstrap input {v} is not finite")));
    }
    if values.iter().all(|&v| v == values[0]) {
        let v = values[0];
        return Ok(BootstrapSummary { mean: v, ci_low: v, ci_high: v, n_resamples });
    }
    let mut means = resample_means(values, n_resamples, seed);
    let mean = means.iter().sum::<f64>() / means.len() as f64;
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - CONFIDENCE) / 2.0;
    let (ci_low, ci_high) = (quantile(&means, tail), quantile(&means, 1.0 - tail));
    Ok(BootstrapSummary { mean: mean.clamp(ci_low, ci_high), ci_low, ci_high, n_resamples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_has_zero_width() {
        let s = bootstrap_mean(&[0.3; 6], N_RESAMPLES, 1).unwrap();
        assert_eq!((s.mean, s.ci_low, s.ci_high), (0.3, 0.3, 0.3));
    }

    #[test]
    fn two_writer_resample_space() {
        // Exhaustive resamples of {0.2, 0.4} have means {0.2, 0.3, 0.3, 0.4}.
        let s = bootstrap_mean(&[0.2, 0.4], 40_000, 9).unwrap();
        assert!((s.mean - 0.3).abs() < 0.01);
        assert_eq!((s.ci_low, s.ci_high), (0.2, 0.4));
    }

    #[test]
    fn seeded_result_is_stable() {
        let v = [0.1, 0.5, 0.2, 0.9];
        assert_eq!(bootstrap_mean(&v, 2000, 4).unwrap(), bootstrap_mean(&v, 2000, 4).unwrap());
    }
}
