use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

use super::bootstrap::{bootstrap_mean, BootstrapSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    /// `(baseline - cer) / baseline` per writer.
    RelativeImprovement,
    /// Relative improvement divided by a per-level reference mean.
    NormalizedImprovement,
}

/// Test CER per (level, writer, series) plus each writer's baseline CER.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultsGrid {
    pub levels: Vec<usize>,
    pub writers: Vec<u32>,
    pub n_series: usize,
    pub baseline_cer: BTreeMap<u32, f64>,
    cells: BTreeMap<(usize, u32, usize), f64>,
}

impl ResultsGrid {
    pub fn new(levels: Vec<usize>, writers: Vec<u32>, n_series: usize) -> Self {
        ResultsGrid { levels, writers, n_series, baseline_cer: BTreeMap::new(), cells: BTreeMap::new() }
    }

    pub fn set_baseline(&mut self, writer: u32, cer: f64) -> Result<()> {
        if !self.writers.contains(&writer) {
            return Err(Error::InvalidConfig(format!("writer {writer} is not in the grid")));
        }
        if !(cer >= 0.0 && cer.is_finite()) {
            return Err(Error::InvalidConfig(format!("baseline CER {cer} for writer {writer} is invalid")));
        }
        self.baseline_cer.insert(writer, cer);
        Ok(())
    }

    pub fn insert(&mut self, level: usize, writer: u32, series: usize, cer: f64) -> Result<()> {
        if !self.levels.contains(&level) || !self.writers.contains(&writer) || series >= self.n_series {
            return Err(Error::InvalidConfig(format!("cell ({level}, {writer}, {series}) is outside the grid")));
        }
        if !(cer >= 0.0 && cer.is_finite()) {
            return Err(Error::InvalidConfig(format!("CER {cer} at ({level}, {writer}, {series}) is invalid")));
        }
        self.cells.insert((level, writer, series), cer);
        Ok(())
    }

    pub fn get(&self, level: usize, writer: u32, series: usize) -> Option<f64> {
        self.cells.get(&(level, writer, series)).copied()
    }

    /// Cells without a value, in (level, writer, series) order.
    pub fn missing(&self) -> Vec<(usize, u32, usize)> {
        let mut out = Vec::new();
        for &l in &self.levels {
            for &w in &self.writers {
                for s in 0..self.n_series {
                    if !self.cells.contains_key(&(l, w, s)) {
                        out.push((l, w, s));
                    }
                }
            }
        }
        out
    }

    pub fn check_complete(&self) -> Result<()> {
        let missing = self.missing();
        if let Some(&(l, w, s)) = missing.first() {
            return Err(Error::IncompleteGrid(format!(
                "{} cells missing, first at level {l}, writer {w}, series {s}",
                missing.len()
            )));
        }
        if let Some(w) = self.writers.iter().find(|w| !self.baseline_cer.contains_key(w)) {
            return Err(Error::IncompleteGrid(format!("no baseline CER for writer {w}")));
        }
        Ok(())
    }

    /// Mean test CER over series.
    pub fn series_mean(&self, level: usize, writer: u32) -> Result<f64> {
        let vals = (0..self.n_series)
            .map(|s| self.get(level, writer, s).ok_or_else(|| Error::IncompleteGrid(format!("({level}, {writer}, {s})"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Per-writer relative improvement at `level`, series averaged first.
    pub fn relative_improvement(&self, level: usize) -> Result<Vec<f64>> {
        self.writers
            .iter()
            .map(|&w| {
                let base = self.baseline_cer[&w];
                if base == 0.0 {
                    return Err(Error::ZeroBaseline { writer: w });
                }
                Ok((base - self.series_mean(level, w)?) / base)
            })
            .collect()
    }
}

/// Per-level bootstrap over writers. Series are averaged before writers are
/// resampled.
pub fn aggregate(
    grid: &ResultsGrid,
    statistic: Statistic,
    reference_means: Option<&BTreeMap<usize, f64>>,
    n_resamples: usize,
    seed: u64,
) -> Result<BTreeMap<usize, BootstrapSummary>> {
    grid.check_complete()?;
    let mut out = BTreeMap::new();
    for &level in &grid.levels {
        let mut values = grid.relative_improvement(level)?;
        if statistic == Statistic::NormalizedImprovement {
            let r = reference_means
                .and_then(|m| m.get(&level))
                .copied()
                .ok_or_else(|| Error::InvalidConfig(format!("no reference mean for level {level}")))?;
            if r == 0.0 || !r.is_finite() {
                return Err(Error::InvalidConfig(format!("reference mean at level {level} is {r}")));
            }
            values.iter_mut().for_each(|v| *v /= r);
        }
        out.insert(level, bootstrap_mean(&values, n_resamples, seed::derive(seed, "level", level as u64))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell_relative_improvement() {
        let mut g = ResultsGrid::new(vec![64], vec![0], 1);
        g.set_baseline(0, 8.3).unwrap();
        g.insert(64, 0, 0, 2.8).unwrap();
        let rel = g.relative_improvement(64).unwrap()[0];
        assert!((rel - 0.6627).abs() < 1e-4);
    }

    #[test]
    fn incomplete_grid_is_rejected() {
        let mut g = ResultsGrid::new(vec![1, 2], vec![0, 1], 2);
        g.set_baseline(0, 0.5).unwrap();
        g.set_baseline(1, 0.5).unwrap();
        g.insert(1, 0, 0, 0.1).unwrap();
        assert_eq!(g.missing().len(), 7);
        assert!(matches!(aggregate(&g, Statistic::RelativeImprovement, None, 100, 0), Err(Error::IncompleteGrid(_))));
    }

    #[test]
    fn zero_baseline_is_an_error() {
        let mut g = ResultsGrid::new(vec![1], vec![3], 1);
        g.set_baseline(3, 0.0).unwrap();
        g.insert(1, 3, 0, 0.0).unwrap();
        assert!(matches!(g.relative_improvement(1), Err(Error::ZeroBaseline { writer: 3 })));
    }
}
