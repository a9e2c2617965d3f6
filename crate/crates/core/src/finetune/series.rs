use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Default line-count levels of a fine-tuning series.
pub const DEFAULT_LEVELS: [usize; 9] = [1, 2, 4, 8, 16, 32, 64, 128, 256];

/// Nested cumulative subsets of one writer's pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeriesPlan {
    pub writer_id: u32,
    pub seed: u64,
    pub levels: Vec<usize>,
    /// Pool order the subsets are prefixes of.
    pub order: Vec<String>,
}

impl SeriesPlan {
    /// Builds a plan whose subsets are prefixes of `order`.
    pub fn from_order(writer_id: u32, seed: u64, levels: &[usize], order: Vec<String>) -> Result<Self> {
        let needed = levels.iter().copied().max().unwrap_or(0);
        if order.len() < needed {
            return Err(Error::InsufficientPool { writer: writer_id, needed, available: order.len() });
        }
        if levels.iter().any(|&l| l == 0) {
            return Err(Error::InvalidConfig("series levels must be positive".into()));
        }
        let mut levels = levels.to_vec();
        levels.sort_unstable();
        levels.dedup();
        Ok(SeriesPlan { writer_id, seed, levels, order })
    }

    /// The first `level` lines of the order.
    pub fn subset(&self, level: usize) -> &[String] {
        &self.order[..level.min(self.order.len())]
    }
}

/// Shuffles the writer's pool with `seed` and takes cumulative prefixes.
pub fn build_series(writer_id: u32, pool: &[String], seed: u64, levels: &[usize]) -> Result<SeriesPlan> {
    let mut order = pool.to_vec();
    order.sort();
    order.shuffle(&mut seed::rng(seed, "series", writer_id as u64));
    SeriesPlan::from_order(writer_id, seed, levels, order)
}
