//! Error rates, bootstrap summaries and result grids.

mod bootstrap;
mod cer;
mod grid;

pub use bootstrap::{bootstrap_mean, quantile, resample_means, BootstrapSummary, CONFIDENCE, N_RESAMPLES};
pub use cer::{cer, corpus_cer, edit_distance};
pub use grid::{aggregate, ResultsGrid, Statistic};
