//! Orchestration of the adaptation study: grid execution, the run store,
//! stopping decisions, bootstrapped reports and stability sweeps.

pub mod analysis;
pub mod decide;
pub mod error;
pub mod grid;
pub mod plot;
pub mod spec;
pub mod store;

pub use error::{HarnessError, Result};
