use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Measurements after one epoch. Validation columns are NaN when the run has
/// no validation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss_aug: f64,
    pub train_loss_clean: f64,
    pub train_cer_clean: f64,
    pub val_loss: f64,
    pub val_cer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub rows: Vec<EpochRow>,
    pub batch_size: usize,
    /// Set when training stopped on a non-finite loss; `rows` then ends at
    /// the last finite epoch.
    pub aborted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    ValCer,
    ValLoss,
    TrainLossClean,
    TrainCerClean,
}

impl EpochTrace {
    pub fn epochs(&self) -> usize {
        self.rows.len()
    }

    pub fn curve(&self, kind: CurveKind) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| match kind {
                CurveKind::ValCer => r.val_cer,
                CurveKind::ValLoss => r.val_loss,
                CurveKind::TrainLossClean => r.train_loss_clean,
                CurveKind::TrainCerClean => r.train_cer_clean,
            })
            .collect()
    }

    /// Row of 1-based `epoch`.
    pub fn row(&self, epoch: usize) -> Option<&EpochRow> {
        epoch.checked_sub(1).and_then(|i| self.rows.get(i))
    }

    /// Rows must be numbered 1..=E without gaps.
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.rows.iter().enumerate() {
            if r.epoch != i + 1 {
                return Err(Error::Trace(format!("row {} has epoch {}", i + 1, r.epoch)));
            }
            let vals = [r.train_loss_aug, r.train_loss_clean, r.train_cer_clean];
            if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Trace(format!("epoch {} has invalid training measurements", r.epoch)));
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r)?;
        }
        if self.rows.is_empty() {
            wr.write_record(["epoch", "train_loss_aug", "train_loss_clean", "train_cer_clean", "val_loss", "val_cer"])?;
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads rows from CSV. `batch_size` and `aborted` are not part of the
    /// CSV and are supplied by the caller.
    pub fn read_csv<R: Read>(r: R, batch_size: usize, aborted: bool) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let rows = rd.deserialize().collect::<std::result::Result<Vec<EpochRow>, _>>()?;
        let t = EpochTrace { rows, batch_size, aborted };
        t.validate()?;
        Ok(t)
    }
}
