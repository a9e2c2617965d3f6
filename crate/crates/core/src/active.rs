//! Confidence-ranked line selection for active learning.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finetune::SeriesPlan;
use crate::image::LineImage;
use crate::model::{DecodeResult, Recognizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineConfidence {
    pub line_id: String,
    /// Sum of the greedy decode's per-token log-probabilities, EOS included.
    pub score: f64,
    /// Decoding hit the length limit; the score covers the emitted tokens.
    pub truncated: bool,
}

/// A line awaiting annotation.
#[derive(Debug, Clone, Copy)]
pub struct PoolLine<'a> {
    pub line_id: &'a str,
    pub image: &'a LineImage,
}

/// Greedy-decodes every line and returns its cumulative log-probability.
/// Lines are batched by width; output follows input order.
pub fn score_lines(model: &Recognizer, lines: &[PoolLine], batch_size: usize) -> Result<Vec<LineConfidence>> {
    if lines.is_empty() {
        return Err(Error::InvalidConfig("no lines to score".into()));
    }
    let images: Vec<&LineImage> = lines.iter().map(|l| l.image).collect();
    Ok(decode_by_width(model, &images, batch_size)?
        .into_iter()
        .zip(lines)
        .map(|(d, l)| LineConfidence { line_id: l.line_id.to_string(), score: d.confidence(), truncated: d.truncated })
        .collect())
}

/// Greedy decoding with batches of similar width; output follows input order.
pub fn decode_by_width(model: &Recognizer, images: &[&LineImage], batch_size: usize) -> Result<Vec<DecodeResult>> {
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.sort_by_key(|&i| (images[i].width, i));
    let mut out: Vec<Option<DecodeResult>> = vec![None; images.len()];
    for chunk in order.chunks(batch_size.max(1)) {
        let imgs: Vec<&LineImage> = chunk.iter().map(|&i| images[i]).collect();
        for (&i, d) in chunk.iter().zip(model.greedy_decode(&model.batch(&imgs)?)?) {
            out[i] = Some(d);
        }
    }
    Ok(out.into_iter().map(|d| d.expect("every line decoded")).collect())
}

/// Line ids from least to most confident; equal scores order by id.
pub fn rank_ascending(confidences: &[LineConfidence]) -> Vec<String> {
    let mut v: Vec<&LineConfidence> = confidences.iter().collect();
    v.sort_by(|a, b| a.score.total_cmp(&b.score).then_with(|| a.line_id.cmp(&b.line_id)));
    v.into_iter().map(|c| c.line_id.clone()).collect()
}

/// A series whose prefixes are the least confident lines under `model`.
/// The ranking is computed once and shared by every level.
pub fn build_active_series(
    writer_id: u32,
    model: &Recognizer,
    pool: &[PoolLine],
    levels: &[usize],
    seed: u64,
) -> Result<(SeriesPlan, Vec<LineConfidence>)> {
    let needed = levels.iter().copied().max().unwrap_or(0);
    if pool.len() < needed {
        return Err(Error::InsufficientPool { writer: writer_id, needed, available: pool.len() });
    }
    let scores = score_lines(model, pool, 32)?;
    let plan = SeriesPlan::from_order(writer_id, seed, levels, rank_ascending(&scores))?;
    Ok((plan, scores))
}

pub fn write_scores_csv<W: Write>(scores: &[LineConfidence], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["line_id", "score"])?;
    for s in scores {
        wr.write_record([s.line_id.as_str(), &format!("{}", s.score)])?;
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}
