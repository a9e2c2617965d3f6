//! The autoregressive line recognizer and its parameter-group taxonomy.

mod checkpoint;
mod config;
mod mask;
mod network;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointMeta, FORMAT_VERSION};
pub use config::{ConvLayer, ModelConfig, HORIZONTAL_DOWNSCALE, LINE_HEIGHT};
pub use mask::{ComponentMask, Setup};
pub use network::{BackwardScope, DecodeResult, Encoded, ImageBatch, OcrModel, TeacherForced};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::LineImage;
use crate::nn::{Group, Real};

/// The model type used for training and inference.
pub type Recognizer = OcrModel<f32>;

/// Identifies one parameter tensor selected by a mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamHandle {
    pub index: usize,
    pub name: String,
    pub group: Group,
    pub len: usize,
}

impl<T: Real> OcrModel<T> {
    /// Parameters belonging to the groups of `mask`, in canonical order.
    pub fn trainable_parameters(&self, mask: &ComponentMask) -> Result<Vec<ParamHandle>> {
        if mask.groups.is_empty() {
            return Err(Error::EmptyMask);
        }
        Ok(self
            .params()
            .into_iter()
            .enumerate()
            .filter(|(_, p)| mask.contains(p.group))
            .map(|(index, p)| ParamHandle { index, name: p.name.clone(), group: p.group, len: p.len() })
            .collect())
    }

    /// Parameter count of one group.
    pub fn group_size(&self, group: Group) -> usize {
        self.params().iter().filter(|p| p.group == group).map(|p| p.len()).sum()
    }

    /// SHA-256 over the raw values of every parameter in `group`.
    pub fn group_fingerprint(&self, group: Group) -> String {
        let mut h = Sha256::new();
        for p in self.params().into_iter().filter(|p| p.group == group) {
            h.update(p.name.as_bytes());
            for v in &p.value {
                h.update(v.to_f64().unwrap().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn scope_for(mask: &ComponentMask) -> BackwardScope {
        BackwardScope { encoder: mask.touches_encoder(), backbone: mask.contains(Group::ConvBackbone) }
    }

    /// Greedy-decodes `images` in chunks of `batch_size`.
    pub fn decode_lines(&self, images: &[&LineImage], batch_size: usize) -> Result<Vec<DecodeResult>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(batch_size.max(1)) {
            out.extend(self.greedy_decode(&self.batch(chunk)?)?);
        }
        Ok(out)
    }

    /// Teacher-forced evaluation in chunks. Returns the token-weighted mean
    /// NLL and per-line gold log-probabilities.
    pub fn score_lines(&self, images: &[&LineImage], transcripts: &[&str], batch_size: usize) -> Result<TeacherForced> {
        if images.len() != transcripts.len() {
            return Err(Error::Shape(format!("{} images for {} transcripts", images.len(), transcripts.len())));
        }
        let mut logprobs = Vec::with_capacity(images.len());
        let mut total = 0.0;
        let mut count = 0usize;
        for (imgs, texts) in images.chunks(batch_size.max(1)).zip(transcripts.chunks(batch_size.max(1))) {
            let targets = self.encode_transcripts(texts)?;
            let tf = self.teacher_forced(&self.batch(imgs)?, &targets)?;
            for lp in tf.logprobs {
                total -= lp.iter().sum::<f64>();
                count += lp.len();
                logprobs.push(lp);
            }
        }
        Ok(TeacherForced { loss: if count == 0 { 0.0 } else { total / count as f64 }, logprobs })
    }

    pub fn encode_transcripts(&self, texts: &[&str]) -> Result<Vec<Vec<u32>>> {
        texts.iter().map(|t| self.config.vocab.encode(t)).collect()
    }
}
