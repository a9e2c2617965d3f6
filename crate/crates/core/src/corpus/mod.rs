//! Deterministic synthetic multi-writer line corpora.
//!
//! Source writers supply pretraining lines. Target writers are held out and
//! get a finetuning pool plus a fixed 256-line test set. Target writers of
//! the unseen style transcribe some letters with historic variant codepoints
//! that never occur in pretraining text.

pub mod glyphs;
mod manifest;
pub mod render;
pub mod text;

pub use manifest::{read_manifest, write_manifest, ManifestRecord};
pub use render::{render_line, CharsetMode, StyleParams, WriterProfile, WriterRole};
pub use text::Language;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::charset::{CharsetSpec, VariantPair};
use crate::error::{Error, Result};
use crate::image::LineImage;
use crate::model::LINE_HEIGHT;
use crate::seed;

/// Lines per target writer reserved for testing.
pub const TARGET_TEST_LINES: usize = 256;
/// Ids of source writers start here; target writers are numbered from 0.
pub const SOURCE_ID_BASE: u32 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    PretrainTrain,
    PretrainTest,
    FinetunePool,
    TargetTest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineRecord {
    pub line_id: String,
    pub image: LineImage,
    pub transcript: String,
    pub writer_id: u32,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    /// Target writers.
    pub n_writers: usize,
    /// Lines per target writer (pool + test).
    pub lines_per_writer: usize,
    pub unseen_fraction: f64,
    pub n_source_writers: usize,
    pub source_lines_per_writer: usize,
    /// Every k-th source line goes to the pretraining test split.
    pub source_test_every: usize,
    /// Fraction of source writers drawing variant shapes under native labels.
    pub source_variant_shape_fraction: f64,
    pub n_source_languages: usize,
    pub n_target_languages: usize,
    pub min_chars: usize,
    pub max_chars: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_writers: 6,
            lines_per_writer: 512,
            unseen_fraction: 1.0 / 3.0,
            n_source_writers: 42,
            source_lines_per_writer: 256,
            source_test_every: 16,
            source_variant_shape_fraction: 0.3,
            n_source_languages: 3,
            n_target_languages: 2,
            min_chars: 8,
            max_chars: 28,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self, charset: &CharsetSpec) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_writers < 2 {
            return bad(format!("at least 2 target writers required, got {}", self.n_writers));
        }
        if self.lines_per_writer < 2 * TARGET_TEST_LINES {
            return bad(format!(
                "target writers need at least {} lines ({} pool + {} test), got {}",
                2 * TARGET_TEST_LINES,
                TARGET_TEST_LINES,
                TARGET_TEST_LINES,
                self.lines_per_writer
            ));
        }
        if !(0.0..=1.0).contains(&self.unseen_fraction) || !(0.0..=1.0).contains(&self.source_variant_shape_fraction) {
            return bad("fractions must lie in [0, 1]".into());
        }
        if self.unseen_fraction > 0.0 && charset.variants.is_empty() {
            return bad("unseen-style writers need variant codepoints in the charset".into());
        }
        if self.n_source_writers > 0 && (self.source_test_every < 2 || self.n_source_languages == 0) {
            return bad("source_test_every must be >= 2 and at least one source language is required".into());
        }
        if self.n_target_languages == 0 || self.min_chars == 0 || self.min_chars > self.max_chars {
            return bad("invalid text length or language settings".into());
        }
        Ok(())
    }

    pub fn n_unseen(&self) -> usize {
        (self.n_writers as f64 * self.unseen_fraction).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub charset: CharsetSpec,
    pub height: usize,
    pub writers: Vec<WriterProfile>,
    pub lines: Vec<LineRecord>,
}

impl Corpus {
    pub fn writer(&self, id: u32) -> Option<&WriterProfile> {
        self.writers.iter().find(|w| w.writer_id == id)
    }

    pub fn target_writers(&self) -> impl Iterator<Item = &WriterProfile> {
        self.writers.iter().filter(|w| w.role == WriterRole::Target)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &LineRecord> {
        self.lines.iter().filter(move |l| l.split == split)
    }

    pub fn lines_of(&self, writer: u32, split: Split) -> Vec<&LineRecord> {
        self.lines.iter().filter(|l| l.writer_id == writer && l.split == split).collect()
    }

    pub fn line(&self, id: &str) -> Option<&LineRecord> {
        self.lines.iter().find(|l| l.line_id == id)
    }

    /// Line counts per split.
    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut m = BTreeMap::new();
        for l in &self.lines {
            *m.entry(l.split).or_insert(0) += 1;
        }
        m
    }
}

fn source_style<R: Rng>(rng: &mut R, shape_seed: u64) -> StyleParams {
    StyleParams {
        slant_deg: rng.gen_range(-8.0..12.0),
        stroke_width: rng.gen_range(1.6..2.6),
        jitter: rng.gen_range(0.0..0.6),
        spacing: rng.gen_range(1.0..3.0),
        contrast: rng.gen_range(0.65..1.0),
        scale: rng.gen_range(0.9..1.1),
        distortion: rng.gen_range(0.0..0.25),
        shape_seed,
    }
}

/// Target hands lie partly outside the source style distribution.
fn target_style<R: Rng>(rng: &mut R, shape_seed: u64) -> StyleParams {
    let slant = if rng.gen_bool(0.5) { rng.gen_range(-16.0..-6.0) } else { rng.gen_range(10.0..22.0) };
    StyleParams {
        slant_deg: slant,
        stroke_width: rng.gen_range(1.4..3.0),
        jitter: rng.gen_range(0.3..0.8),
        spacing: rng.gen_range(0.5..3.5),
        contrast: rng.gen_range(0.5..0.95),
        scale: rng.gen_range(0.88..1.15),
        distortion: rng.gen_range(0.25..0.4),
        shape_seed,
    }
}

fn variant_subset<R: Rng>(rng: &mut R, pairs: &[VariantPair], min: usize) -> Vec<VariantPair> {
    let k = rng.gen_range(min.min(pairs.len())..=pairs.len());
    let mut chosen: Vec<VariantPair> = pairs.choose_multiple(rng, k).cloned().collect();
    chosen.sort_by_key(|p| p.variant);
    chosen
}

fn writer_profiles(spec: &CorpusSpec, charset: &CharsetSpec) -> Vec<WriterProfile> {
    let mut rng = seed::rng(spec.seed, "writers", 0);
    let mut unseen: Vec<bool> = (0..spec.n_writers).map(|i| i < spec.n_unseen()).collect();
    unseen.shuffle(&mut rng);
    let mut writers = Vec::with_capacity(spec.n_writers + spec.n_source_writers);
    for (i, &is_unseen) in unseen.iter().enumerate() {
        let id = i as u32;
        let mut wrng = seed::rng(spec.seed, "target-writer", i as u64);
        let style = target_style(&mut wrng, seed::derive(spec.seed, "shape", id as u64));
        let spelling = if is_unseen { variant_subset(&mut wrng, &charset.variants, 2) } else { Vec::new() };
        writers.push(WriterProfile {
            writer_id: id,
            role: WriterRole::Target,
            style,
            charset_mode: if is_unseen { CharsetMode::UnseenStyle } else { CharsetMode::Native },
            language_seed: seed::derive(spec.seed, "target-language", (i % spec.n_target_languages) as u64),
            shape_variants: Vec::new(),
            spelling_variants: spelling,
        });
    }
    let n_shape = (spec.n_source_writers as f64 * spec.source_variant_shape_fraction).round() as usize;
    for i in 0..spec.n_source_writers {
        let id = SOURCE_ID_BASE + i as u32;
        let mut wrng = seed::rng(spec.seed, "source-writer", i as u64);
        let style = source_style(&mut wrng, seed::derive(spec.seed, "shape", id as u64));
        let shapes = if i < n_shape { variant_subset(&mut wrng, &charset.variants, 1) } else { Vec::new() };
        writers.push(WriterProfile {
            writer_id: id,
            role: WriterRole::Source,
            style,
            charset_mode: CharsetMode::Native,
            language_seed: seed::derive(spec.seed, "source-language", (i % spec.n_source_languages) as u64),
            shape_variants: shapes,
            spelling_variants: Vec::new(),
        });
    }
    writers
}

struct Job<'a> {
    writer: &'a WriterProfile,
    index: usize,
    split: Split,
}

/// Builds the full corpus in memory. Deterministic per spec (including seed).
pub fn generate_corpus(spec: &CorpusSpec, charset: &CharsetSpec) -> Result<Corpus> {
    charset.validate()?;
    spec.validate(charset)?;
    let writers = writer_profiles(spec, charset);
    let mut languages: BTreeMap<u64, Language> = BTreeMap::new();
    for w in &writers {
        languages.entry(w.language_seed).or_insert_with(|| Language::new(w.language_seed));
    }
    let mut jobs = Vec::new();
    for w in &writers {
        match w.role {
            WriterRole::Target => {
                let pool = spec.lines_per_writer - TARGET_TEST_LINES;
                for index in 0..spec.lines_per_writer {
                    let split = if index < pool { Split::FinetunePool } else { Split::TargetTest };
                    jobs.push(Job { writer: w, index, split });
                }
            }
            WriterRole::Source => {
                for index in 0..spec.source_lines_per_writer {
                    let split = if index % spec.source_test_every == spec.source_test_every - 1 {
                        Split::PretrainTest
                    } else {
                        Split::PretrainTrain
                    };
                    jobs.push(Job { writer: w, index, split });
                }
            }
        }
    }
    let lines = jobs
        .par_iter()
        .map(|job| {
            let w = job.writer;
            let line_seed = seed::derive(spec.seed, &format!("line-{}", w.writer_id), job.index as u64);
            let mut rng = seed::rng(line_seed, "text", 0);
            let native = languages[&w.language_seed].sample_line(&mut rng, spec.min_chars, spec.max_chars);
            let transcript = w.spell(&native);
            let image = render_line(&transcript, w, LINE_HEIGHT, line_seed)?;
            Ok(LineRecord {
                line_id: format!("w{:04}-{:04}", w.writer_id, job.index),
                image,
                transcript,
                writer_id: w.writer_id,
                split: job.split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let corpus = Corpus { charset: charset.clone(), height: LINE_HEIGHT, writers, lines };
    check_variant_hygiene(&corpus)?;
    Ok(corpus)
}

/// Unseen-style writers must use at least one variant codepoint; nobody else
/// may use any.
pub fn check_variant_hygiene(corpus: &Corpus) -> Result<()> {
    for w in &corpus.writers {
        let count = corpus
            .lines
            .iter()
            .filter(|l| l.writer_id == w.writer_id)
            .flat_map(|l| l.transcript.chars())
            .filter(|&c| corpus.charset.is_variant(c))
            .count();
        let ok = match w.charset_mode {
            CharsetMode::UnseenStyle => count > 0,
            CharsetMode::Native => count == 0,
        };
        if !ok {
            return Err(Error::InvalidConfig(format!(
                "writer {} ({:?}) has {count} variant codepoints in its transcripts",
                w.writer_id, w.charset_mode
            )));
        }
    }
    Ok(())
}
