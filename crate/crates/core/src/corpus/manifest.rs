//! JSON-lines manifest with checksummed PNG images.
//!
//! `manifest.jsonl` holds one record per line. Writer profiles and the
//! charset live in a sidecar `<stem>.writers.json` next to it. Image paths
//! are relative to the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::charset::CharsetSpec;
use crate::error::{Error, Result};
use crate::image::LineImage;

use super::{Corpus, LineRecord, Split, WriterProfile};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub line_id: String,
    pub image_path: String,
    pub transcript: String,
    pub writer_id: u32,
    pub split: Split,
    pub sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    height: usize,
    charset: CharsetSpec,
    writers: Vec<WriterProfile>,
}

fn sidecar_path(manifest: &Path) -> PathBuf {
    let stem = manifest.file_stem().and_then(|s| s.to_str()).unwrap_or("manifest");
    manifest.with_file_name(format!("{stem}.writers.json"))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_manifest(corpus: &Corpus, path: &Path) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let records = corpus
        .lines
        .par_iter()
        .map(|l| {
            let rel = format!("images/{}.png", l.line_id);
            let bytes = l.image.to_png()?;
            let file = dir.join(&rel);
            fs::write(&file, &bytes).map_err(|e| Error::io(&file, e))?;
            Ok(ManifestRecord {
                line_id: l.line_id.clone(),
                image_path: rel,
                transcript: l.transcript.clone(),
                writer_id: l.writer_id,
                split: l.split,
                sha256: sha256_hex(&bytes),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in &records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let sidecar = Sidecar { height: corpus.height, charset: corpus.charset.clone(), writers: corpus.writers.clone() };
    fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))
}

pub fn read_manifest(path: &Path) -> Result<Corpus> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let side = sidecar_path(path);
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(&side).map_err(|e| Error::io(&side, e))?)?;
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| Error::Manifest { line: i + 1, message: e.to_string() })?;
        records.push((i + 1, rec));
    }
    let mut seen = HashSet::new();
    for (n, r) in &records {
        if !seen.insert(r.line_id.as_str()) {
            return Err(Error::Manifest { line: *n, message: format!("duplicate line_id {}", r.line_id) });
        }
        if !sidecar.writers.iter().any(|w| w.writer_id == r.writer_id) {
            return Err(Error::Manifest { line: *n, message: format!("unknown writer {}", r.writer_id) });
        }
        let unknown = sidecar.charset.unknown_chars(&r.transcript);
        if r.transcript.is_empty() || !unknown.is_empty() {
            return Err(Error::Manifest { line: *n, message: format!("invalid transcript {:?}", r.transcript) });
        }
    }
    let lines = records
        .par_iter()
        .map(|(n, r)| {
            let file = dir.join(&r.image_path);
            if !file.is_file() {
                return Err(Error::MissingImage(file));
            }
            let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
            let actual = sha256_hex(&bytes);
            if actual != r.sha256 {
                return Err(Error::Checksum { path: file, expected: r.sha256.clone(), actual });
            }
            let image = LineImage::from_png(&bytes)?;
            if image.height != sidecar.height {
                return Err(Error::Manifest {
                    line: *n,
                    message: format!("image height {} differs from corpus height {}", image.height, sidecar.height),
                });
            }
            Ok(LineRecord {
                line_id: r.line_id.clone(),
                image,
                transcript: r.transcript.clone(),
                writer_id: r.writer_id,
                split: r.split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { charset: sidecar.charset, height: sidecar.height, writers: sidecar.writers, lines })
}
