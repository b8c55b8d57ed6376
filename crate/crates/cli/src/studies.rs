//! Loading study lists.
//!
//! Each line is either a study (`study_id`, `truth`, inline `images` and/or
//! `image_paths`) or a curated manifest record (`record_id`, `label_flags`,
//! `image_refs`), whose truth is its single present label. Relative image
//! paths resolve against the list's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use care_core::canonical::{content_hash, sha256_hex};
use care_core::curation::RawRecord;
use care_core::{ImagePayload, Study, TaskSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StudyLine {
    study_id: String,
    truth: String,
    #[serde(default)]
    images: Vec<ImagePayload>,
    #[serde(default)]
    image_paths: Vec<PathBuf>,
    #[serde(default)]
    report_text: Option<String>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

pub fn media_type(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        Some("bmp") => "image/bmp",
        Some("dcm") => "application/dicom",
        _ => "application/octet-stream",
    }
}

fn load_image(base: &Path, rel: &Path) -> Result<ImagePayload> {
    let path = if rel.is_relative() {
        base.join(rel)
    } else {
        rel.to_path_buf()
    };
    let bytes = std::fs::read(&path).with_context(|| format!("reading image {}", path.display()))?;
    Ok(ImagePayload::new(media_type(&path), bytes))
}

/// Reads and validates a study list against `task`.
pub fn load_studies(path: &Path, task: &TaskSpec) -> Result<Vec<Study>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ctx = || format!("{} line {}", path.display(), i + 1);
        let value: serde_json::Value = serde_json::from_str(&line).with_context(ctx)?;
        let study = if value.get("record_id").is_some() {
            let rec: RawRecord = serde_json::from_value(value).with_context(ctx)?;
            let Some(truth) = rec.xor_label(&task.label_a, &task.label_b) else {
                bail!(
                    "{}: record {} is not XOR-clean for this task; curate first",
                    ctx(),
                    rec.record_id
                );
            };
            Study {
                study_id: rec.record_id.clone(),
                images: rec
                    .image_refs
                    .iter()
                    .map(|r| load_image(base, Path::new(r)))
                    .collect::<Result<_>>()?,
                truth: truth.to_string(),
                report_text: rec.report_text,
                meta: BTreeMap::new(),
            }
        } else {
            let s: StudyLine = serde_json::from_value(value).with_context(ctx)?;
            let mut images = s.images;
            for p in &s.image_paths {
                images.push(load_image(base, p)?);
            }
            Study {
                study_id: s.study_id,
                images,
                truth: s.truth,
                report_text: s.report_text,
                meta: s.meta,
            }
        };
        task.check_study(&study).with_context(ctx)?;
        if !seen.insert(study.study_id.clone()) {
            bail!("{}: duplicate study id {}", ctx(), study.study_id);
        }
        out.push(study);
    }
    Ok(out)
}

#[derive(Serialize)]
struct StudyDigest<'a> {
    study_id: &'a str,
    truth: &'a str,
    images: Vec<String>,
}

/// Digest of the study set: ids, truths and image contents, order-free.
pub fn study_set_hash(studies: &[Study]) -> String {
    let mut digests: Vec<StudyDigest<'_>> = studies
        .iter()
        .map(|s| StudyDigest {
            study_id: &s.study_id,
            truth: &s.truth,
            images: s.images.iter().map(|i| sha256_hex(&i.bytes)).collect(),
        })
        .collect();
    digests.sort_by(|a, b| a.study_id.cmp(b.study_id));
    content_hash(&digests)
}

/// Digest of a sorted id list, used to check record sets against a manifest.
pub fn id_set_hash<'a>(ids: impl IntoIterator<Item = &'a str>) -> String {
    let sorted: BTreeSet<&str> = ids.into_iter().collect();
    content_hash(&sorted)
}
