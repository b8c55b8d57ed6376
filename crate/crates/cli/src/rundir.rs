//! Content-addressed run directories.
//!
//! ```text
//! <run dir>/manifest.json
//! <run dir>/records/<pipeline>.jsonl   one RunRecord per line, sorted by study id
//! <run dir>/errors/<pipeline>.jsonl    studies that failed in the last pass
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use care_core::canonical::to_canonical_json;
use care_core::{RunRecord, SamplingParams};
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub task_id: String,
    pub label_a: String,
    pub label_b: String,
    pub positive_class: String,
    /// Every pipeline ever run into this directory.
    pub pipelines: BTreeSet<String>,
    pub template_hashes: BTreeMap<String, String>,
    pub phrase_list_hash: String,
    pub backend_id: String,
    pub run_seed: u64,
    pub sampling: SamplingParams,
    pub repair: bool,
    pub study_count: usize,
    pub study_set_hash: String,
    /// Digest of the sorted study id list; records must cover exactly it.
    pub study_ids_hash: String,
    pub tool_version: String,
}

/// Pretty JSON with keys sorted at every level, newline-terminated.
pub fn to_stable_json<T: Serialize>(value: &T) -> Result<String> {
    let v: serde_json::Value = serde_json::from_str(&to_canonical_json(value)?)?;
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

/// Writes `contents` via a sibling temporary file and rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Option<RunManifest>> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)?;
    Ok(Some(
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
    ))
}

pub fn write_manifest(dir: &Path, m: &RunManifest) -> Result<()> {
    write_atomic(&dir.join(MANIFEST), to_stable_json(m)?.as_bytes())
}

pub fn records_path(dir: &Path, pipeline: &str) -> PathBuf {
    dir.join("records").join(format!("{pipeline}.jsonl"))
}

pub fn errors_path(dir: &Path, pipeline: &str) -> PathBuf {
    dir.join("errors").join(format!("{pipeline}.jsonl"))
}

/// Records of one pipeline. A truncated last line (an interrupted append) is
/// ignored; a malformed line elsewhere is an error.
pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let lines: Vec<String> = BufReader::new(File::open(path)?).lines().collect::<Result<_, _>>()?;
    let n = lines.len();
    let mut out = Vec::with_capacity(n);
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(e) if i + 1 == n => {
                log::warn!("{}: ignoring truncated last line ({e})", path.display());
            }
            Err(e) => bail!("{} line {}: {e}", path.display(), i + 1),
        }
    }
    Ok(out)
}

/// Rewrites a records file sorted by study id, one canonical line each.
pub fn write_records_sorted(path: &Path, records: &mut [RunRecord]) -> Result<()> {
    records.sort_by(|a, b| a.study_id.cmp(&b.study_id));
    let mut buf = String::new();
    for r in records.iter() {
        buf.push_str(&to_canonical_json(r)?);
        buf.push('\n');
    }
    write_atomic(path, buf.as_bytes())
}

/// Appends records as they complete so an interrupted run keeps its progress.
pub struct RecordAppender {
    file: std::sync::Mutex<File>,
}

impl RecordAppender {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        // drop a partial trailing line before appending after it
        if path.exists() {
            let bytes = fs::read(path)?;
            let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
            if keep < bytes.len() {
                OpenOptions::new().write(true).open(path)?.set_len(keep as u64)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            file: std::sync::Mutex::new(file),
        })
    }

    pub fn append(&self, record: &RunRecord) -> Result<()> {
        let line = to_canonical_json(record)? + "\n";
        let mut f = self.file.lock().expect("appender lock");
        f.write_all(line.as_bytes())?;
        f.flush()?;
        Ok(())
    }
}

/// A loaded run directory: its manifest and every pipeline's records.
pub struct LoadedRun {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub records: BTreeMap<String, Vec<RunRecord>>,
}

/// Loads a run for reporting. Every listed pipeline must have a complete
/// record set matching the manifest's study ids.
pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let manifest = read_manifest(dir)?.with_context(|| format!("{} has no {MANIFEST}", dir.display()))?;
    let mut records = BTreeMap::new();
    for p in &manifest.pipelines {
        let path = records_path(dir, p);
        if !path.exists() {
            bail!("{}: records for pipeline {p} are missing", dir.display());
        }
        let recs = read_records(&path)?;
        let ids = crate::studies::id_set_hash(recs.iter().map(|r| r.study_id.as_str()));
        if recs.len() != manifest.study_count || ids != manifest.study_ids_hash {
            bail!(
                "{}: pipeline {p} has {} records but the run covers {} studies; finish the run first",
                dir.display(),
                recs.len(),
                manifest.study_count
            );
        }
        records.insert(p.clone(), recs);
    }
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        manifest,
        records,
    })
}
