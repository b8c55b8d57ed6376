//! Evaluation-set curation: XOR label filter, hedge-phrase exclusion and
//! seeded class balancing, always applied in that order.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::canonical::{content_hash, to_canonical_json};
use crate::exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelFlag {
    Present,
    Absent,
    Unknown,
}

impl LabelFlag {
    pub fn parse(s: &str) -> Option<LabelFlag> {
        match s.trim().to_ascii_lowercase().as_str() {
            "present" | "1" | "1.0" | "true" | "yes" => Some(LabelFlag::Present),
            "absent" | "0" | "0.0" | "false" | "no" => Some(LabelFlag::Absent),
            "unknown" | "-1" | "-1.0" | "" | "uncertain" => Some(LabelFlag::Unknown),
            _ => None,
        }
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub record_id: String,
    pub label_flags: BTreeMap<String, LabelFlag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_text: Option<String>,
    #[serde(default)]
    pub image_refs: Vec<String>,
}

impl RawRecord {
    /// The single present label among `(a, b)`, if the record is XOR-clean.
    pub fn xor_label<'a>(&self, a: &'a str, b: &'a str) -> Option<&'a str> {
        match (self.label_flags.get(a), self.label_flags.get(b)) {
            (Some(LabelFlag::Present), Some(LabelFlag::Absent)) => Some(a),
            (Some(LabelFlag::Absent), Some(LabelFlag::Present)) => Some(b),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CurationError {
    #[error("record {record_id} has no flag for label {label:?}")]
    MissingLabel { record_id: String, label: String },
    #[error("duplicate record id {0}")]
    DuplicateId(String),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("hedge phrase list is empty")]
    EmptyPhraseList,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Default hedge expressions. Matching is case-insensitive on
/// whitespace-normalized text.
pub const DEFAULT_HEDGE_PHRASES: [&str; 7] = [
    "cannot be excluded",
    "can not be excluded",
    "cannot exclude",
    "may represent",
    "possibly",
    "question of",
    "concerning for",
];

fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhraseList {
    phrases: Vec<String>,
}

impl PhraseList {
    pub fn new<I, S>(phrases: I) -> Result<Self, CurationError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let phrases: Vec<String> = phrases
            .into_iter()
            .map(|p| normalize(p.as_ref()))
            .filter(|p| !p.is_empty())
            .collect();
        if phrases.is_empty() {
            return Err(CurationError::EmptyPhraseList);
        }
        Ok(Self { phrases })
    }

    pub fn default_list() -> Self {
        Self::new(DEFAULT_HEDGE_PHRASES).expect("non-empty")
    }

    /// One phrase per line; blank lines and `#` comments skipped.
    pub fn load(path: &Path) -> Result<Self, CurationError> {
        let text = std::fs::read_to_string(path)?;
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    pub fn hash(&self) -> String {
        content_hash(&self.phrases)
    }

    fn first_match(&self, text: &str) -> Option<&str> {
        let t = normalize(text);
        self.phrases.iter().find(|p| t.contains(p.as_str())).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HedgeDecision {
    pub keep: bool,
    pub matched: Option<String>,
}

/// Keeps records without report text; drops any report containing a phrase.
pub fn hedge_filter(report_text: Option<&str>, phrases: &PhraseList) -> HedgeDecision {
    match report_text.and_then(|t| phrases.first_match(t)) {
        Some(p) => HedgeDecision {
            keep: false,
            matched: Some(p.to_string()),
        },
        None => HedgeDecision {
            keep: true,
            matched: None,
        },
    }
}

/// Records where exactly one of the two labels is present and the other absent.
/// `unknown` on either label drops the record.
pub fn xor_filter(records: &[RawRecord], label_a: &str, label_b: &str) -> Result<Vec<RawRecord>, CurationError> {
    for r in records {
        for label in [label_a, label_b] {
            if !r.label_flags.contains_key(label) {
                return Err(CurationError::MissingLabel {
                    record_id: r.record_id.clone(),
                    label: label.to_string(),
                });
            }
        }
    }
    Ok(records
        .iter()
        .filter(|r| r.xor_label(label_a, label_b).is_some())
        .cloned()
        .collect())
}

/// Uniformly subsamples the majority class without replacement until the
/// class counts differ by at most `tolerance`. The minority class and the
/// input order are preserved. Records must already be XOR-clean.
pub fn balance_subsample(
    records: &[RawRecord],
    label_a: &str,
    label_b: &str,
    seed: u64,
    tolerance: usize,
) -> Vec<RawRecord> {
    let a_idx: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.xor_label(label_a, label_b) == Some(label_a))
        .map(|(i, _)| i)
        .collect();
    let b_idx: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.xor_label(label_a, label_b) == Some(label_b))
        .map(|(i, _)| i)
        .collect();
    let (major, minor) = if a_idx.len() >= b_idx.len() {
        (&a_idx, &b_idx)
    } else {
        (&b_idx, &a_idx)
    };
    if major.len() - minor.len() <= tolerance {
        return records.to_vec();
    }
    let keep_n = minor.len() + tolerance;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: HashSet<usize> = rand::seq::index::sample(&mut rng, major.len(), keep_n)
        .into_iter()
        .map(|k| major[k])
        .collect();
    let dropped: HashSet<usize> = major.iter().copied().filter(|i| !chosen.contains(i)).collect();
    records
        .iter()
        .enumerate()
        .filter(|(i, _)| !dropped.contains(i))
        .map(|(_, r)| r.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HedgeMatch {
    pub record_id: String,
    pub phrase: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationReport {
    pub label_a: String,
    pub label_b: String,
    pub input_count: usize,
    pub xor_kept: usize,
    pub hedge_excluded: usize,
    pub balance_removed: usize,
    pub final_count: usize,
    pub per_label_counts: BTreeMap<String, usize>,
    pub seed: u64,
    pub tolerance: usize,
    pub phrase_list_hash: String,
    pub hedge_matches: Vec<HedgeMatch>,
}

impl CurationReport {
    pub fn check_arithmetic(&self) -> bool {
        self.xor_kept >= self.hedge_excluded + self.balance_removed
            && self.final_count == self.xor_kept - self.hedge_excluded - self.balance_removed
            && self.per_label_counts.values().sum::<usize>() == self.final_count
    }

    /// Human-readable block for terminals and logs.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "curation: {} vs {}", self.label_a, self.label_b);
        let _ = writeln!(s, "  input records     {:>7}", self.input_count);
        let _ = writeln!(s, "  kept by XOR       {:>7}", self.xor_kept);
        let _ = writeln!(s, "  hedge excluded    {:>7}", self.hedge_excluded);
        let _ = writeln!(s, "  balance removed   {:>7}", self.balance_removed);
        let _ = writeln!(s, "  final             {:>7}", self.final_count);
        for (label, n) in &self.per_label_counts {
            let _ = writeln!(s, "    {label:<16}{n:>7}");
        }
        let _ = writeln!(s, "  seed {} tolerance {}", self.seed, self.tolerance);
        let _ = writeln!(s, "  phrase list sha256 {}", self.phrase_list_hash);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Curated {
    pub records: Vec<RawRecord>,
    pub report: CurationReport,
}

/// xor → hedge → balance.
pub fn curate(
    records: &[RawRecord],
    label_a: &str,
    label_b: &str,
    phrases: &PhraseList,
    seed: u64,
    tolerance: usize,
) -> Result<Curated, CurationError> {
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.record_id.as_str()) {
            return Err(CurationError::DuplicateId(r.record_id.clone()));
        }
    }
    let xor = xor_filter(records, label_a, label_b)?;
    let decisions = exec::map_slice(&xor, |r| hedge_filter(r.report_text.as_deref(), phrases));
    let mut hedged = Vec::with_capacity(xor.len());
    let mut hedge_matches = Vec::new();
    for (r, d) in xor.iter().zip(decisions) {
        match d.matched {
            Some(phrase) => hedge_matches.push(HedgeMatch {
                record_id: r.record_id.clone(),
                phrase,
            }),
            None => hedged.push(r.clone()),
        }
    }
    let balanced = balance_subsample(&hedged, label_a, label_b, seed, tolerance);
    let mut per_label_counts = BTreeMap::from([(label_a.to_string(), 0), (label_b.to_string(), 0)]);
    for r in &balanced {
        if let Some(l) = r.xor_label(label_a, label_b) {
            *per_label_counts.get_mut(l).expect("label key") += 1;
        }
    }
    let report = CurationReport {
        label_a: label_a.to_string(),
        label_b: label_b.to_string(),
        input_count: records.len(),
        xor_kept: xor.len(),
        hedge_excluded: hedge_matches.len(),
        balance_removed: hedged.len() - balanced.len(),
        final_count: balanced.len(),
        per_label_counts,
        seed,
        tolerance,
        phrase_list_hash: phrases.hash(),
        hedge_matches,
    };
    Ok(Curated {
        records: balanced,
        report,
    })
}

/// Reads a manifest: JSON lines, or CSV when the extension is `.csv`/`.tsv`.
///
/// CSV columns `record_id`, `report_text` and `image_refs` (`;`-separated)
/// are fixed; every other column is a label whose cells are
/// `present|absent|unknown` (or `1|0|-1`, blank = unknown).
pub fn read_manifest(path: &Path) -> Result<Vec<RawRecord>, CurationError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_delimited(path, b','),
        Some("tsv") => read_delimited(path, b'\t'),
        _ => read_jsonl(path),
    }
}

fn read_jsonl(path: &Path) -> Result<Vec<RawRecord>, CurationError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| CurationError::Manifest {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn read_delimited(path: &Path, delimiter: u8) -> Result<Vec<RawRecord>, CurationError> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .from_path(path)
        .map_err(|e| CurationError::Manifest {
            line: 0,
            message: e.to_string(),
        })?;
    let headers = rdr
        .headers()
        .map_err(|e| CurationError::Manifest {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| CurationError::Manifest {
            line,
            message: e.to_string(),
        })?;
        let mut rec = RawRecord {
            record_id: String::new(),
            label_flags: BTreeMap::new(),
            report_text: None,
            image_refs: Vec::new(),
        };
        for (h, v) in headers.iter().zip(row.iter()) {
            match h {
                "record_id" => rec.record_id = v.to_string(),
                "report_text" => rec.report_text = (!v.is_empty()).then(|| v.to_string()),
                "image_refs" => {
                    rec.image_refs = v
                        .split(';')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(String::from)
                        .collect()
                }
                label => {
                    let flag = LabelFlag::parse(v).ok_or_else(|| CurationError::Manifest {
                        line,
                        message: format!("bad flag {v:?} for label {label:?}"),
                    })?;
                    rec.label_flags.insert(label.to_string(), flag);
                }
            }
        }
        if rec.record_id.is_empty() {
            return Err(CurationError::Manifest {
                line,
                message: "missing record_id".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Writes records as canonical JSON lines.
pub fn write_manifest(path: &Path, records: &[RawRecord]) -> Result<(), CurationError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(f, "{}", to_canonical_json(r).expect("plain data"))?;
    }
    f.flush()?;
    Ok(())
}
