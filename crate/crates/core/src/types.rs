//! Domain types shared by every module.
//!
//! Everything here is plain data: immutable after construction, `Send + Sync`,
//! and serializable to the canonical JSON form used for hashing and replay.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::template::{placeholders, TemplateError};

/// Sentinel written wherever a prediction could not be extracted.
pub const ABSTAIN: &str = "ABSTAIN";

/// A pipeline's output for one study: one of the two task labels, or abstention.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Prediction {
    Label(String),
    Abstain,
}

impl Prediction {
    pub fn label(&self) -> Option<&str> {
        match self {
            Prediction::Label(l) => Some(l),
            Prediction::Abstain => None,
        }
    }

    pub fn is_abstain(&self) -> bool {
        matches!(self, Prediction::Abstain)
    }

    pub fn is_correct(&self, truth: &str) -> bool {
        self.label() == Some(truth)
    }
}

impl fmt::Display for Prediction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label().unwrap_or(ABSTAIN))
    }
}

impl Serialize for Prediction {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.label().unwrap_or(ABSTAIN))
    }
}

impl<'de> Deserialize<'de> for Prediction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(if s == ABSTAIN {
            Prediction::Abstain
        } else {
            Prediction::Label(s)
        })
    }
}

/// Every role that issues a model call. The first six own a prompt template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    SpecialistA,
    SpecialistB,
    Judge,
    Baseline,
    SelfCheck,
    BlindJudge,
    MajorityVote,
    Repair,
}

impl Role {
    pub const TEMPLATE_ROLES: [Role; 6] = [
        Role::SpecialistA,
        Role::SpecialistB,
        Role::Judge,
        Role::Baseline,
        Role::SelfCheck,
        Role::BlindJudge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::SpecialistA => "specialist_a",
            Role::SpecialistB => "specialist_b",
            Role::Judge => "judge",
            Role::Baseline => "baseline",
            Role::SelfCheck => "self_check",
            Role::BlindJudge => "blind_judge",
            Role::MajorityVote => "majority_vote",
            Role::Repair => "repair",
        }
    }

    /// The exact placeholder set a template for this role must contain.
    pub fn required_placeholders(self) -> &'static [&'static str] {
        match self {
            Role::SpecialistA | Role::SpecialistB => &["label_other", "label_self"],
            Role::Judge | Role::BlindJudge => &["evidence_a", "evidence_b"],
            Role::Baseline | Role::MajorityVote => &["label_a", "label_b"],
            Role::SelfCheck => &["label_a", "label_b", "prior_response"],
            Role::Repair => &[],
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Opaque image payload. Never decoded; forwarded to backends as-is.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePayload {
    pub media_type: String,
    #[serde(with = "b64")]
    pub bytes: Vec<u8>,
}

impl ImagePayload {
    pub fn new(media_type: impl Into<String>, bytes: impl Into<Vec<u8>>) -> Self {
        Self {
            media_type: media_type.into(),
            bytes: bytes.into(),
        }
    }

    pub fn to_base64(&self) -> String {
        base64::engine::general_purpose::STANDARD.encode(&self.bytes)
    }
}

mod b64 {
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD
            .decode(s.as_bytes())
            .map_err(serde::de::Error::custom)
    }
}

/// Decoding parameters; part of every request's cache key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingParams {
    pub temperature: f64,
    pub max_output_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 0.2,
            max_output_tokens: 1024,
            seed: None,
        }
    }
}

/// A mutually exclusive disease pair plus the prompt template for each role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub label_a: String,
    pub label_b: String,
    pub prompt_templates: BTreeMap<Role, String>,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum TaskError {
    #[error("labels must differ (case-insensitive): {0:?} vs {1:?}")]
    SameLabels(String, String),
    #[error("task {task} has no template for role {role}")]
    MissingTemplate { task: String, role: Role },
    #[error("template for role {role} has placeholders {found:?}, expected exactly {expected:?}")]
    PlaceholderMismatch {
        role: Role,
        found: Vec<String>,
        expected: Vec<String>,
    },
    #[error("truth {truth:?} of study {study_id} is neither {label_a:?} nor {label_b:?}")]
    TruthOutsideTask {
        study_id: String,
        truth: String,
        label_a: String,
        label_b: String,
    },
    #[error("study {0} has no images")]
    NoImages(String),
}

impl TaskSpec {
    /// Checks label distinctness and the placeholder contract of every
    /// template used by `roles`.
    pub fn validate(&self, roles: &[Role]) -> Result<(), TaskError> {
        if self.label_a.to_lowercase() == self.label_b.to_lowercase() {
            return Err(TaskError::SameLabels(self.label_a.clone(), self.label_b.clone()));
        }
        for &role in roles {
            let tpl = self
                .prompt_templates
                .get(&role)
                .ok_or_else(|| TaskError::MissingTemplate {
                    task: self.task_id.clone(),
                    role,
                })?;
            let found: BTreeSet<String> = placeholders(tpl).into_iter().collect();
            let expected: BTreeSet<String> = role.required_placeholders().iter().map(|s| s.to_string()).collect();
            if found != expected {
                return Err(TaskError::PlaceholderMismatch {
                    role,
                    found: found.into_iter().collect(),
                    expected: expected.into_iter().collect(),
                });
            }
        }
        Ok(())
    }

    pub fn template(&self, role: Role) -> Result<&str, TemplateError> {
        self.prompt_templates
            .get(&role)
            .map(String::as_str)
            .ok_or_else(|| TemplateError::MissingTemplate(role.to_string()))
    }

    pub fn labels(&self) -> [&str; 2] {
        [&self.label_a, &self.label_b]
    }

    pub fn other_label(&self, label: &str) -> &str {
        if label == self.label_a {
            &self.label_b
        } else {
            &self.label_a
        }
    }

    /// Same task with the two labels exchanged.
    pub fn swapped(&self) -> TaskSpec {
        TaskSpec {
            task_id: format!("{}_swapped", self.task_id),
            label_a: self.label_b.clone(),
            label_b: self.label_a.clone(),
            prompt_templates: self.prompt_templates.clone(),
        }
    }

    pub fn check_study(&self, study: &Study) -> Result<(), TaskError> {
        if study.images.is_empty() {
            return Err(TaskError::NoImages(study.study_id.clone()));
        }
        if study.truth != self.label_a && study.truth != self.label_b {
            return Err(TaskError::TruthOutsideTask {
                study_id: study.study_id.clone(),
                truth: study.truth.clone(),
                label_a: self.label_a.clone(),
                label_b: self.label_b.clone(),
            });
        }
        Ok(())
    }
}

/// One evaluation case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub study_id: String,
    pub images: Vec<ImagePayload>,
    pub truth: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_text: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Confidence {
    Low,
    Medium,
    High,
}

impl Confidence {
    pub fn parse(s: &str) -> Option<Confidence> {
        match s.trim().to_ascii_lowercase().as_str() {
            "low" => Some(Confidence::Low),
            "medium" | "moderate" => Some(Confidence::Medium),
            "high" => Some(Confidence::High),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceClaim {
    pub finding: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<String>,
    pub supports: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<Confidence>,
}

/// Claims produced under one hypothesis. Deliberately has no decision field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceSet {
    pub hypothesis: String,
    pub claims: Vec<EvidenceClaim>,
    pub raw_text: String,
    /// Claims whose `supports` named another label and were reassigned.
    #[serde(default)]
    pub coercions: u32,
}

impl EvidenceSet {
    pub fn empty(hypothesis: impl Into<String>, raw_text: impl Into<String>) -> Self {
        Self {
            hypothesis: hypothesis.into(),
            claims: Vec::new(),
            raw_text: raw_text.into(),
            coercions: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlagKind {
    Supported,
    Unsupported,
    Contradictory,
}

impl FlagKind {
    pub fn parse(s: &str) -> Option<FlagKind> {
        match s.trim().to_ascii_lowercase().as_str() {
            "supported" | "grounded" => Some(FlagKind::Supported),
            "unsupported" | "ungrounded" => Some(FlagKind::Unsupported),
            "contradictory" | "contradicted" | "contradiction" => Some(FlagKind::Contradictory),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimFlag {
    pub index: usize,
    pub hypothesis: String,
    pub flag: FlagKind,
}

/// The judge's verdict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adjudication {
    pub final_label: Prediction,
    pub claim_flags: Vec<ClaimFlag>,
    pub rationale: String,
    pub raw_text: String,
}

/// How a decision was pulled out of model text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extraction {
    Structured,
    KeywordFallback,
    RepairPass,
    /// Ambiguous and no repair call was allowed.
    Unresolved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Live,
    Cache,
    Replay,
    Simulated,
}

/// One model call as persisted in a run record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub role: Role,
    pub request_hash: String,
    pub response_text: String,
    pub latency_ms: u64,
    pub provenance: Provenance,
    /// Transport attempts used; anything above 1 marks a retried call.
    pub attempts: u32,
}

impl Exchange {
    pub fn from_cache(&self) -> bool {
        matches!(self.provenance, Provenance::Cache | Provenance::Replay)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CareArtifacts {
    pub evidence_a: EvidenceSet,
    pub evidence_b: EvidenceSet,
    pub adjudication: Adjudication,
}

/// One pipeline's full outcome for one study.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub study_id: String,
    pub pipeline_id: String,
    pub truth: String,
    pub prediction: Prediction,
    pub extraction: Extraction,
    pub exchanges: Vec<Exchange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed: Option<CareArtifacts>,
    pub seed: u64,
    /// Unix milliseconds; only set when a live backend answered a call.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl RunRecord {
    /// Exchanges that count toward the compute budget (repairs excluded).
    pub fn budget_calls(&self) -> usize {
        self.exchanges.iter().filter(|e| e.role != Role::Repair).count()
    }

    pub fn retried(&self) -> bool {
        self.exchanges.iter().any(|e| e.attempts > 1)
    }

    pub fn is_correct(&self) -> bool {
        self.prediction.is_correct(&self.truth)
    }
}
