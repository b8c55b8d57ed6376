//! The five evaluation pipelines over any [`ModelBackend`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::backend::transcript::now_ms;
use crate::backend::{BackendError, CallContext, ModelBackend, ModelRequest};
use crate::canonical::derive_seed;
use crate::exec;
use crate::template::{render_prompt, TemplateError};
use crate::types::{
    Adjudication, CareArtifacts, EvidenceSet, Exchange, Extraction, ImagePayload, Prediction, Provenance, Role,
    RunRecord, SamplingParams, Study, TaskError, TaskSpec,
};

pub mod parse;

pub use parse::{
    match_label, parse_claim_flags, parse_decision, parse_evidence, render_evidence, repair_prompt, ParsedDecision,
};

/// Call index offset used for repair calls so they never share a simulator
/// stream with the call they repair.
const REPAIR_INDEX_OFFSET: u32 = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PipelineId {
    Baseline,
    SelfCheck(u32),
    MajorityVote(u32),
    BlindCare,
    Care,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PipelineIdError {
    #[error("unknown pipeline {0:?}")]
    Unknown(String),
    #[error("self_check needs k >= 2 (got {0})")]
    SelfCheckK(u32),
    #[error("majority_vote needs an odd k >= 3 (got {0})")]
    MajorityVoteK(u32),
}

impl PipelineId {
    pub fn self_check(k: u32) -> Result<Self, PipelineIdError> {
        if k < 2 {
            return Err(PipelineIdError::SelfCheckK(k));
        }
        Ok(PipelineId::SelfCheck(k))
    }

    pub fn majority_vote(k: u32) -> Result<Self, PipelineIdError> {
        if k < 3 || k.is_multiple_of(2) {
            return Err(PipelineIdError::MajorityVoteK(k));
        }
        Ok(PipelineId::MajorityVote(k))
    }

    /// Model calls per study, repairs excluded.
    pub fn budget(self) -> usize {
        match self {
            PipelineId::Baseline => 1,
            PipelineId::SelfCheck(k) | PipelineId::MajorityVote(k) => k as usize,
            PipelineId::BlindCare | PipelineId::Care => 3,
        }
    }

    /// Roles whose templates this pipeline renders.
    pub fn template_roles(self) -> &'static [Role] {
        match self {
            PipelineId::Baseline | PipelineId::MajorityVote(_) => &[Role::Baseline],
            PipelineId::SelfCheck(_) => &[Role::Baseline, Role::SelfCheck],
            PipelineId::Care => &[Role::SpecialistA, Role::SpecialistB, Role::Judge],
            PipelineId::BlindCare => &[Role::SpecialistA, Role::SpecialistB, Role::BlindJudge],
        }
    }

    pub fn is_care(self) -> bool {
        matches!(self, PipelineId::Care | PipelineId::BlindCare)
    }
}

impl fmt::Display for PipelineId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineId::Baseline => f.write_str("baseline"),
            PipelineId::SelfCheck(k) => write!(f, "self_check_{k}"),
            PipelineId::MajorityVote(k) => write!(f, "majority_vote_{k}"),
            PipelineId::BlindCare => f.write_str("blind_care"),
            PipelineId::Care => f.write_str("care"),
        }
    }
}

impl FromStr for PipelineId {
    type Err = PipelineIdError;

    /// Accepts the display form; a bare `self_check` / `majority_vote` means k = 3.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        let k_of = |rest: &str| rest.parse::<u32>().map_err(|_| PipelineIdError::Unknown(s.clone()));
        match s.as_str() {
            "baseline" => Ok(PipelineId::Baseline),
            "care" => Ok(PipelineId::Care),
            "blind_care" => Ok(PipelineId::BlindCare),
            "self_check" => PipelineId::self_check(3),
            "majority_vote" => PipelineId::majority_vote(3),
            _ => {
                if let Some(rest) = s.strip_prefix("self_check_") {
                    PipelineId::self_check(k_of(rest)?)
                } else if let Some(rest) = s.strip_prefix("majority_vote_") {
                    PipelineId::majority_vote(k_of(rest)?)
                } else {
                    Err(PipelineIdError::Unknown(s.clone()))
                }
            }
        }
    }
}

impl Serialize for PipelineId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PipelineId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub sampling: SamplingParams,
    /// Master seed; every call's sampling seed is derived from it.
    pub run_seed: u64,
    /// Allow one repair call per ambiguous decision.
    pub repair: bool,
    /// Worker threads across studies; 0 = library default.
    pub width: usize,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            sampling: SamplingParams::default(),
            run_seed: 0,
            repair: true,
            width: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("study {study_id}: {source}")]
    Template { study_id: String, source: TemplateError },
    #[error("study {study_id}, {role} call: {source}")]
    Backend {
        study_id: String,
        role: Role,
        source: BackendError,
    },
}

impl RunError {
    pub fn study_id(&self) -> Option<&str> {
        match self {
            RunError::Task(_) => None,
            RunError::Template { study_id, .. } | RunError::Backend { study_id, .. } => Some(study_id),
        }
    }
}

/// Runs pipelines for one task against one backend.
pub struct Orchestrator<'b> {
    backend: &'b dyn ModelBackend,
    task: TaskSpec,
    settings: RunSettings,
}

// Mutable per-study state: the exchanges issued so far.
struct StudyRun<'s> {
    study: &'s Study,
    exchanges: Vec<Exchange>,
    notes: Vec<String>,
    live: bool,
}

impl<'s> StudyRun<'s> {
    fn new(study: &'s Study) -> Self {
        Self {
            study,
            exchanges: Vec::new(),
            notes: Vec::new(),
            live: false,
        }
    }

    fn push(&mut self, ex: Exchange) {
        self.live |= ex.provenance == Provenance::Live;
        self.exchanges.push(ex);
    }
}

impl<'b> Orchestrator<'b> {
    pub fn new(backend: &'b dyn ModelBackend, task: TaskSpec, settings: RunSettings) -> Self {
        Self {
            backend,
            task,
            settings,
        }
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn settings(&self) -> &RunSettings {
        &self.settings
    }

    /// Checks the task's templates for `pipeline` before any call is made.
    pub fn check(&self, pipeline: PipelineId) -> Result<(), RunError> {
        self.task.validate(pipeline.template_roles())?;
        Ok(())
    }

    /// Runs `pipeline` on every study, calling `on_done` as each finishes.
    /// The returned results are sorted by study id.
    pub fn run_all_with<F>(
        &self,
        pipeline: PipelineId,
        studies: &[Study],
        on_done: F,
    ) -> Result<Vec<Result<RunRecord, RunError>>, RunError>
    where
        F: Fn(&Result<RunRecord, RunError>) + Sync,
    {
        self.check(pipeline)?;
        for s in studies {
            self.task.check_study(s)?;
        }
        let mut results = exec::with_width(self.settings.width, || {
            exec::map_slice(studies, |s| {
                let r = self.run_study(pipeline, s);
                on_done(&r);
                r
            })
        });
        let key = |r: &Result<RunRecord, RunError>| match r {
            Ok(rec) => rec.study_id.clone(),
            Err(e) => e.study_id().unwrap_or_default().to_string(),
        };
        results.sort_by_key(key);
        Ok(results)
    }

    /// Runs `pipeline` on every study and fails on the first study error.
    pub fn run_all(&self, pipeline: PipelineId, studies: &[Study]) -> Result<Vec<RunRecord>, RunError> {
        self.run_all_with(pipeline, studies, |_| {})?.into_iter().collect()
    }

    pub fn run_study(&self, pipeline: PipelineId, study: &Study) -> Result<RunRecord, RunError> {
        let mut run = StudyRun::new(study);
        let (decision, parsed) = match pipeline {
            PipelineId::Baseline => (self.baseline(&mut run)?, None),
            PipelineId::SelfCheck(k) => (self.self_check(&mut run, k)?, None),
            PipelineId::MajorityVote(k) => (self.majority_vote(&mut run, k)?, None),
            PipelineId::Care => self.care(&mut run, false).map(|(d, a)| (d, Some(a)))?,
            PipelineId::BlindCare => self.care(&mut run, true).map(|(d, a)| (d, Some(a)))?,
        };
        let pipeline_id = pipeline.to_string();
        Ok(RunRecord {
            seed: derive_seed(
                self.settings.run_seed,
                &[study.study_id.as_bytes(), pipeline_id.as_bytes()],
            ),
            study_id: study.study_id.clone(),
            pipeline_id,
            truth: study.truth.clone(),
            prediction: decision.label,
            extraction: decision.extraction,
            timestamp_ms: run.live.then(now_ms),
            exchanges: run.exchanges,
            parsed,
            notes: run.notes,
        })
    }

    fn call_seed(&self, study: &Study, role: Role, index: u32) -> u64 {
        derive_seed(
            self.settings.run_seed,
            &[
                study.study_id.as_bytes(),
                role.as_str().as_bytes(),
                &index.to_le_bytes(),
            ],
        )
    }

    fn render(
        &self,
        study: &Study,
        template_role: Role,
        bindings: &BTreeMap<&str, String>,
    ) -> Result<String, RunError> {
        self.task
            .template(template_role)
            .and_then(|t| render_prompt(t, bindings))
            .map_err(|source| RunError::Template {
                study_id: study.study_id.clone(),
                source,
            })
    }

    fn call(
        &self,
        study: &Study,
        role: Role,
        index: u32,
        prompt: String,
        images: Vec<ImagePayload>,
    ) -> Result<Exchange, RunError> {
        let request = ModelRequest {
            role,
            prompt,
            images,
            sampling: SamplingParams {
                seed: Some(self.call_seed(study, role, index)),
                ..self.settings.sampling.clone()
            },
            context: CallContext {
                study_id: study.study_id.clone(),
                call_index: index,
            },
        };
        if role == Role::BlindJudge {
            assert!(request.images.is_empty(), "blind judge request carries images");
        }
        let err = |source: BackendError| RunError::Backend {
            study_id: study.study_id.clone(),
            role,
            source,
        };
        let request_hash = request.hash().map_err(|e| err(e.into()))?;
        let response = self.backend.complete(&request).map_err(err)?;
        Ok(Exchange {
            role,
            request_hash,
            response_text: response.text,
            latency_ms: response.latency_ms,
            provenance: response.provenance,
            attempts: response.attempts,
        })
    }

    fn label_bindings(&self) -> BTreeMap<&'static str, String> {
        BTreeMap::from([
            ("label_a", self.task.label_a.clone()),
            ("label_b", self.task.label_b.clone()),
        ])
    }

    /// Parses a decision, issuing at most one repair call when ambiguous.
    fn decide(
        &self,
        run: &mut StudyRun<'_>,
        raw: &str,
        index: u32,
        images: &[ImagePayload],
    ) -> Result<ParsedDecision, RunError> {
        if let Some(d) = parse_decision(raw, &self.task) {
            return Ok(d);
        }
        if !self.settings.repair {
            run.notes
                .push(format!("call {index}: no unambiguous label; repair disabled"));
            return Ok(ParsedDecision {
                label: Prediction::Abstain,
                extraction: Extraction::Unresolved,
            });
        }
        let ex = self.call(
            run.study,
            Role::Repair,
            REPAIR_INDEX_OFFSET + index,
            repair_prompt(raw, &self.task),
            images.to_vec(),
        )?;
        let label = match parse_decision(&ex.response_text, &self.task) {
            Some(d) => d.label,
            None => {
                run.notes.push(format!("call {index}: repair answer also ambiguous"));
                Prediction::Abstain
            }
        };
        run.push(ex);
        Ok(ParsedDecision {
            label,
            extraction: Extraction::RepairPass,
        })
    }

    fn baseline(&self, run: &mut StudyRun<'_>) -> Result<ParsedDecision, RunError> {
        let prompt = self.render(run.study, Role::Baseline, &self.label_bindings())?;
        let images = run.study.images.clone();
        let ex = self.call(run.study, Role::Baseline, 0, prompt, images.clone())?;
        let raw = ex.response_text.clone();
        run.push(ex);
        self.decide(run, &raw, 0, &images)
    }

    fn self_check(&self, run: &mut StudyRun<'_>, k: u32) -> Result<ParsedDecision, RunError> {
        let images = run.study.images.clone();
        let mut prior: Option<String> = None;
        for i in 0..k {
            let prompt = match &prior {
                None => self.render(run.study, Role::Baseline, &self.label_bindings())?,
                Some(p) => {
                    let mut b = self.label_bindings();
                    b.insert("prior_response", p.clone());
                    self.render(run.study, Role::SelfCheck, &b)?
                }
            };
            let ex = self.call(run.study, Role::SelfCheck, i, prompt, images.clone())?;
            prior = Some(ex.response_text.clone());
            run.push(ex);
        }
        let last = prior.expect("k >= 2");
        self.decide(run, &last, k - 1, &images)
    }

    fn majority_vote(&self, run: &mut StudyRun<'_>, k: u32) -> Result<ParsedDecision, RunError> {
        let prompt = self.render(run.study, Role::Baseline, &self.label_bindings())?;
        let images = run.study.images.clone();
        let mut votes = Vec::with_capacity(k as usize);
        for i in 0..k {
            let ex = self.call(run.study, Role::MajorityVote, i, prompt.clone(), images.clone())?;
            let raw = ex.response_text.clone();
            run.push(ex);
            votes.push(self.decide(run, &raw, i, &images)?);
        }
        let count = |l: &str| votes.iter().filter(|v| v.label.label() == Some(l)).count();
        let (a, b) = (count(&self.task.label_a), count(&self.task.label_b));
        let label = match a.cmp(&b) {
            std::cmp::Ordering::Greater => Prediction::Label(self.task.label_a.clone()),
            std::cmp::Ordering::Less => Prediction::Label(self.task.label_b.clone()),
            std::cmp::Ordering::Equal => {
                run.notes.push(format!("majority vote tied {a}-{b}"));
                Prediction::Abstain
            }
        };
        let extraction = votes
            .iter()
            .map(|v| v.extraction)
            .max_by_key(|e| extraction_rank(*e))
            .unwrap_or(Extraction::Structured);
        Ok(ParsedDecision { label, extraction })
    }

    fn care(&self, run: &mut StudyRun<'_>, blind: bool) -> Result<(ParsedDecision, CareArtifacts), RunError> {
        let study = run.study;
        let task = &self.task;
        let specialist = |role: Role, own: &str, other: &str| -> Result<(Exchange, EvidenceSet), RunError> {
            let bindings = BTreeMap::from([("label_self", own.to_string()), ("label_other", other.to_string())]);
            let prompt = self.render(study, role, &bindings)?;
            let ex = self.call(study, role, 0, prompt, study.images.clone())?;
            let set = parse_evidence(&ex.response_text, own, task);
            Ok((ex, set))
        };
        let (ra, rb) = exec::join(
            || specialist(Role::SpecialistA, &task.label_a, &task.label_b),
            || specialist(Role::SpecialistB, &task.label_b, &task.label_a),
        );
        let (ex_a, evidence_a) = ra?;
        let (ex_b, evidence_b) = rb?;
        run.push(ex_a);
        run.push(ex_b);
        for (name, set) in [("specialist_a", &evidence_a), ("specialist_b", &evidence_b)] {
            if set.claims.is_empty() {
                run.notes.push(format!("{name}: no claims recovered"));
            }
            if set.coercions > 0 {
                run.notes.push(format!(
                    "{name}: {} claim(s) coerced to {}",
                    set.coercions, set.hypothesis
                ));
            }
        }

        let judge_role = if blind { Role::BlindJudge } else { Role::Judge };
        let bindings = BTreeMap::from([
            ("evidence_a", render_evidence('A', &evidence_a)),
            ("evidence_b", render_evidence('B', &evidence_b)),
        ]);
        let prompt = self.render(study, judge_role, &bindings)?;
        let images = if blind { Vec::new() } else { study.images.clone() };
        let ex = self.call(study, judge_role, 0, prompt, images.clone())?;
        let raw = ex.response_text.clone();
        run.push(ex);
        let (claim_flags, rationale, dropped) = parse_claim_flags(&raw, task, &evidence_a, &evidence_b);
        if !dropped.is_empty() {
            run.notes
                .push(format!("judge: {} flag(s) dropped as unmatched", dropped.len()));
        }
        let decision = self.decide(run, &raw, 0, &images)?;
        let adjudication = Adjudication {
            final_label: decision.label.clone(),
            claim_flags,
            rationale,
            raw_text: raw,
        };
        Ok((
            decision,
            CareArtifacts {
                evidence_a,
                evidence_b,
                adjudication,
            },
        ))
    }
}

fn extraction_rank(e: Extraction) -> u8 {
    match e {
        Extraction::Structured => 0,
        Extraction::KeywordFallback => 1,
        Extraction::RepairPass => 2,
        Extraction::Unresolved => 3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::sim::{synthetic_studies, SimConfig, SimulatorBackend};
    use crate::backend::ModelResponse;
    use crate::template::builtin_task;
    use std::sync::Mutex;

    /// Answers by role from a fixed script and records every request.
    struct Scripted {
        replies: Mutex<BTreeMap<Role, Vec<String>>>,
        seen: Mutex<Vec<ModelRequest>>,
    }

    impl Scripted {
        fn new(replies: &[(Role, &[&str])]) -> Self {
            Self {
                replies: Mutex::new(
                    replies
                        .iter()
                        .map(|(r, v)| (*r, v.iter().rev().map(|s| s.to_string()).collect()))
                        .collect(),
                ),
                seen: Mutex::new(Vec::new()),
            }
        }
    }

    impl ModelBackend for Scripted {
        fn id(&self) -> String {
            "scripted".into()
        }

        fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
            self.seen.lock().unwrap().push(request.clone());
            let text = self
                .replies
                .lock()
                .unwrap()
                .get_mut(&request.role)
                .and_then(Vec::pop)
                .ok_or_else(|| BackendError::ReplayMiss(request.role.to_string()))?;
            Ok(ModelResponse {
                text,
                latency_ms: 1,
                provenance: Provenance::Replay,
                attempts: 1,
            })
        }
    }

    fn derm_study() -> Study {
        Study {
            study_id: "s1".into(),
            images: vec![ImagePayload::new("image/png", b"px".to_vec())],
            truth: "atypical nevus".into(),
            report_text: None,
            meta: BTreeMap::new(),
        }
    }

    fn run(pipeline: PipelineId, replies: &[(Role, &[&str])]) -> (RunRecord, Vec<ModelRequest>) {
        let backend = Scripted::new(replies);
        let task = builtin_task("melanoma_vs_atypical_nevus").unwrap();
        let orch = Orchestrator::new(&backend, task, RunSettings::default());
        let rec = orch.run_study(pipeline, &derm_study()).unwrap();
        let seen = backend.seen.into_inner().unwrap();
        (rec, seen)
    }

    #[test]
    fn pipeline_ids_round_trip() {
        for s in [
            "baseline",
            "self_check_2",
            "self_check_3",
            "majority_vote_3",
            "blind_care",
            "care",
        ] {
            assert_eq!(s.parse::<PipelineId>().unwrap().to_string(), s);
        }
        assert!("self_check_1".parse::<PipelineId>().is_err());
        assert!("majority_vote_4".parse::<PipelineId>().is_err());
        assert!("debate".parse::<PipelineId>().is_err());
        assert_eq!(
            serde_json::to_string(&PipelineId::MajorityVote(5)).unwrap(),
            "\"majority_vote_5\""
        );
    }

    #[test]
    fn baseline_final_marker() {
        let (rec, _) = run(PipelineId::Baseline, &[(Role::Baseline, &["FINAL: melanoma"])]);
        assert_eq!(rec.prediction, Prediction::Label("melanoma".into()));
        assert_eq!(rec.extraction, Extraction::Structured);
        assert_eq!(rec.exchanges.len(), 1);
    }

    #[test]
    fn baseline_keyword_fallback() {
        let (rec, _) = run(
            PipelineId::Baseline,
            &[(Role::Baseline, &["The lesion is consistent with atypical nevus."])],
        );
        assert_eq!(rec.prediction, Prediction::Label("atypical nevus".into()));
        assert_eq!(rec.extraction, Extraction::KeywordFallback);
    }

    #[test]
    fn ambiguous_then_ambiguous_repair_abstains() {
        let (rec, seen) = run(
            PipelineId::Baseline,
            &[
                (Role::Baseline, &["melanoma or atypical nevus, hard to say"]),
                (Role::Repair, &["still melanoma or atypical nevus"]),
            ],
        );
        assert_eq!(rec.prediction, Prediction::Abstain);
        assert_eq!(rec.extraction, Extraction::RepairPass);
        assert_eq!(rec.exchanges.len(), 2);
        assert_eq!(rec.budget_calls(), 1);
        assert!(seen[1]
            .prompt
            .ends_with("Answer with exactly one label: melanoma or atypical nevus."));
    }

    #[test]
    fn repair_resolves() {
        let (rec, _) = run(
            PipelineId::Baseline,
            &[
                (Role::Baseline, &["melanoma? atypical nevus?"]),
                (Role::Repair, &["melanoma"]),
            ],
        );
        assert_eq!(rec.prediction, Prediction::Label("melanoma".into()));
        assert_eq!(rec.extraction, Extraction::RepairPass);
    }

    #[test]
    fn repair_disabled_abstains_without_extra_call() {
        let backend = Scripted::new(&[(Role::Baseline, &["melanoma or atypical nevus"])]);
        let task = builtin_task("melanoma_vs_atypical_nevus").unwrap();
        let settings = RunSettings {
            repair: false,
            ..RunSettings::default()
        };
        let rec = Orchestrator::new(&backend, task, settings)
            .run_study(PipelineId::Baseline, &derm_study())
            .unwrap();
        assert_eq!(rec.prediction, Prediction::Abstain);
        assert_eq!(rec.extraction, Extraction::Unresolved);
        assert_eq!(rec.exchanges.len(), 1);
    }

    #[test]
    fn self_check_last_pass_wins_and_sees_prior_verbatim() {
        let first = "FINAL: melanoma\nbecause of streaks";
        let (rec, seen) = run(
            PipelineId::SelfCheck(3),
            &[(Role::SelfCheck, &[first, "FINAL: melanoma", "FINAL: atypical nevus"])],
        );
        assert_eq!(rec.prediction, Prediction::Label("atypical nevus".into()));
        assert_eq!(rec.exchanges.len(), 3);
        assert!(seen[1].prompt.contains(first));
        assert!(!seen[0].prompt.contains("previous answer"));
    }

    #[test]
    fn self_check_two_passes() {
        let (rec, _) = run(
            PipelineId::SelfCheck(2),
            &[(Role::SelfCheck, &["FINAL: melanoma", "FINAL: melanoma"])],
        );
        assert_eq!(rec.prediction, Prediction::Label("melanoma".into()));
        assert_eq!(rec.budget_calls(), 2);
    }

    #[test]
    fn majority_vote_rules() {
        let cases: [(&[&str], Prediction); 3] = [
            (
                &["FINAL: melanoma", "FINAL: melanoma", "FINAL: atypical nevus"],
                Prediction::Label("melanoma".into()),
            ),
            (
                &["FINAL: melanoma", "no idea", "FINAL: atypical nevus"],
                Prediction::Abstain,
            ),
            (
                &[
                    "FINAL: atypical nevus",
                    "FINAL: atypical nevus",
                    "FINAL: atypical nevus",
                ],
                Prediction::Label("atypical nevus".into()),
            ),
        ];
        for (votes, want) in cases {
            let backend = Scripted::new(&[(Role::MajorityVote, votes)]);
            let task = builtin_task("melanoma_vs_atypical_nevus").unwrap();
            let settings = RunSettings {
                repair: false,
                ..RunSettings::default()
            };
            let rec = Orchestrator::new(&backend, task, settings)
                .run_study(PipelineId::MajorityVote(3), &derm_study())
                .unwrap();
            assert_eq!(rec.prediction, want, "{votes:?}");
            assert_eq!(rec.exchanges.len(), 3);
            let seeds: std::collections::BTreeSet<_> =
                backend.seen.lock().unwrap().iter().map(|r| r.sampling.seed).collect();
            assert_eq!(seeds.len(), 3, "each vote needs its own seed");
        }
    }

    const SPEC_A: &str = r#"{"claims":[{"finding":"marked internal chaotic asymmetry","supports":"melanoma"},{"finding":"irregular streaks","supports":"melanoma"}]}"#;
    const SPEC_B: &str = r#"{"claims":[{"finding":"overall symmetric architecture","supports":"atypical nevus"}]}"#;
    const JUDGE: &str = r#"{"claim_flags":[{"side":"a","index":0,"flag":"contradictory"},{"side":"b","index":0,"flag":"supported"}],"rationale":"symmetric overall","final_diagnosis":"atypical nevus"}"#;

    #[test]
    fn care_flags_and_images() {
        let (rec, seen) = run(
            PipelineId::Care,
            &[
                (Role::SpecialistA, &[SPEC_A]),
                (Role::SpecialistB, &[SPEC_B]),
                (Role::Judge, &[JUDGE]),
            ],
        );
        assert_eq!(rec.prediction, Prediction::Label("atypical nevus".into()));
        assert_eq!(rec.exchanges.len(), 3);
        let art = rec.parsed.unwrap();
        assert_eq!(art.adjudication.claim_flags.len(), 2);
        assert_eq!(art.evidence_a.claims.len(), 2);
        let judge = seen.iter().find(|r| r.role == Role::Judge).unwrap();
        assert_eq!(judge.images.len(), 1);
        assert!(judge.prompt.contains("[0] marked internal chaotic asymmetry"));
        assert!(judge.prompt.contains("[0] overall symmetric architecture"));
        let spec_a = seen.iter().find(|r| r.role == Role::SpecialistA).unwrap();
        assert!(spec_a.prompt.contains("Your assigned hypothesis is: melanoma."));
    }

    #[test]
    fn blind_judge_gets_no_images() {
        let (rec, seen) = run(
            PipelineId::BlindCare,
            &[
                (Role::SpecialistA, &[SPEC_A]),
                (Role::SpecialistB, &[SPEC_B]),
                (Role::BlindJudge, &[JUDGE]),
            ],
        );
        assert_eq!(rec.budget_calls(), 3);
        let judge = seen.iter().find(|r| r.role == Role::BlindJudge).unwrap();
        assert!(judge.images.is_empty());
    }

    #[test]
    fn unparseable_specialists_still_reach_the_judge() {
        let (rec, seen) = run(
            PipelineId::Care,
            &[
                (Role::SpecialistA, &["I refuse."]),
                (Role::SpecialistB, &["..."]),
                (Role::Judge, &[r#"{"final_diagnosis":"melanoma"}"#]),
            ],
        );
        assert_eq!(rec.prediction, Prediction::Label("melanoma".into()));
        assert_eq!(rec.notes.iter().filter(|n| n.contains("no claims")).count(), 2);
        let judge = seen.iter().find(|r| r.role == Role::Judge).unwrap();
        assert_eq!(judge.prompt.matches("(no claims)").count(), 2);
    }

    #[test]
    fn judge_adds_no_evidence() {
        let task = builtin_task("melanoma_vs_atypical_nevus").unwrap();
        let before = parse_evidence(SPEC_A, "melanoma", &task);
        let (rec, _) = run(
            PipelineId::Care,
            &[
                (Role::SpecialistA, &[SPEC_A]),
                (Role::SpecialistB, &[SPEC_B]),
                (Role::Judge, &[JUDGE]),
            ],
        );
        assert_eq!(rec.parsed.unwrap().evidence_a, before);
    }

    #[test]
    fn backend_failure_is_a_study_error() {
        let backend = Scripted::new(&[]);
        let task = builtin_task("melanoma_vs_atypical_nevus").unwrap();
        let err = Orchestrator::new(&backend, task, RunSettings::default())
            .run_study(PipelineId::Baseline, &derm_study())
            .unwrap_err();
        assert_eq!(err.study_id(), Some("s1"));
    }

    #[test]
    fn run_all_sorts_and_is_order_independent() {
        let task = builtin_task("edema_vs_pneumonia").unwrap();
        let studies = synthetic_studies(40, &task);
        let sim = SimulatorBackend::new(SimConfig::default(), &task, &studies).unwrap();
        let orch = Orchestrator::new(&sim, task, RunSettings::default());
        let mut reversed = studies.clone();
        reversed.reverse();
        for p in [
            PipelineId::Baseline,
            PipelineId::MajorityVote(3),
            PipelineId::SelfCheck(3),
            PipelineId::Care,
        ] {
            let a = orch.run_all(p, &studies).unwrap();
            let b = orch.run_all(p, &reversed).unwrap();
            assert_eq!(a, b);
            assert!(a.windows(2).all(|w| w[0].study_id < w[1].study_id));
            assert!(a
                .iter()
                .all(|r| r.budget_calls() == p.budget() && r.exchanges.len() == p.budget()));
        }
    }

    #[test]
    fn foreign_truth_is_rejected_before_any_call() {
        let backend = Scripted::new(&[]);
        let task = builtin_task("edema_vs_pneumonia").unwrap();
        let orch = Orchestrator::new(&backend, task, RunSettings::default());
        assert!(matches!(
            orch.run_all(PipelineId::Baseline, &[derm_study()]),
            Err(RunError::Task(TaskError::TruthOutsideTask { .. }))
        ));
        assert!(backend.seen.lock().unwrap().is_empty());
    }
}
