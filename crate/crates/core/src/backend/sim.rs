//! Seeded stochastic stand-in for a multimodal model.
//!
//! Single-agent calls: each study draws a latent difficulty `d ~ Beta(alpha, beta)`
//! once; every call is then correct with probability `d`, independently given
//! `d`. Repeat calls on the same study are therefore positively correlated.
//!
//! Specialists: each of `n_claims` claims is grounded with probability
//! `g_true` when the specialist's hypothesis is the truth, else `g_false`.
//! Groundedness stays latent; the emitted text never reveals it.
//!
//! Judge: scores each side as the number of claims it assesses as grounded
//! (assessment correct with probability `judge_sensitivity`, else inverted)
//! plus Gaussian noise, picks the higher score (ties go to `label_a`) and flags
//! every claim it assessed as ungrounded as unsupported.
//!
//! Every random draw comes from a ChaCha stream keyed by
//! `(master_seed, study_id, role, call_index)`, so results do not depend on
//! call order or thread count.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{BackendError, ModelBackend, ModelRequest, ModelResponse, Provenance};
use crate::canonical::{content_hash, derive_seed};
use crate::types::{ImagePayload, Role, Study, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub alpha: f64,
    pub beta: f64,
    pub n_claims: u32,
    pub g_true: f64,
    pub g_false: f64,
    pub judge_sensitivity: f64,
    pub judge_noise_sd: f64,
    /// Sensitivity of a judge that sees only the text arguments.
    #[serde(default = "default_blind_sensitivity")]
    pub blind_judge_sensitivity: f64,
    #[serde(default)]
    pub master_seed: u64,
}

fn default_blind_sensitivity() -> f64 {
    0.65
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 1.0,
            n_claims: 4,
            g_true: 0.7,
            g_false: 0.4,
            judge_sensitivity: 0.8,
            judge_noise_sd: 0.5,
            blind_judge_sensitivity: default_blind_sensitivity(),
            master_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimConfigError {
    #[error("alpha and beta must be positive and finite (got {0}, {1})")]
    BetaShape(f64, f64),
    #[error("n_claims must be positive")]
    NoClaims,
    #[error("{0} must lie in [0, 1] (got {1})")]
    Probability(&'static str, f64),
    #[error("g_true ({0}) must exceed g_false ({1}); otherwise the task carries no signal")]
    NoSignal(f64, f64),
    #[error("judge_noise_sd must be non-negative and finite (got {0})")]
    NoiseSd(f64),
}

impl SimConfig {
    /// The noiseless limit: perfectly separable evidence and a perfect judge.
    pub fn noiseless() -> Self {
        Self {
            g_true: 1.0,
            g_false: 0.0,
            judge_sensitivity: 1.0,
            judge_noise_sd: 0.0,
            blind_judge_sensitivity: 1.0,
            n_claims: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimConfigError> {
        let pos = |x: f64| x.is_finite() && x > 0.0;
        if !pos(self.alpha) || !pos(self.beta) {
            return Err(SimConfigError::BetaShape(self.alpha, self.beta));
        }
        if self.n_claims == 0 {
            return Err(SimConfigError::NoClaims);
        }
        for (name, p) in [
            ("g_true", self.g_true),
            ("g_false", self.g_false),
            ("judge_sensitivity", self.judge_sensitivity),
            ("blind_judge_sensitivity", self.blind_judge_sensitivity),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SimConfigError::Probability(name, p));
            }
        }
        if self.g_true <= self.g_false {
            return Err(SimConfigError::NoSignal(self.g_true, self.g_false));
        }
        if !(self.judge_noise_sd.is_finite() && self.judge_noise_sd >= 0.0) {
            return Err(SimConfigError::NoiseSd(self.judge_noise_sd));
        }
        Ok(())
    }

    fn stream(&self, study_id: &str, tag: &str, call_index: u32) -> ChaCha8Rng {
        let seed = derive_seed(
            self.master_seed,
            &[study_id.as_bytes(), tag.as_bytes(), &call_index.to_le_bytes()],
        );
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Per-study probability that a single-agent call is correct.
    pub fn difficulty(&self, study_id: &str) -> f64 {
        let beta = Beta::new(self.alpha, self.beta).expect("validated shape");
        beta.sample(&mut self.stream(study_id, "difficulty", 0))
    }

    /// Whether single-agent call `(role, call_index)` on this study is correct.
    pub fn single_agent_correct(&self, study_id: &str, role: Role, call_index: u32) -> bool {
        let d = self.difficulty(study_id);
        self.stream(study_id, role.as_str(), call_index).random::<f64>() < d
    }

    /// Latent groundedness of each claim a specialist emits.
    pub fn specialist_grounding(&self, study_id: &str, role: Role, matches_truth: bool) -> Vec<bool> {
        let g = if matches_truth { self.g_true } else { self.g_false };
        let mut rng = self.stream(study_id, role.as_str(), 0);
        (0..self.n_claims).map(|_| rng.random::<f64>() < g).collect()
    }

    /// The judge's view of both latent evidence sets.
    pub fn judge(
        &self,
        study_id: &str,
        role: Role,
        call_index: u32,
        grounded_a: &[bool],
        grounded_b: &[bool],
    ) -> JudgeLatent {
        let sensitivity = if role == Role::BlindJudge {
            self.blind_judge_sensitivity
        } else {
            self.judge_sensitivity
        };
        let mut rng = self.stream(study_id, role.as_str(), call_index);
        let mut assess = |grounded: &[bool]| -> Vec<bool> {
            grounded
                .iter()
                .map(|&g| if rng.random::<f64>() < sensitivity { g } else { !g })
                .collect()
        };
        let assessed_a = assess(grounded_a);
        let assessed_b = assess(grounded_b);
        let (noise_a, noise_b) = if self.judge_noise_sd > 0.0 {
            let normal = Normal::new(0.0, self.judge_noise_sd).expect("validated sd");
            (normal.sample(&mut rng), normal.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        let count = |v: &[bool]| v.iter().filter(|&&x| x).count() as f64;
        JudgeLatent {
            score_a: count(&assessed_a) + noise_a,
            score_b: count(&assessed_b) + noise_b,
            assessed_a,
            assessed_b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeLatent {
    pub assessed_a: Vec<bool>,
    pub assessed_b: Vec<bool>,
    pub score_a: f64,
    pub score_b: f64,
}

impl JudgeLatent {
    /// `true` when the judge picks `label_a`; exact ties go to `label_a`.
    pub fn picks_a(&self) -> bool {
        self.score_a >= self.score_b
    }
}

/// Simulator behind the [`ModelBackend`] contract. Knows the truth of every
/// study it may be asked about.
pub struct SimulatorBackend {
    config: SimConfig,
    label_a: String,
    label_b: String,
    truths: HashMap<String, String>,
}

impl SimulatorBackend {
    pub fn new(config: SimConfig, task: &TaskSpec, studies: &[Study]) -> Result<Self, SimConfigError> {
        config.validate()?;
        Ok(Self {
            label_a: task.label_a.clone(),
            label_b: task.label_b.clone(),
            truths: studies.iter().map(|s| (s.study_id.clone(), s.truth.clone())).collect(),
            config,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    fn truth(&self, study_id: &str) -> Result<&str, BackendError> {
        self.truths
            .get(study_id)
            .map(String::as_str)
            .ok_or_else(|| BackendError::Config(format!("simulator has no study {study_id:?}")))
    }

    fn specialist_text(&self, hypothesis: &str) -> String {
        let claims: Vec<_> = (1..=self.config.n_claims)
            .map(|i| {
                json!({
                    "finding": format!("simulated finding {i} consistent with {hypothesis}"),
                    "supports": hypothesis,
                })
            })
            .collect();
        json!({ "claims": claims }).to_string()
    }

    fn judge_text(&self, study_id: &str, truth: &str, role: Role, call_index: u32) -> String {
        let a_true = truth == self.label_a;
        let ga = self.config.specialist_grounding(study_id, Role::SpecialistA, a_true);
        let gb = self.config.specialist_grounding(study_id, Role::SpecialistB, !a_true);
        let latent = self.config.judge(study_id, role, call_index, &ga, &gb);
        let mut flags = Vec::new();
        for (side, assessed) in [("a", &latent.assessed_a), ("b", &latent.assessed_b)] {
            for (i, &ok) in assessed.iter().enumerate() {
                if !ok {
                    flags.push(json!({"side": side, "index": i, "flag": "unsupported"}));
                }
            }
        }
        let winner = if latent.picks_a() { &self.label_a } else { &self.label_b };
        json!({
            "claim_flags": flags,
            "rationale": format!(
                "consistency scores {:.3} ({}) vs {:.3} ({})",
                latent.score_a, self.label_a, latent.score_b, self.label_b
            ),
            "final_diagnosis": winner,
        })
        .to_string()
    }
}

impl ModelBackend for SimulatorBackend {
    fn id(&self) -> String {
        format!("simulator:{}", &content_hash(&self.config)[..16])
    }

    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        request.validate()?;
        let study_id = request.context.study_id.as_str();
        let call_index = request.context.call_index;
        let truth = self.truth(study_id)?;
        let text = match request.role {
            Role::SpecialistA => self.specialist_text(&self.label_a),
            Role::SpecialistB => self.specialist_text(&self.label_b),
            Role::Judge | Role::BlindJudge => self.judge_text(study_id, truth, request.role, call_index),
            Role::Baseline | Role::SelfCheck | Role::MajorityVote | Role::Repair => {
                let label = if self.config.single_agent_correct(study_id, request.role, call_index) {
                    truth
                } else if truth == self.label_a {
                    &self.label_b
                } else {
                    &self.label_a
                };
                json!({ "final_diagnosis": label }).to_string()
            }
        };
        Ok(ModelResponse {
            text,
            latency_ms: 0,
            provenance: Provenance::Simulated,
            attempts: 1,
        })
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Synthetic study number `i`: truth alternates (`label_a` at even `i`) and
/// the only image is an opaque payload made of the study id.
pub fn synthetic_study(i: usize, task: &TaskSpec) -> Study {
    let study_id = format!("sim-{i:07}");
    Study {
        images: vec![ImagePayload::new("application/x-simulated", study_id.as_bytes())],
        truth: if i.is_multiple_of(2) {
            task.label_a.clone()
        } else {
            task.label_b.clone()
        },
        study_id,
        report_text: None,
        meta: Default::default(),
    }
}

/// Studies `0..n` of [`synthetic_study`].
pub fn synthetic_studies(n: usize, task: &TaskSpec) -> Vec<Study> {
    (0..n).map(|i| synthetic_study(i, task)).collect()
}
