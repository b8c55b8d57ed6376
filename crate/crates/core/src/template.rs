//! Prompt templates: `{name}` placeholder rendering and the built-in tasks.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use regex::Regex;

use crate::canonical::sha256_hex;
use crate::types::{Role, TaskSpec};

/// Every placeholder name the harness ever binds.
pub const KNOWN_PLACEHOLDERS: [&str; 7] = [
    "label_self",
    "label_other",
    "label_a",
    "label_b",
    "evidence_a",
    "evidence_b",
    "prior_response",
];

pub const SPECIALIST_TEMPLATE: &str = include_str!("../templates/specialist.txt");
pub const JUDGE_TEMPLATE: &str = include_str!("../templates/judge.txt");
pub const BLIND_JUDGE_TEMPLATE: &str = include_str!("../templates/blind_judge.txt");
pub const BASELINE_TEMPLATE: &str = include_str!("../templates/baseline.txt");
pub const SELF_CHECK_TEMPLATE: &str = include_str!("../templates/self_check.txt");

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("no binding for placeholder {{{0}}}")]
    MissingBinding(String),
    #[error("prompt still contains placeholder {{{0}}}")]
    Unresolved(String),
    #[error("no template for role {0}")]
    MissingTemplate(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("valid regex"))
}

/// Distinct placeholder names in `template`, in order of first appearance.
pub fn placeholders(template: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    placeholder_re()
        .captures_iter(template)
        .map(|c| c[1].to_string())
        .filter(|name| seen.insert(name.clone()))
        .collect()
}

/// Known placeholder tokens still present in a rendered prompt.
///
/// Restricted to the harness vocabulary so that braces inside model-written
/// evidence never trip the check.
pub fn unresolved_placeholders(prompt: &str) -> Vec<String> {
    placeholders(prompt)
        .into_iter()
        .filter(|p| KNOWN_PLACEHOLDERS.contains(&p.as_str()))
        .collect()
}

/// Replaces every `{name}` token in one pass; substituted text is not rescanned.
pub fn render_prompt(template: &str, bindings: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
    let used = placeholders(template);
    for name in &used {
        if !bindings.contains_key(name.as_str()) {
            return Err(TemplateError::MissingBinding(name.clone()));
        }
    }
    for name in bindings.keys() {
        if !used.iter().any(|u| u == name) {
            log::warn!("binding {{{name}}} not used by template; ignored");
        }
    }
    let out = placeholder_re().replace_all(template, |c: &regex::Captures<'_>| bindings[&c[1]].clone());
    Ok(out.into_owned())
}

/// The shipped template for every role that owns one.
pub fn default_templates() -> BTreeMap<Role, String> {
    [
        (Role::SpecialistA, SPECIALIST_TEMPLATE),
        (Role::SpecialistB, SPECIALIST_TEMPLATE),
        (Role::Judge, JUDGE_TEMPLATE),
        (Role::BlindJudge, BLIND_JUDGE_TEMPLATE),
        (Role::Baseline, BASELINE_TEMPLATE),
        (Role::SelfCheck, SELF_CHECK_TEMPLATE),
    ]
    .into_iter()
    .map(|(r, t)| (r, t.to_string()))
    .collect()
}

/// Ids of the tasks that ship with default templates.
pub const BUILTIN_TASKS: [&str; 2] = ["melanoma_vs_atypical_nevus", "edema_vs_pneumonia"];

/// A built-in task. `label_a` is the first-listed disease, which is also the
/// default positive class for F1.
pub fn builtin_task(task_id: &str) -> Result<TaskSpec, TemplateError> {
    let (a, b) = match task_id {
        "melanoma_vs_atypical_nevus" => ("melanoma", "atypical nevus"),
        "edema_vs_pneumonia" => ("edema", "pneumonia"),
        other => return Err(TemplateError::UnknownTask(other.to_string())),
    };
    Ok(TaskSpec {
        task_id: task_id.to_string(),
        label_a: a.to_string(),
        label_b: b.to_string(),
        prompt_templates: default_templates(),
    })
}

/// Per-role SHA-256 of a task's templates, stamped into run manifests.
pub fn template_hashes(task: &TaskSpec) -> BTreeMap<String, String> {
    task.prompt_templates
        .iter()
        .map(|(role, text)| (role.to_string(), sha256_hex(text.as_bytes())))
        .collect()
}
