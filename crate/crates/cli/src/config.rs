//! Run configuration files (TOML).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use care_core::backend::{HttpConfig, RetryPolicy, SimConfig};
use care_core::curation::PhraseList;
use care_core::orchestrator::{PipelineId, RunSettings};
use care_core::template::{builtin_task, default_templates};
use care_core::{Role, SamplingParams, TaskSpec};
use serde::{Deserialize, Serialize};

/// A built-in task id, or a custom pair that uses the default templates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskRef {
    Builtin(String),
    Custom {
        id: String,
        label_a: String,
        label_b: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BackendConfig {
    Simulator {
        #[serde(default)]
        simulator: SimConfig,
    },
    Replay {
        transcript: PathBuf,
    },
    Http {
        /// Response cache; defaults to `transcript.jsonl` in the run directory.
        #[serde(default)]
        transcript: Option<PathBuf>,
        http: HttpConfig,
        #[serde(default)]
        retry: RetryPolicy,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskRef,
    /// Study list: JSON lines of studies, or a curated manifest.
    pub studies: PathBuf,
    pub pipelines: Vec<PipelineId>,
    #[serde(default)]
    pub run_seed: u64,
    /// Worker threads across studies; 0 = one per core.
    #[serde(default)]
    pub width: usize,
    #[serde(default = "yes")]
    pub repair: bool,
    /// Positive class for F1 and Youden; defaults to `label_a`.
    #[serde(default)]
    pub positive_class: Option<String>,
    #[serde(default)]
    pub sampling: SamplingParams,
    /// Per-role template file overrides.
    #[serde(default)]
    pub templates: BTreeMap<Role, PathBuf>,
    /// Hedge phrase list used during curation, for provenance.
    #[serde(default)]
    pub phrase_list: Option<PathBuf>,
    pub backend: BackendConfig,
}

fn yes() -> bool {
    true
}

impl RunConfig {
    /// Reads a config; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.studies);
        cfg.templates.values_mut().for_each(fix);
        if let Some(p) = cfg.phrase_list.as_mut() {
            fix(p);
        }
        match &mut cfg.backend {
            BackendConfig::Replay { transcript } => fix(transcript),
            BackendConfig::Http {
                transcript: Some(t), ..
            } => fix(t),
            _ => {}
        }
        if cfg.pipelines.is_empty() {
            bail!("config lists no pipelines");
        }
        Ok(cfg)
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        let mut task = match &self.task {
            TaskRef::Builtin(id) => builtin_task(id)?,
            TaskRef::Custom { id, label_a, label_b } => TaskSpec {
                task_id: id.clone(),
                label_a: label_a.clone(),
                label_b: label_b.clone(),
                prompt_templates: default_templates(),
            },
        };
        for (role, path) in &self.templates {
            let text =
                std::fs::read_to_string(path).with_context(|| format!("reading {role} template {}", path.display()))?;
            task.prompt_templates.insert(*role, text);
        }
        for p in &self.pipelines {
            task.validate(p.template_roles())?;
        }
        Ok(task)
    }

    pub fn positive_class(&self, task: &TaskSpec) -> Result<String> {
        match &self.positive_class {
            None => Ok(task.label_a.clone()),
            Some(p) if p == &task.label_a || p == &task.label_b => Ok(p.clone()),
            Some(p) => bail!(
                "positive_class {p:?} is neither {:?} nor {:?}",
                task.label_a,
                task.label_b
            ),
        }
    }

    pub fn phrase_list(&self) -> Result<PhraseList> {
        Ok(match &self.phrase_list {
            Some(p) => PhraseList::load(p)?,
            None => PhraseList::default_list(),
        })
    }

    pub fn settings(&self) -> RunSettings {
        RunSettings {
            sampling: self.sampling.clone(),
            run_seed: self.run_seed,
            repair: self.repair,
            width: self.width,
        }
    }
}
