//! Subcommand implementations. `main` only parses arguments and maps the
//! outcomes here to exit codes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use care_core::backend::sim::synthetic_study;
use care_core::backend::{
    BackendError, HttpBackend, ModelBackend, ModelRequest, ModelResponse, ReplayBackend, SimConfig, SimulatorBackend,
    TranscriptStore,
};
use care_core::canonical::{content_hash, short_hash, to_canonical_json};
use care_core::curation::{self, PhraseList};
use care_core::orchestrator::{Orchestrator, PipelineId, RunSettings};
use care_core::template::{builtin_task, template_hashes};
use care_core::{Prediction, RunRecord, SamplingParams, Study};
use serde::Serialize;

use crate::cases::{select_cases, CaseFilter, QualitativeCase};
use crate::config::{BackendConfig, RunConfig};
use crate::report::{build_report, render_markdown, ReportOptions, ReportTable, RowInput, RunProvenance};
use crate::rundir::{
    errors_path, load_run, read_manifest, read_records, records_path, to_stable_json, write_atomic, write_manifest,
    write_records_sorted, RecordAppender, RunManifest,
};
use crate::studies::{id_set_hash, load_studies, study_set_hash};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

// ---------------------------------------------------------------- curate

pub struct CurateArgs {
    pub manifest: PathBuf,
    pub task: String,
    pub seed: u64,
    pub phrases: Option<PathBuf>,
    pub tolerance: usize,
    pub out: PathBuf,
}

/// Writes the curated manifest to `out` and the report next to it as
/// `<out stem>.report.json`.
pub fn cmd_curate(args: &CurateArgs) -> Result<curation::CurationReport> {
    let task = builtin_task(&args.task)?;
    let phrases = match &args.phrases {
        Some(p) => PhraseList::load(p)?,
        None => PhraseList::default_list(),
    };
    let records = curation::read_manifest(&args.manifest)?;
    let curated = curation::curate(
        &records,
        &task.label_a,
        &task.label_b,
        &phrases,
        args.seed,
        args.tolerance,
    )?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    curation::write_manifest(&args.out, &curated.records)?;
    write_atomic(&report_path_for(&args.out), to_stable_json(&curated.report)?.as_bytes())?;
    Ok(curated.report)
}

pub fn report_path_for(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}.report.json"))
}

// ---------------------------------------------------------------- run

/// Counts calls reaching the wrapped backend.
struct Counting<'a> {
    inner: &'a dyn ModelBackend,
    calls: AtomicUsize,
}

impl ModelBackend for Counting<'_> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.complete(request)
    }

    fn is_deterministic(&self) -> bool {
        self.inner.is_deterministic()
    }
}

#[derive(Serialize)]
struct ConfigDigest<'a> {
    task_id: &'a str,
    label_a: &'a str,
    label_b: &'a str,
    template_hashes: &'a BTreeMap<String, String>,
    positive_class: &'a str,
    sampling: &'a SamplingParams,
    run_seed: u64,
    repair: bool,
    backend: String,
    study_set_hash: &'a str,
    phrase_list_hash: &'a str,
}

#[derive(Debug, Clone)]
pub struct RunArgs {
    pub config: PathBuf,
    /// Parent of content-addressed run directories.
    pub out: PathBuf,
    /// Explicit run directory; overrides `out`.
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOutcome {
    pub pipeline: String,
    pub skipped: usize,
    pub completed: usize,
    pub failed: Vec<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub config_hash: String,
    /// Calls that reached the backend in this invocation.
    pub backend_calls: usize,
    pub pipelines: Vec<PipelineOutcome>,
}

impl RunOutcome {
    pub fn all_completed(&self) -> bool {
        self.pipelines.iter().all(|p| p.failed.is_empty())
    }
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    study_id: &'a str,
    error: &'a str,
}

pub fn cmd_run(args: &RunArgs) -> Result<RunOutcome> {
    let cfg = RunConfig::load(&args.config)?;
    let task = cfg.task_spec()?;
    let positive = cfg.positive_class(&task)?;
    let phrases = cfg.phrase_list()?;
    let studies = load_studies(&cfg.studies, &task)?;
    let set_hash = study_set_hash(&studies);
    let t_hashes = template_hashes(&task);

    // the descriptor names what answers requests; never the token
    let (backend_desc, replay) = match &cfg.backend {
        BackendConfig::Simulator { simulator } => (format!("simulator:{}", content_hash(simulator)), None),
        BackendConfig::Replay { transcript } => {
            let b = ReplayBackend::open(transcript)?;
            (b.id(), Some(b))
        }
        BackendConfig::Http { http, .. } => (format!("http:{}@{}", http.model, http.endpoint), None),
    };
    let config_hash = content_hash(&ConfigDigest {
        task_id: &task.task_id,
        label_a: &task.label_a,
        label_b: &task.label_b,
        template_hashes: &t_hashes,
        positive_class: &positive,
        sampling: &cfg.sampling,
        run_seed: cfg.run_seed,
        repair: cfg.repair,
        backend: backend_desc,
        study_set_hash: &set_hash,
        phrase_list_hash: &phrases.hash(),
    });
    let dir = match &args.run_dir {
        Some(d) => d.clone(),
        None => args.out.join(format!("{}-{}", task.task_id, short_hash(&config_hash))),
    };
    std::fs::create_dir_all(dir.join("records"))?;

    let existing = read_manifest(&dir)?;
    if let Some(m) = &existing {
        if m.config_hash != config_hash {
            bail!(
                "{} was produced by config {} but this config hashes to {}; refusing to mix runs (use a fresh directory)",
                dir.display(),
                m.config_hash,
                config_hash
            );
        }
    }

    let backend: Box<dyn ModelBackend> = match &cfg.backend {
        BackendConfig::Simulator { simulator } => Box::new(SimulatorBackend::new(simulator.clone(), &task, &studies)?),
        BackendConfig::Replay { .. } => Box::new(replay.expect("opened above")),
        BackendConfig::Http {
            transcript,
            http,
            retry,
        } => {
            let path = transcript.clone().unwrap_or_else(|| dir.join("transcript.jsonl"));
            let store = Arc::new(TranscriptStore::open(&path)?);
            Box::new(HttpBackend::new(http.clone(), store, retry.clone())?)
        }
    };

    let mut pipelines: BTreeSet<String> = existing.map(|m| m.pipelines).unwrap_or_default();
    pipelines.extend(cfg.pipelines.iter().map(ToString::to_string));
    let manifest = RunManifest {
        config_hash: config_hash.clone(),
        task_id: task.task_id.clone(),
        label_a: task.label_a.clone(),
        label_b: task.label_b.clone(),
        positive_class: positive,
        pipelines,
        template_hashes: t_hashes,
        phrase_list_hash: phrases.hash(),
        backend_id: backend.id(),
        run_seed: cfg.run_seed,
        sampling: cfg.sampling.clone(),
        repair: cfg.repair,
        study_count: studies.len(),
        study_set_hash: set_hash,
        study_ids_hash: id_set_hash(studies.iter().map(|s| s.study_id.as_str())),
        tool_version: TOOL_VERSION.to_string(),
    };
    write_manifest(&dir, &manifest)?;

    let counting = Counting {
        inner: backend.as_ref(),
        calls: AtomicUsize::new(0),
    };
    let orch = Orchestrator::new(&counting, task, cfg.settings());
    let ids: BTreeSet<&str> = studies.iter().map(|s| s.study_id.as_str()).collect();
    let mut outcomes = Vec::new();
    for &pipeline in &cfg.pipelines {
        outcomes.push(run_pipeline(&orch, pipeline, &studies, &ids, &dir)?);
    }
    Ok(RunOutcome {
        dir,
        config_hash,
        backend_calls: counting.calls.load(Ordering::Relaxed),
        pipelines: outcomes,
    })
}

fn run_pipeline(
    orch: &Orchestrator<'_>,
    pipeline: PipelineId,
    studies: &[Study],
    ids: &BTreeSet<&str>,
    dir: &Path,
) -> Result<PipelineOutcome> {
    let name = pipeline.to_string();
    let path = records_path(dir, &name);
    let mut records: Vec<RunRecord> = read_records(&path)?
        .into_iter()
        .filter(|r| ids.contains(r.study_id.as_str()))
        .collect();
    let done: BTreeSet<String> = records.iter().map(|r| r.study_id.clone()).collect();
    let todo: Vec<Study> = studies
        .iter()
        .filter(|s| !done.contains(&s.study_id))
        .cloned()
        .collect();
    let mut outcome = PipelineOutcome {
        pipeline: name.clone(),
        skipped: done.len(),
        ..Default::default()
    };

    if !todo.is_empty() {
        log::info!("{name}: {} to run, {} already recorded", todo.len(), done.len());
        let appender = RecordAppender::open(&path)?;
        let results = orch.run_all_with(pipeline, &todo, |r| {
            if let Ok(rec) = r {
                if let Err(e) = appender.append(rec) {
                    log::error!("appending {}: {e:#}", rec.study_id);
                }
            }
        })?;
        for r in results {
            match r {
                Ok(rec) => {
                    outcome.completed += 1;
                    records.push(rec);
                }
                Err(e) => {
                    let id = e.study_id().unwrap_or_default().to_string();
                    log::warn!("{name}: {e}");
                    outcome.failed.push((id, e.to_string()));
                }
            }
        }
    }

    // an interrupted earlier pass may have appended a study twice
    records.sort_by(|a, b| a.study_id.cmp(&b.study_id));
    records.dedup_by(|a, b| a.study_id == b.study_id);
    write_records_sorted(&path, &mut records)?;

    let err_path = errors_path(dir, &name);
    if outcome.failed.is_empty() {
        if err_path.exists() {
            std::fs::remove_file(&err_path)?;
        }
    } else {
        std::fs::create_dir_all(err_path.parent().expect("errors dir"))?;
        let mut buf = String::new();
        for (study_id, error) in &outcome.failed {
            buf.push_str(&to_canonical_json(&ErrorLine { study_id, error })?);
            buf.push('\n');
        }
        write_atomic(&err_path, buf.as_bytes())?;
    }
    Ok(outcome)
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Clone)]
pub struct SimulateArgs {
    /// TOML file holding a `SimConfig`; defaults when absent.
    pub sim_config: Option<PathBuf>,
    pub task: String,
    pub n_studies: usize,
    pub pipelines: Vec<PipelineId>,
    pub run_seed: u64,
    pub width: usize,
    pub n_perm: u64,
    pub perm_seed: u64,
    pub bootstrap: usize,
    /// Output directory for `report.md` / `report.json` (and records).
    pub out: Option<PathBuf>,
    pub write_records: bool,
}

/// Studies simulated per batch; bounds memory at large `n`.
pub const SIM_CHUNK: usize = 20_000;

pub fn load_sim_config(path: Option<&Path>) -> Result<SimConfig> {
    let cfg: SimConfig = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SimConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<ReportTable> {
    let sim = load_sim_config(args.sim_config.as_deref())?;
    let task = builtin_task(&args.task)?;
    for p in &args.pipelines {
        task.validate(p.template_roles())?;
    }
    let settings = RunSettings {
        sampling: SamplingParams::default(),
        run_seed: args.run_seed,
        repair: true,
        width: args.width,
    };
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
    }

    let n = args.n_studies;
    let truths: Vec<String> = (0..n).map(|i| synthetic_study(i, &task).truth).collect();
    let study_ids: Vec<String> = (0..n).map(|i| format!("sim-{i:07}")).collect();
    let mut rows = Vec::new();
    let mut backend_id = String::new();
    for &pipeline in &args.pipelines {
        let mut preds: Vec<Prediction> = Vec::with_capacity(n);
        let mut retried = 0;
        let mut repairs = 0;
        let mut all_records = Vec::new();
        for start in (0..n).step_by(SIM_CHUNK) {
            let chunk: Vec<Study> = (start..(start + SIM_CHUNK).min(n))
                .map(|i| synthetic_study(i, &task))
                .collect();
            let backend = SimulatorBackend::new(sim.clone(), &task, &chunk)?;
            backend_id = backend.id();
            let orch = Orchestrator::new(&backend, task.clone(), settings.clone());
            let records = orch.run_all(pipeline, &chunk)?;
            let part = RowInput::from_records("", "", 0, &records);
            preds.extend(part.preds);
            retried += part.retried;
            repairs += part.repairs;
            if args.write_records {
                all_records.extend(records);
            }
        }
        if args.write_records {
            if let Some(out) = &args.out {
                let path = records_path(out, &pipeline.to_string());
                std::fs::create_dir_all(path.parent().expect("records dir"))?;
                write_records_sorted(&path, &mut all_records)?;
            }
        }
        rows.push(RowInput {
            label: pipeline.to_string(),
            pipeline: pipeline.to_string(),
            budget: pipeline.budget(),
            study_ids: study_ids.clone(),
            truths: truths.clone(),
            preds,
            retried,
            repairs,
        });
    }
    if backend_id.is_empty() {
        backend_id = SimulatorBackend::new(sim.clone(), &task, &[])?.id();
    }

    let provenance = RunProvenance {
        name: format!("simulate n={n}"),
        config_hash: content_hash(&(&sim, args.run_seed, n)),
        task_id: task.task_id.clone(),
        backend_id,
        run_seed: args.run_seed,
        temperature: settings.sampling.temperature,
        max_output_tokens: settings.sampling.max_output_tokens,
        repair: settings.repair,
        phrase_list_hash: PhraseList::default_list().hash(),
        study_set_hash: content_hash(&(&study_ids, &truths)),
        template_hashes: template_hashes(&task),
    };
    let options = ReportOptions {
        positive_class: task.label_a.clone(),
        n_perm: args.n_perm,
        perm_seed: args.perm_seed,
        bootstrap: args.bootstrap,
        comparisons: None,
    };
    let table = build_report(&task.label_a, &task.label_b, &rows, &options, vec![provenance])?;
    if let Some(out) = &args.out {
        write_report_files(out, &table)?;
    }
    Ok(table)
}

// ---------------------------------------------------------------- report

#[derive(Debug, Clone)]
pub struct ReportArgs {
    pub run_dirs: Vec<PathBuf>,
    /// `A,B` row-label pairs; empty = every CARE row against the rest.
    pub comparisons: Vec<String>,
    pub n_perm: u64,
    pub perm_seed: u64,
    pub bootstrap: usize,
    pub out: PathBuf,
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

pub fn write_report_files(out: &Path, table: &ReportTable) -> Result<()> {
    std::fs::create_dir_all(out)?;
    write_atomic(&out.join("report.md"), render_markdown(table).as_bytes())?;
    write_atomic(&out.join("report.json"), to_stable_json(table)?.as_bytes())?;
    Ok(())
}

pub fn parse_comparison(s: &str) -> Result<(String, String)> {
    match s.split_once(',') {
        Some((a, b)) if !a.trim().is_empty() && !b.trim().is_empty() => {
            Ok((a.trim().to_string(), b.trim().to_string()))
        }
        _ => bail!("comparison {s:?} must look like A,B"),
    }
}

pub fn cmd_report(args: &ReportArgs) -> Result<ReportTable> {
    if args.run_dirs.is_empty() {
        bail!("report needs at least one run directory");
    }
    let runs = args.run_dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    let first = &runs[0].manifest;
    for r in &runs[1..] {
        let m = &r.manifest;
        if (m.label_a.as_str(), m.label_b.as_str()) != (first.label_a.as_str(), first.label_b.as_str()) {
            bail!(
                "{} is a {} vs {} run, not {} vs {}",
                r.dir.display(),
                m.label_a,
                m.label_b,
                first.label_a,
                first.label_b
            );
        }
        if m.positive_class != first.positive_class {
            bail!(
                "{} uses positive class {:?}, not {:?}",
                r.dir.display(),
                m.positive_class,
                first.positive_class
            );
        }
    }

    let prefix = runs.len() > 1;
    let mut rows = Vec::new();
    let mut provenance = Vec::new();
    for run in &runs {
        let name = run_name(&run.dir);
        let mut pipes: Vec<(PipelineId, &Vec<RunRecord>)> = run
            .records
            .iter()
            .map(|(p, recs)| Ok((p.parse::<PipelineId>()?, recs)))
            .collect::<Result<_>>()?;
        pipes.sort_by_key(|(p, _)| *p);
        for (p, recs) in pipes {
            let label = if prefix { format!("{name}/{p}") } else { p.to_string() };
            rows.push(RowInput::from_records(label, &p.to_string(), p.budget(), recs));
        }
        let m = &run.manifest;
        provenance.push(RunProvenance {
            name,
            config_hash: m.config_hash.clone(),
            task_id: m.task_id.clone(),
            backend_id: m.backend_id.clone(),
            run_seed: m.run_seed,
            temperature: m.sampling.temperature,
            max_output_tokens: m.sampling.max_output_tokens,
            repair: m.repair,
            phrase_list_hash: m.phrase_list_hash.clone(),
            study_set_hash: m.study_set_hash.clone(),
            template_hashes: m.template_hashes.clone(),
        });
    }
    let comparisons = if args.comparisons.is_empty() {
        None
    } else {
        Some(
            args.comparisons
                .iter()
                .map(|c| parse_comparison(c))
                .collect::<Result<_>>()?,
        )
    };
    let options = ReportOptions {
        positive_class: first.positive_class.clone(),
        n_perm: args.n_perm,
        perm_seed: args.perm_seed,
        bootstrap: args.bootstrap,
        comparisons,
    };
    let table = build_report(&first.label_a, &first.label_b, &rows, &options, provenance)?;
    write_report_files(&args.out, &table)?;
    Ok(table)
}

// ---------------------------------------------------------------- cases

#[derive(Debug, Clone)]
pub struct CasesArgs {
    pub run_dir: PathBuf,
    /// Pipeline to export; defaults to the run's only CARE-family pipeline,
    /// or `care` when both are present.
    pub pipeline: Option<PipelineId>,
    pub filters: Vec<String>,
}

pub fn cmd_cases(args: &CasesArgs) -> Result<Vec<QualitativeCase>> {
    let manifest =
        read_manifest(&args.run_dir)?.with_context(|| format!("{} is not a run directory", args.run_dir.display()))?;
    let pipeline = match args.pipeline {
        Some(p) if p.is_care() => p,
        Some(p) => bail!("{p} is not a CARE-family pipeline; cases are exported only for care and blind_care"),
        None => {
            let care: Vec<PipelineId> = manifest
                .pipelines
                .iter()
                .filter_map(|p| p.parse::<PipelineId>().ok())
                .filter(|p| p.is_care())
                .collect();
            match care.iter().max() {
                Some(p) => *p,
                None => bail!("{} holds no CARE-family run", args.run_dir.display()),
            }
        }
    };
    if !manifest.pipelines.contains(&pipeline.to_string()) {
        bail!("{} has no {pipeline} records", args.run_dir.display());
    }
    let filters = args
        .filters
        .iter()
        .map(|f| f.parse())
        .collect::<Result<Vec<CaseFilter>>>()?;
    let run = load_run(&args.run_dir)?;
    select_cases(&run.records[&pipeline.to_string()], &filters)
}
