//! Regenerates the replay fixtures under `fixtures/`.
//!
//! `replay30` is recorded from the simulator. `replay12` is hand-scripted:
//! every specialist, judge, baseline and repair answer below was written to
//! exercise one behaviour. Run from the workspace root:
//!
//! ```text
//! cargo run -p care-cli --example make_fixtures
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{ensure, Context, Result};
use care_cli::commands::{cmd_cases, cmd_report, cmd_run, CasesArgs, ReportArgs, RunArgs};
use care_cli::config::RunConfig;
use care_cli::studies::load_studies;
use care_core::backend::transcript::{read_entries, RecordingBackend};
use care_core::backend::{
    BackendError, ModelBackend, ModelRequest, ModelResponse, SimConfig, SimulatorBackend, TranscriptStore,
};
use care_core::canonical::to_canonical_json;
use care_core::orchestrator::Orchestrator;
use care_core::{ImagePayload, Provenance, Role, Study};
use serde_json::json;

const M: &str = "melanoma";
const N: &str = "atypical nevus";

fn main() -> Result<()> {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    replay30(&root.join("replay30"))?;
    replay12(&root.join("replay12"))?;
    Ok(())
}

fn write_lines<T: serde::Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut s = String::new();
    for it in items {
        s.push_str(&to_canonical_json(it)?);
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Runs every configured pipeline through `backend`, one study at a time,
/// and writes the deduplicated transcript sorted by request hash.
fn record(dir: &Path, backend: impl ModelBackend, model_id: &str) -> Result<()> {
    let cfg = RunConfig::load(&dir.join("config.toml"))?;
    let task = cfg.task_spec()?;
    let studies = load_studies(&cfg.studies, &task)?;
    let scratch = tempfile::tempdir()?;
    let tmp = scratch.path().join("t.jsonl");
    let store = Arc::new(TranscriptStore::open(&tmp)?);
    let rec = RecordingBackend::new(backend, store, model_id);
    let mut settings = cfg.settings();
    settings.width = 1;
    let orch = Orchestrator::new(&rec, task, settings);
    for &p in &cfg.pipelines {
        orch.run_all(p, &studies).with_context(|| format!("recording {p}"))?;
    }
    let mut entries: BTreeMap<String, _> = BTreeMap::new();
    for e in read_entries(&tmp)? {
        entries.entry(e.request_hash.clone()).or_insert(e);
    }
    let entries: Vec<_> = entries.into_values().collect();
    write_lines(&dir.join("transcript.jsonl"), &entries)?;
    println!("{}: {} transcript entries", dir.display(), entries.len());
    Ok(())
}

fn fake_image(tag: &str) -> Vec<u8> {
    let mut b = b"\x89PNG\r\n\x1a\n".to_vec();
    b.extend_from_slice(tag.as_bytes());
    b
}

// ---------------------------------------------------------------- replay30

fn replay30(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let studies: Vec<Study> = (1..=30)
        .map(|i| {
            let id = format!("r30-{i:02}");
            let views = if i % 5 == 0 { 2 } else { 1 };
            Study {
                images: (0..views)
                    .map(|v| ImagePayload::new("image/png", fake_image(&format!("{id}/view{v}"))))
                    .collect(),
                truth: if i % 2 == 1 { M } else { N }.to_string(),
                study_id: id,
                report_text: None,
                meta: BTreeMap::new(),
            }
        })
        .collect();
    write_lines(&dir.join("studies.jsonl"), &studies)?;
    std::fs::write(
        dir.join("config.toml"),
        r#"task = "melanoma_vs_atypical_nevus"
studies = "studies.jsonl"
pipelines = ["baseline", "self_check_2", "self_check_3", "majority_vote_3", "blind_care", "care"]
run_seed = 30

[backend]
kind = "replay"
transcript = "transcript.jsonl"
"#,
    )?;
    let task = care_core::template::builtin_task("melanoma_vs_atypical_nevus")?;
    let sim = SimulatorBackend::new(SimConfig::default(), &task, &studies)?;
    record(dir, sim, "simulator-default")
}

// ---------------------------------------------------------------- replay12

struct Case {
    id: &'static str,
    truth: &'static str,
    views: usize,
    baseline: &'static str,
    repair: Option<&'static str>,
    spec_a: String,
    spec_b: String,
    judge: String,
}

fn claims(items: &[(&str, &str, &str)], supports: &str) -> String {
    let v: Vec<_> = items
        .iter()
        .map(|(finding, location, confidence)| {
            json!({"finding": finding, "location": location, "supports": supports, "confidence": confidence})
        })
        .collect();
    json!({ "claims": v }).to_string()
}

fn judge(flags: &[(&str, usize, &str)], rationale: &str, final_label: &str) -> String {
    let f: Vec<_> = flags
        .iter()
        .map(|(side, index, flag)| json!({"side": side, "index": index, "flag": flag}))
        .collect();
    json!({"claim_flags": f, "rationale": rationale, "final_diagnosis": final_label}).to_string()
}

fn base(label: &str) -> &'static str {
    if label == M {
        r#"{"final_diagnosis": "melanoma"}"#
    } else {
        r#"{"final_diagnosis": "atypical nevus"}"#
    }
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            id: "case-01",
            truth: M,
            views: 1,
            baseline: "FINAL: melanoma",
            repair: None,
            spec_a: claims(
                &[
                    ("atypical pigment network", "periphery", "high"),
                    ("irregular dots and globules", "lower pole", "medium"),
                    ("blue-white veil", "centre", "medium"),
                ],
                M,
            ),
            spec_b: claims(
                &[
                    ("mild asymmetry only", "whole lesion", "low"),
                    ("regular globules", "centre", "low"),
                ],
                N,
            ),
            judge: judge(
                &[("a", 0, "supported"), ("a", 2, "supported"), ("b", 1, "unsupported")],
                "Veil and atypical network are visible; the globules are not regular.",
                M,
            ),
        },
        Case {
            id: "case-02",
            truth: N,
            views: 1,
            baseline: base(M),
            repair: None,
            spec_a: claims(
                &[
                    ("regression structures", "centre", "medium"),
                    ("blue-white veil", "upper half", "high"),
                ],
                M,
            ),
            spec_b: claims(
                &[
                    ("regular pigment network", "whole lesion", "high"),
                    ("symmetric globules", "periphery", "medium"),
                ],
                N,
            ),
            judge: judge(
                &[("a", 1, "contradictory"), ("b", 0, "supported")],
                "No veil is present; the upper half shows a light brown reticular network.",
                N,
            ),
        },
        Case {
            id: "case-03",
            truth: M,
            views: 1,
            baseline: base(N),
            repair: None,
            spec_a: claims(
                &[
                    ("irregular streaks", "left edge", "high"),
                    ("multiple colours", "whole lesion", "medium"),
                    ("atypical vascular pattern", "centre", "low"),
                ],
                M,
            ),
            spec_b: claims(
                &[
                    ("uniform tan colour", "whole lesion", "medium"),
                    ("regular network", "periphery", "medium"),
                    ("small size", "whole lesion", "low"),
                ],
                N,
            ),
            judge: judge(
                &[("b", 0, "unsupported"), ("b", 2, "unsupported")],
                "At least three colours are visible; the lesion is not small.",
                M,
            ),
        },
        Case {
            // one high-specificity claim outweighs three benign ones
            id: "case-04",
            truth: M,
            views: 1,
            baseline: base(N),
            repair: None,
            spec_a: claims(&[("irregular streaks", "lower right periphery", "high")], M),
            spec_b: claims(
                &[
                    ("largely symmetric outline", "whole lesion", "medium"),
                    ("reticular network", "centre", "medium"),
                    ("light brown colour", "whole lesion", "medium"),
                ],
                N,
            ),
            judge: judge(
                &[
                    ("a", 0, "supported"),
                    ("b", 0, "supported"),
                    ("b", 1, "supported"),
                    ("b", 2, "supported"),
                ],
                "The benign features are present but the focal irregular streaks are specific for melanoma.",
                M,
            ),
        },
        Case {
            id: "case-05",
            truth: M,
            views: 1,
            baseline: base(M),
            repair: None,
            spec_a: claims(
                &[
                    ("blue-white veil", "centre", "high"),
                    ("atypical network", "periphery", "medium"),
                ],
                M,
            ),
            spec_b: claims(
                &[
                    ("symmetric pigment network", "whole lesion", "medium"),
                    ("no regression", "centre", "low"),
                ],
                N,
            ),
            judge: judge(&[("b", 0, "contradictory")], "The network is clearly asymmetric.", M),
        },
        Case {
            id: "case-06",
            truth: N,
            views: 1,
            baseline: base(N),
            repair: None,
            spec_a: claims(
                &[
                    ("slight asymmetry", "whole lesion", "low"),
                    ("few dots", "periphery", "low"),
                ],
                M,
            ),
            spec_b: claims(
                &[
                    ("regular network", "whole lesion", "high"),
                    ("uniform colour", "whole lesion", "medium"),
                ],
                N,
            ),
            judge: judge(
                &[("b", 0, "supported"), ("b", 1, "supported")],
                "Features are benign throughout.",
                N,
            ),
        },
        Case {
            // the melanoma specialist describes a second view that shows no such thing
            id: "case-07",
            truth: N,
            views: 2,
            baseline: base(M),
            repair: None,
            spec_a: claims(
                &[
                    (
                        "atypical network visible in the second view",
                        "second view, periphery",
                        "high",
                    ),
                    ("irregular border", "first view, left edge", "medium"),
                ],
                M,
            ),
            spec_b: claims(
                &[
                    ("regular network in both views", "both views", "medium"),
                    ("uniform colour", "first view", "medium"),
                ],
                N,
            ),
            judge: judge(
                &[("a", 0, "unsupported"), ("b", 0, "supported")],
                "The second view shows a regular network; no atypical network is seen in either view.",
                N,
            ),
        },
        Case {
            id: "case-08",
            truth: M,
            views: 1,
            baseline: "The lesion could be melanoma or atypical nevus; I cannot decide from this image.",
            repair: Some("melanoma"),
            spec_a: claims(
                &[
                    ("irregular dots", "periphery", "medium"),
                    ("asymmetric colour", "whole lesion", "medium"),
                ],
                M,
            ),
            spec_b: claims(
                &[
                    ("reticular network", "centre", "medium"),
                    ("no veil", "whole lesion", "low"),
                ],
                N,
            ),
            judge: judge(&[], "Asymmetric colour and peripheral dots favour melanoma.", M),
        },
        Case {
            id: "case-09",
            truth: N,
            views: 1,
            baseline: base(N),
            repair: None,
            spec_a: claims(
                &[
                    ("blue-white veil", "centre", "high"),
                    ("pseudopods", "right edge", "medium"),
                    ("shiny white lines", "centre", "low"),
                ],
                M,
            ),
            spec_b: claims(
                &[
                    ("regular network", "whole lesion", "high"),
                    ("central hypopigmentation", "centre", "medium"),
                ],
                N,
            ),
            judge: judge(
                &[
                    ("a", 0, "contradictory"),
                    ("a", 2, "unsupported"),
                    ("b", 1, "supported"),
                ],
                "The centre is hypopigmented, not blue; no shiny lines are visible.",
                N,
            ),
        },
        Case {
            // the judge is wrong here
            id: "case-10",
            truth: N,
            views: 1,
            baseline: base(N),
            repair: None,
            spec_a: claims(
                &[
                    ("irregular border", "upper edge", "medium"),
                    ("two colours", "whole lesion", "low"),
                    ("eccentric hyperpigmentation", "left", "medium"),
                ],
                M,
            ),
            spec_b: claims(
                &[
                    ("regular network", "whole lesion", "medium"),
                    ("symmetric shape", "whole lesion", "medium"),
                    ("no veil", "whole lesion", "medium"),
                ],
                N,
            ),
            judge: judge(&[], "Eccentric hyperpigmentation is concerning.", M),
        },
        Case {
            // the nevus specialist refuses; the judge still decides
            id: "case-11",
            truth: M,
            views: 1,
            baseline: base(M),
            repair: None,
            spec_a: claims(
                &[
                    ("atypical network", "whole lesion", "high"),
                    ("regression structures", "centre", "medium"),
                ],
                M,
            ),
            spec_b: "I cannot provide findings for this image.".to_string(),
            judge: judge(
                &[("a", 0, "supported")],
                "Only melanoma evidence was offered and it is visible.",
                M,
            ),
        },
        Case {
            id: "case-12",
            truth: N,
            views: 1,
            baseline: base(N),
            repair: None,
            spec_a: claims(
                &[
                    ("mild asymmetry", "whole lesion", "low"),
                    ("a few dots", "periphery", "low"),
                ],
                M,
            ),
            spec_b: claims(
                &[
                    ("regular network", "whole lesion", "high"),
                    ("symmetric globules", "centre", "medium"),
                ],
                N,
            ),
            judge: "Both sets were checked against the image and the benign features dominate.\nFINAL: atypical nevus"
                .to_string(),
        },
    ]
}

struct Scripted {
    answers: HashMap<(String, Role), String>,
}

impl ModelBackend for Scripted {
    fn id(&self) -> String {
        "scripted-replay12".into()
    }

    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        let key = (request.context.study_id.clone(), request.role);
        let text = self
            .answers
            .get(&key)
            .cloned()
            .ok_or_else(|| BackendError::Config(format!("no scripted answer for {key:?}")))?;
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

fn replay12(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    let cases = cases();
    let mut lines = Vec::new();
    let mut answers = HashMap::new();
    for c in &cases {
        let mut paths = Vec::new();
        for v in 0..c.views {
            let rel = format!("images/{}_view{}.png", c.id, v + 1);
            std::fs::write(dir.join(&rel), fake_image(&format!("{}/view{}", c.id, v + 1)))?;
            paths.push(rel);
        }
        lines.push(json!({"study_id": c.id, "truth": c.truth, "image_paths": paths}));
        let id = c.id.to_string();
        answers.insert((id.clone(), Role::Baseline), c.baseline.to_string());
        answers.insert((id.clone(), Role::SpecialistA), c.spec_a.clone());
        answers.insert((id.clone(), Role::SpecialistB), c.spec_b.clone());
        answers.insert((id.clone(), Role::Judge), c.judge.clone());
        if let Some(r) = c.repair {
            answers.insert((id, Role::Repair), r.to_string());
        }
    }
    write_lines(&dir.join("studies.jsonl"), &lines)?;
    std::fs::write(
        dir.join("config.toml"),
        r#"task = "melanoma_vs_atypical_nevus"
studies = "studies.jsonl"
pipelines = ["baseline", "care"]
run_seed = 12

[backend]
kind = "replay"
transcript = "transcript.jsonl"
"#,
    )?;
    record(dir, Scripted { answers }, "scripted")?;

    // golden outputs from the replayed run
    let scratch = tempfile::tempdir()?;
    let run_dir = scratch.path().join("replay12");
    let outcome = cmd_run(&RunArgs {
        config: dir.join("config.toml"),
        out: scratch.path().to_path_buf(),
        run_dir: Some(run_dir.clone()),
    })?;
    ensure!(outcome.all_completed(), "replay12 run incomplete");
    cmd_report(&ReportArgs {
        run_dirs: vec![run_dir.clone()],
        comparisons: vec![],
        n_perm: REPLAY12_N_PERM,
        perm_seed: REPLAY12_PERM_SEED,
        bootstrap: REPLAY12_BOOTSTRAP,
        out: dir.join("expected"),
    })?;
    let ids = |filter: &str| -> Result<Vec<String>> {
        Ok(cmd_cases(&CasesArgs {
            run_dir: run_dir.clone(),
            pipeline: None,
            filters: vec![filter.to_string()],
        })?
        .into_iter()
        .map(|c| c.study_id)
        .collect())
    };
    let contradictory = ids("contradictory>0")?;
    let overturned = ids("overturned")?;
    let unsupported = ids("unsupported>0")?;
    ensure!(
        contradictory == ["case-02", "case-05", "case-09"],
        "contradictory cases {contradictory:?}"
    );
    ensure!(overturned == ["case-04"], "overturned cases {overturned:?}");
    std::fs::write(
        dir.join("expected/cases.json"),
        serde_json::to_string_pretty(&json!({
            "contradictory>0": contradictory,
            "overturned": overturned,
            "unsupported>0": unsupported,
        }))? + "\n",
    )?;
    Ok(())
}

// keep in step with the acceptance suite
const REPLAY12_N_PERM: u64 = 9999;
const REPLAY12_PERM_SEED: u64 = 12;
const REPLAY12_BOOTSTRAP: usize = 1000;
