use std::path::{Path, PathBuf};
use std::process::Command;

use care_cli::commands::{cmd_cases, cmd_curate, cmd_report, cmd_run, CasesArgs, CurateArgs, ReportArgs, RunArgs};
use care_cli::rundir::{read_records, records_path};

fn write_studies(dir: &Path, name: &str, n: usize, skip: &[usize]) -> PathBuf {
    let mut s = String::new();
    for i in 0..n {
        if skip.contains(&i) {
            continue;
        }
        let truth = if i % 2 == 0 { "edema" } else { "pneumonia" };
        let img = care_core::ImagePayload::new("image/png", format!("img-{i}").into_bytes());
        let line = serde_json::json!({"study_id": format!("s-{i:03}"), "truth": truth, "images": [img]});
        s.push_str(&line.to_string());
        s.push('\n');
    }
    let path = dir.join(name);
    std::fs::write(&path, s).unwrap();
    path
}

fn write_config(dir: &Path, name: &str, studies: &str, run_seed: u64, pipelines: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(
        &path,
        format!(
            r#"task = "edema_vs_pneumonia"
studies = "{studies}"
pipelines = [{pipelines}]
run_seed = {run_seed}

[backend]
kind = "simulator"
"#
        ),
    )
    .unwrap();
    path
}

fn run(config: &Path, run_dir: &Path) -> care_cli::commands::RunOutcome {
    cmd_run(&RunArgs {
        config: config.into(),
        out: run_dir.parent().unwrap().into(),
        run_dir: Some(run_dir.into()),
    })
    .unwrap()
}

fn report_args(dirs: Vec<PathBuf>, out: PathBuf) -> ReportArgs {
    ReportArgs {
        run_dirs: dirs,
        comparisons: vec![],
        n_perm: 999,
        perm_seed: 3,
        bootstrap: 200,
        out,
    }
}

const ALL: &str = r#""baseline", "majority_vote_3", "blind_care", "care""#;

#[test]
fn rerun_on_a_complete_directory_makes_no_calls() {
    let tmp = tempfile::tempdir().unwrap();
    write_studies(tmp.path(), "studies.jsonl", 40, &[]);
    let cfg = write_config(tmp.path(), "c.toml", "studies.jsonl", 5, ALL);
    let dir = tmp.path().join("run");
    let first = run(&cfg, &dir);
    assert!(first.all_completed());
    assert_eq!(first.backend_calls, 40 * (1 + 3 + 3 + 3));
    let before = std::fs::read(records_path(&dir, "care")).unwrap();
    let second = run(&cfg, &dir);
    assert_eq!(second.backend_calls, 0);
    assert!(second.pipelines.iter().all(|p| p.skipped == 40 && p.completed == 0));
    assert_eq!(std::fs::read(records_path(&dir, "care")).unwrap(), before);
}

#[test]
fn interrupted_run_resumes_to_the_same_records() {
    let tmp = tempfile::tempdir().unwrap();
    write_studies(tmp.path(), "studies.jsonl", 30, &[]);
    let cfg = write_config(tmp.path(), "c.toml", "studies.jsonl", 9, ALL);
    let clean = tmp.path().join("clean");
    run(&cfg, &clean);

    let broken = tmp.path().join("broken");
    run(&cfg, &broken);
    // keep 11 whole records plus half of the twelfth, out of order
    let path = records_path(&broken, "care");
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let mut kept: Vec<&str> = lines[..11].to_vec();
    kept.reverse();
    let mut partial = kept.join("\n") + "\n";
    partial.push_str(&lines[11][..lines[11].len() / 2]);
    std::fs::write(&path, partial).unwrap();
    std::fs::remove_file(records_path(&broken, "baseline")).unwrap();

    let resumed = run(&cfg, &broken);
    assert_eq!(resumed.backend_calls, 19 * 3 + 30);
    for p in ["baseline", "majority_vote_3", "blind_care", "care"] {
        assert_eq!(
            std::fs::read(records_path(&clean, p)).unwrap(),
            std::fs::read(records_path(&broken, p)).unwrap(),
            "{p}"
        );
    }
}

#[test]
fn config_hash_mismatch_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    write_studies(tmp.path(), "studies.jsonl", 4, &[]);
    let a = write_config(tmp.path(), "a.toml", "studies.jsonl", 1, r#""baseline""#);
    let b = write_config(tmp.path(), "b.toml", "studies.jsonl", 2, r#""baseline""#);
    let dir = tmp.path().join("run");
    run(&a, &dir);
    let err = cmd_run(&RunArgs {
        config: b,
        out: tmp.path().into(),
        run_dir: Some(dir),
    })
    .unwrap_err()
    .to_string();
    assert!(err.contains("refusing"), "{err}");
}

#[test]
fn adding_a_pipeline_keeps_the_directory() {
    let tmp = tempfile::tempdir().unwrap();
    write_studies(tmp.path(), "studies.jsonl", 6, &[]);
    let a = write_config(tmp.path(), "a.toml", "studies.jsonl", 1, r#""baseline""#);
    let b = write_config(tmp.path(), "b.toml", "studies.jsonl", 1, r#""baseline", "care""#);
    let first = cmd_run(&RunArgs {
        config: a,
        out: tmp.path().join("runs"),
        run_dir: None,
    })
    .unwrap();
    let second = cmd_run(&RunArgs {
        config: b,
        out: tmp.path().join("runs"),
        run_dir: None,
    })
    .unwrap();
    assert_eq!(first.dir, second.dir);
    assert_eq!(second.backend_calls, 6 * 3);
    let m = care_cli::rundir::read_manifest(&second.dir).unwrap().unwrap();
    assert_eq!(m.pipelines.len(), 2);
}

#[test]
fn fresh_runs_and_reports_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    write_studies(tmp.path(), "studies.jsonl", 50, &[]);
    let cfg = write_config(tmp.path(), "c.toml", "studies.jsonl", 3, ALL);
    let (d1, d2) = (tmp.path().join("x").join("run"), tmp.path().join("y").join("run"));
    std::fs::create_dir_all(d1.parent().unwrap()).unwrap();
    std::fs::create_dir_all(d2.parent().unwrap()).unwrap();
    run(&cfg, &d1);
    run(&cfg, &d2);
    for p in ["baseline", "majority_vote_3", "blind_care", "care"] {
        assert_eq!(
            std::fs::read(records_path(&d1, p)).unwrap(),
            std::fs::read(records_path(&d2, p)).unwrap()
        );
    }
    assert_eq!(
        std::fs::read(d1.join("manifest.json")).unwrap(),
        std::fs::read(d2.join("manifest.json")).unwrap()
    );
    let (o1, o2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    let t = cmd_report(&report_args(vec![d1.clone()], o1.clone())).unwrap();
    cmd_report(&report_args(vec![d2], o2.clone())).unwrap();
    for f in ["report.md", "report.json"] {
        assert_eq!(
            std::fs::read(o1.join(f)).unwrap(),
            std::fs::read(o2.join(f)).unwrap(),
            "{f}"
        );
    }
    let labels: Vec<&str> = t.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["baseline", "majority_vote_3", "blind_care", "care"]);
    assert_eq!(t.comparisons.len(), 3);
    assert!(t.rows.iter().all(|r| r.accuracy_ci.is_some()));
}

#[test]
fn report_across_runs_with_different_studies_names_the_difference() {
    let tmp = tempfile::tempdir().unwrap();
    write_studies(tmp.path(), "all.jsonl", 8, &[]);
    write_studies(tmp.path(), "some.jsonl", 9, &[2, 8]);
    let a = write_config(tmp.path(), "a.toml", "all.jsonl", 1, r#""care""#);
    let b = write_config(tmp.path(), "b.toml", "some.jsonl", 1, r#""baseline""#);
    let (da, db) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&a, &da);
    run(&b, &db);
    let err = cmd_report(&report_args(vec![da.clone(), db.clone()], tmp.path().join("r")))
        .unwrap_err()
        .to_string();
    assert!(err.contains("only in a/care: [s-002]"), "{err}");
    assert!(err.contains("only in b/baseline: []"), "{err}");

    // same studies in two directories compare fine
    let c = write_config(tmp.path(), "c.toml", "all.jsonl", 1, r#""baseline""#);
    let dc = tmp.path().join("c");
    run(&c, &dc);
    let t = cmd_report(&report_args(vec![da, dc], tmp.path().join("r2"))).unwrap();
    assert_eq!(t.comparisons.len(), 1);
    assert_eq!(
        (t.comparisons[0].a.as_str(), t.comparisons[0].b.as_str()),
        ("a/care", "c/baseline")
    );
}

#[test]
fn report_refuses_incomplete_runs() {
    let tmp = tempfile::tempdir().unwrap();
    write_studies(tmp.path(), "studies.jsonl", 6, &[]);
    let cfg = write_config(tmp.path(), "c.toml", "studies.jsonl", 1, r#""baseline""#);
    let dir = tmp.path().join("run");
    run(&cfg, &dir);
    let path = records_path(&dir, "baseline");
    let mut recs = read_records(&path).unwrap();
    recs.pop();
    care_cli::rundir::write_records_sorted(&path, &mut recs).unwrap();
    let err = cmd_report(&report_args(vec![dir], tmp.path().join("r")))
        .unwrap_err()
        .to_string();
    assert!(err.contains("5 records"), "{err}");
}

#[test]
fn cases_need_a_care_run() {
    let tmp = tempfile::tempdir().unwrap();
    write_studies(tmp.path(), "studies.jsonl", 6, &[]);
    let cfg = write_config(tmp.path(), "c.toml", "studies.jsonl", 1, r#""baseline""#);
    let dir = tmp.path().join("run");
    run(&cfg, &dir);
    let args = CasesArgs {
        run_dir: dir,
        pipeline: None,
        filters: vec![],
    };
    assert!(cmd_cases(&args).unwrap_err().to_string().contains("no CARE-family run"));

    write_studies(tmp.path(), "empty.jsonl", 0, &[]);
    let cfg = write_config(tmp.path(), "e.toml", "empty.jsonl", 1, r#""care""#);
    let dir = tmp.path().join("empty");
    run(&cfg, &dir);
    let cases = cmd_cases(&CasesArgs {
        run_dir: dir,
        pipeline: None,
        filters: vec!["overturned".into()],
    })
    .unwrap();
    assert!(cases.is_empty());
}

#[test]
fn curate_writes_manifest_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/curation");
    let out = tmp.path().join("curated.jsonl");
    let report = cmd_curate(&CurateArgs {
        manifest: fixtures.join("manifest.jsonl"),
        task: "melanoma_vs_atypical_nevus".into(),
        seed: 20261015,
        phrases: None,
        tolerance: 2,
        out: out.clone(),
    })
    .unwrap();
    assert_eq!(report.final_count, 26);
    assert_eq!(care_core::curation::read_manifest(&out).unwrap().len(), 26);
    assert!(tmp.path().join("curated.report.json").exists());
}

#[test]
fn binary_exports_case_ids() {
    let fixture = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/replay12");
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("replay12");
    let bin = env!("CARGO_BIN_EXE_care");
    let status = Command::new(bin)
        .args(["run", "--config"])
        .arg(fixture.join("config.toml"))
        .arg("--run-dir")
        .arg(&dir)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let out = Command::new(bin)
        .arg("cases")
        .arg(&dir)
        .args(["--filter", "contradictory>0", "--ids"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "case-02\ncase-05\ncase-09\n");
    let bad = Command::new(bin)
        .arg("cases")
        .arg(&dir)
        .args(["--pipeline", "baseline"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
