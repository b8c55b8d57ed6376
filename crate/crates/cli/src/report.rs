//! Metric tables, paired comparisons and their rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use anyhow::{bail, Result};
use care_core::stats::{self, bootstrap_ci, discordant_counts, mcnemar, permutation_test, Metric, TestResult};
use care_core::{Prediction, Role, RunRecord};
use serde::Serialize;

/// One pipeline's predictions, aligned by study id.
#[derive(Debug, Clone)]
pub struct RowInput {
    pub label: String,
    pub pipeline: String,
    pub budget: usize,
    pub study_ids: Vec<String>,
    pub truths: Vec<String>,
    pub preds: Vec<Prediction>,
    pub retried: usize,
    pub repairs: usize,
}

impl RowInput {
    pub fn from_records(label: impl Into<String>, pipeline: &str, budget: usize, records: &[RunRecord]) -> Self {
        let mut sorted: Vec<&RunRecord> = records.iter().collect();
        sorted.sort_by(|a, b| a.study_id.cmp(&b.study_id));
        Self {
            label: label.into(),
            pipeline: pipeline.to_string(),
            budget,
            study_ids: sorted.iter().map(|r| r.study_id.clone()).collect(),
            truths: sorted.iter().map(|r| r.truth.clone()).collect(),
            preds: sorted.iter().map(|r| r.prediction.clone()).collect(),
            retried: sorted.iter().filter(|r| r.retried()).count(),
            repairs: sorted
                .iter()
                .map(|r| r.exchanges.iter().filter(|e| e.role == Role::Repair).count())
                .sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub label: String,
    pub pipeline: String,
    pub budget: usize,
    pub n: usize,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub youden: Option<f64>,
    pub abstain_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy_ci: Option<[f64; 2]>,
    pub retried: usize,
    pub repairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub a: String,
    pub b: String,
    /// Studies `a` got right and `b` got wrong.
    pub a_only_correct: u64,
    pub b_only_correct: u64,
    pub mcnemar: TestResult,
    pub permutation_f1: Option<TestResult>,
    pub permutation_youden: Option<TestResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunProvenance {
    pub name: String,
    pub config_hash: String,
    pub task_id: String,
    pub backend_id: String,
    pub run_seed: u64,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub repair: bool,
    pub phrase_list_hash: String,
    pub study_set_hash: String,
    pub template_hashes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportProvenance {
    pub runs: Vec<RunProvenance>,
    pub n_perm: u64,
    pub perm_seed: u64,
    pub bootstrap: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportTable {
    pub label_a: String,
    pub label_b: String,
    pub positive_class: String,
    pub n_studies: usize,
    pub rows: Vec<MetricRow>,
    pub comparisons: Vec<ComparisonRow>,
    pub provenance: ReportProvenance,
}

#[derive(Debug, Clone)]
pub struct ReportOptions {
    pub positive_class: String,
    pub n_perm: u64,
    pub perm_seed: u64,
    /// Bootstrap resamples for accuracy intervals; 0 disables them.
    pub bootstrap: usize,
    /// Explicit `(a, b)` label pairs; `None` compares every CARE row with
    /// every other row.
    pub comparisons: Option<Vec<(String, String)>>,
}

fn preview(ids: &BTreeSet<&str>) -> String {
    let shown: Vec<&str> = ids.iter().take(10).copied().collect();
    let more = ids.len().saturating_sub(shown.len());
    if more > 0 {
        format!("{} (+{more} more)", shown.join(", "))
    } else {
        shown.join(", ")
    }
}

/// Fails with the symmetric difference when two rows cover different studies.
pub fn check_same_studies(a: &RowInput, b: &RowInput) -> Result<()> {
    if a.study_ids == b.study_ids {
        return Ok(());
    }
    let sa: BTreeSet<&str> = a.study_ids.iter().map(String::as_str).collect();
    let sb: BTreeSet<&str> = b.study_ids.iter().map(String::as_str).collect();
    let only_a: BTreeSet<&str> = sa.difference(&sb).copied().collect();
    let only_b: BTreeSet<&str> = sb.difference(&sa).copied().collect();
    bail!(
        "study sets differ between {} and {}: only in {}: [{}]; only in {}: [{}]",
        a.label,
        b.label,
        a.label,
        preview(&only_a),
        b.label,
        preview(&only_b)
    )
}

fn metric(preds: &[Prediction], truths: &[String], positive: &str, m: Metric) -> Option<f64> {
    let c = stats::confusion(preds, truths, positive).ok()?;
    m.eval(&c).ok()
}

pub fn build_report(
    label_a: &str,
    label_b: &str,
    inputs: &[RowInput],
    options: &ReportOptions,
    runs: Vec<RunProvenance>,
) -> Result<ReportTable> {
    let mut labels = BTreeSet::new();
    for r in inputs {
        if !labels.insert(r.label.as_str()) {
            bail!("duplicate row label {}", r.label);
        }
    }
    for r in inputs.iter().skip(1) {
        check_same_studies(&inputs[0], r)?;
        if r.truths != inputs[0].truths {
            bail!("{} and {} disagree on ground truth", inputs[0].label, r.label);
        }
    }
    let pos = options.positive_class.as_str();
    let mut rows = Vec::with_capacity(inputs.len());
    for r in inputs {
        let n = r.preds.len();
        let accuracy_ci = if options.bootstrap > 0 && n > 0 {
            bootstrap_ci(
                &r.preds,
                &r.truths,
                pos,
                Metric::Accuracy,
                options.bootstrap,
                options.perm_seed,
                0.95,
            )
            .ok()
            .map(|ci| [ci.lo, ci.hi])
        } else {
            None
        };
        rows.push(MetricRow {
            label: r.label.clone(),
            pipeline: r.pipeline.clone(),
            budget: r.budget,
            n,
            accuracy: metric(&r.preds, &r.truths, pos, Metric::Accuracy),
            f1: metric(&r.preds, &r.truths, pos, Metric::F1),
            youden: metric(&r.preds, &r.truths, pos, Metric::Youden),
            abstain_rate: (n > 0).then(|| r.preds.iter().filter(|p| p.is_abstain()).count() as f64 / n as f64),
            accuracy_ci,
            retried: r.retried,
            repairs: r.repairs,
        });
    }

    let pairs: Vec<(String, String)> = match &options.comparisons {
        Some(p) => p.clone(),
        None => inputs
            .iter()
            .filter(|r| r.pipeline == "care")
            .flat_map(|c| {
                inputs
                    .iter()
                    .filter(move |o| o.label != c.label)
                    .map(move |o| (c.label.clone(), o.label.clone()))
            })
            .collect(),
    };
    let find = |l: &str| inputs.iter().find(|r| r.label == l);
    let mut comparisons = Vec::new();
    for (a, b) in pairs {
        let (Some(ra), Some(rb)) = (find(&a), find(&b)) else {
            bail!("comparison {a}:{b} names a pipeline that is not in the report");
        };
        if ra.preds.is_empty() {
            continue;
        }
        let (bc, cc) = discordant_counts(&ra.preds, &rb.preds, &ra.truths)?;
        let perm = |m| {
            permutation_test(
                &ra.preds,
                &rb.preds,
                &ra.truths,
                pos,
                m,
                options.n_perm,
                options.perm_seed,
            )
            .ok()
        };
        comparisons.push(ComparisonRow {
            a_only_correct: bc,
            b_only_correct: cc,
            mcnemar: mcnemar(bc, cc),
            permutation_f1: perm(Metric::F1),
            permutation_youden: perm(Metric::Youden),
            a,
            b,
        });
    }

    Ok(ReportTable {
        label_a: label_a.to_string(),
        label_b: label_b.to_string(),
        positive_class: options.positive_class.clone(),
        n_studies: inputs.first().map_or(0, |r| r.preds.len()),
        rows,
        comparisons,
        provenance: ReportProvenance {
            runs,
            n_perm: options.n_perm,
            perm_seed: options.perm_seed,
            bootstrap: options.bootstrap,
        },
    })
}

/// Three decimals, or `n/a` when undefined.
pub fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"))
}

/// Four significant figures; scientific notation below 1e-4.
pub fn fmt_p(p: f64) -> String {
    if p <= 0.0 {
        return "0".into();
    }
    if p < 1e-4 {
        return format!("{p:.3e}");
    }
    let decimals = (3 - p.log10().floor() as i32).max(0) as usize;
    format!("{p:.decimals$}")
}

fn fmt_test(t: Option<&TestResult>) -> String {
    t.map_or_else(|| "n/a".to_string(), |t| fmt_p(t.p_value))
}

pub fn render_markdown(t: &ReportTable) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Evaluation report: {} vs {}\n", t.label_a, t.label_b);
    let _ = writeln!(s, "Positive class: `{}`. Studies: {}.\n", t.positive_class, t.n_studies);
    let with_ci = t.rows.iter().any(|r| r.accuracy_ci.is_some());
    let _ = write!(s, "| Pipeline | Calls | ACC |");
    if with_ci {
        let _ = write!(s, " ACC 95% CI |");
    }
    let _ = writeln!(s, " F1 | Youden | n | Abstain rate | Retried | Repairs |");
    let _ = write!(s, "|---|---:|---:|");
    if with_ci {
        let _ = write!(s, "---:|");
    }
    let _ = writeln!(s, "---:|---:|---:|---:|---:|---:|");
    for r in &t.rows {
        let _ = write!(s, "| {} | {} | {} |", r.label, r.budget, fmt_metric(r.accuracy));
        if with_ci {
            match r.accuracy_ci {
                Some([lo, hi]) => {
                    let _ = write!(s, " [{lo:.3}, {hi:.3}] |");
                }
                None => s.push_str(" n/a |"),
            }
        }
        let _ = writeln!(
            s,
            " {} | {} | {} | {} | {} | {} |",
            fmt_metric(r.f1),
            fmt_metric(r.youden),
            r.n,
            fmt_metric(r.abstain_rate),
            r.retried,
            r.repairs
        );
    }

    if !t.comparisons.is_empty() {
        let _ = writeln!(s, "\n## Paired comparisons\n");
        let _ = writeln!(
            s,
            "McNemar on accuracy; sign-flip permutation on F1 and Youden ({} permutations, seed {}).\n",
            t.provenance.n_perm, t.provenance.perm_seed
        );
        let _ = writeln!(
            s,
            "| A | B | A only correct | B only correct | McNemar p | Test | Perm p (F1) | Perm p (Youden) |"
        );
        let _ = writeln!(s, "|---|---|---:|---:|---:|---|---:|---:|");
        for c in &t.comparisons {
            let method = match c.mcnemar.method {
                stats::TestMethod::McnemarExact => "exact",
                stats::TestMethod::McnemarCc => "chi2 cc",
                stats::TestMethod::Permutation => "permutation",
            };
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} | {} |",
                c.a,
                c.b,
                c.a_only_correct,
                c.b_only_correct,
                fmt_p(c.mcnemar.p_value),
                method,
                fmt_test(c.permutation_f1.as_ref()),
                fmt_test(c.permutation_youden.as_ref())
            );
        }
    }

    let _ = writeln!(s, "\n## Provenance\n");
    for r in &t.provenance.runs {
        let _ = writeln!(s, "- run `{}`", r.name);
        let _ = writeln!(s, "  - config hash `{}`", r.config_hash);
        let _ = writeln!(s, "  - task `{}`, backend `{}`", r.task_id, r.backend_id);
        let _ = writeln!(
            s,
            "  - run seed {}, temperature {}, max output tokens {}, repair {}",
            r.run_seed,
            r.temperature,
            r.max_output_tokens,
            if r.repair { "on" } else { "off" }
        );
        let _ = writeln!(s, "  - study set `{}`", r.study_set_hash);
        let _ = writeln!(s, "  - hedge phrase list `{}`", r.phrase_list_hash);
        for (role, h) in &r.template_hashes {
            let _ = writeln!(s, "  - template {role} `{h}`");
        }
    }
    if t.provenance.bootstrap > 0 {
        let _ = writeln!(
            s,
            "- accuracy intervals: percentile bootstrap, {} resamples, seed {}",
            t.provenance.bootstrap, t.provenance.perm_seed
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(label: &str, ids: &[&str], preds: &[&str]) -> RowInput {
        RowInput {
            label: label.into(),
            pipeline: label.into(),
            budget: 1,
            study_ids: ids.iter().map(|s| s.to_string()).collect(),
            truths: ids
                .iter()
                .enumerate()
                .map(|(i, _)| if i % 2 == 0 { "A" } else { "B" }.to_string())
                .collect(),
            preds: preds
                .iter()
                .map(|p| {
                    if *p == "-" {
                        Prediction::Abstain
                    } else {
                        Prediction::Label(p.to_string())
                    }
                })
                .collect(),
            retried: 0,
            repairs: 0,
        }
    }

    fn options() -> ReportOptions {
        ReportOptions {
            positive_class: "A".into(),
            n_perm: 999,
            perm_seed: 1,
            bootstrap: 0,
            comparisons: None,
        }
    }

    #[test]
    fn p_value_formatting() {
        assert_eq!(fmt_p(1.0), "1.000");
        assert_eq!(fmt_p(0.192), "0.1920");
        assert_eq!(fmt_p(0.001953125), "0.001953");
        assert_eq!(fmt_p(0.0001), "0.0001000");
        assert_eq!(fmt_p(0.0000123456), "1.235e-5");
        assert_eq!(fmt_metric(Some(2.0 / 3.0)), "0.667");
        assert_eq!(fmt_metric(None), "n/a");
    }

    #[test]
    fn mismatched_study_sets_name_the_difference() {
        let a = row("care", &["s1", "s2", "s3"], &["A", "B", "A"]);
        let b = row("baseline", &["s1", "s2", "s4"], &["A", "B", "A"]);
        let err = build_report("A", "B", &[a, b], &options(), vec![])
            .unwrap_err()
            .to_string();
        assert!(err.contains("only in care: [s3]"), "{err}");
        assert!(err.contains("only in baseline: [s4]"), "{err}");
    }

    #[test]
    fn care_is_compared_with_every_other_row_by_default() {
        let ids = ["s1", "s2", "s3", "s4"];
        let rows = [
            row("baseline", &ids, &["A", "A", "B", "B"]),
            row("care", &ids, &["A", "B", "A", "B"]),
            row("majority_vote_3", &ids, &["-", "B", "A", "A"]),
        ];
        let t = build_report("A", "B", &rows, &options(), vec![]).unwrap();
        let pairs: Vec<_> = t.comparisons.iter().map(|c| (c.a.as_str(), c.b.as_str())).collect();
        assert_eq!(pairs, vec![("care", "baseline"), ("care", "majority_vote_3")]);
        assert_eq!(t.rows[2].abstain_rate, Some(0.25));
        let md = render_markdown(&t);
        assert_eq!(
            md,
            render_markdown(&build_report("A", "B", &rows, &options(), vec![]).unwrap())
        );
        assert!(md.contains("| care | 1 | 1.000 |"));
    }

    #[test]
    fn empty_input_renders_an_empty_table() {
        let t = build_report("A", "B", &[row("care", &[], &[])], &options(), vec![]).unwrap();
        assert_eq!(t.rows[0].accuracy, None);
        assert!(t.comparisons.is_empty());
        assert!(render_markdown(&t).contains("| care | 1 | n/a |"));
    }
}
