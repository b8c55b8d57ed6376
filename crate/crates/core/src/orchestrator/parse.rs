//! Extraction of decisions, evidence and claim flags from model text.

use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::types::{ClaimFlag, Confidence, EvidenceClaim, EvidenceSet, Extraction, FlagKind, Prediction, TaskSpec};

/// Characters of trailing text searched by the keyword fallback.
pub const KEYWORD_WINDOW: usize = 400;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedDecision {
    pub label: Prediction,
    pub extraction: Extraction,
}

/// First JSON value found in `text`: the whole text, a fenced block, or the
/// first balanced `{...}` / `[...]` span that parses.
pub fn extract_json(text: &str) -> Option<Value> {
    let raw = text.trim();
    if let Ok(v) = serde_json::from_str::<Value>(raw) {
        if v.is_object() || v.is_array() {
            return Some(v);
        }
    }
    if let Some(block) = fenced_block(raw) {
        if let Ok(v) = serde_json::from_str::<Value>(block) {
            return Some(v);
        }
    }
    for (start, ch) in raw.char_indices() {
        if ch != '{' && ch != '[' {
            continue;
        }
        if let Some(end) = balanced_end(&raw[start..]) {
            if let Ok(v) = serde_json::from_str::<Value>(&raw[start..start + end]) {
                return Some(v);
            }
        }
    }
    None
}

fn fenced_block(text: &str) -> Option<&str> {
    let start = text.find("```")?;
    let after = &text[start + 3..];
    let body_start = after.find('\n')? + 1;
    let body = &after[body_start..];
    let end = body.find("```")?;
    Some(body[..end].trim())
}

// Byte length of the bracketed span opening at s[0], honouring JSON strings.
fn balanced_end(s: &str) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, ch) in s.char_indices() {
        if in_str {
            match ch {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match ch {
            '"' => in_str = true,
            '{' | '[' => depth += 1,
            '}' | ']' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(i + ch.len_utf8());
                }
            }
            _ => {}
        }
    }
    None
}

fn clean_label_text(s: &str) -> String {
    s.trim()
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '*' || c == '`')
        .trim_end_matches(['.', '!', ';', ','])
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// The task label `s` names exactly (case/whitespace/punctuation-insensitive).
pub fn match_label<'t>(s: &str, task: &'t TaskSpec) -> Option<&'t str> {
    let c = clean_label_text(s);
    task.labels().into_iter().find(|l| l.to_lowercase() == c)
}

fn marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^[\s>#*_-]*FINAL[\s*_]*:\s*(.+?)\s*$").expect("valid regex"))
}

fn label_re(label: &str) -> Regex {
    let words: Vec<String> = label.split_whitespace().map(regex::escape).collect();
    Regex::new(&format!(r"(?i)\b{}\b", words.join(r"\s+"))).expect("escaped label")
}

/// Labels mentioned in `text` at word boundaries. A longer label is matched
/// first and masked so a label contained in it is not double-counted.
fn mentioned_labels<'t>(text: &str, task: &'t TaskSpec) -> Vec<&'t str> {
    let mut labels = task.labels();
    labels.sort_by_key(|l| std::cmp::Reverse(l.len()));
    let mut haystack = text.to_string();
    let mut found = Vec::new();
    for label in labels {
        let re = label_re(label);
        if re.is_match(&haystack) {
            found.push(label);
            haystack = re.replace_all(&haystack, " ").into_owned();
        }
    }
    found
}

/// Decision extraction with fixed precedence: JSON `final_diagnosis`, then a
/// `FINAL: <label>` line, then a keyword fallback over the last
/// [`KEYWORD_WINDOW`] characters when exactly one label is mentioned there.
/// `None` means ambiguous; the caller decides whether to repair.
pub fn parse_decision(raw: &str, task: &TaskSpec) -> Option<ParsedDecision> {
    if let Some(v) = extract_json(raw) {
        if let Some(label) = v
            .get("final_diagnosis")
            .and_then(Value::as_str)
            .and_then(|s| match_label(s, task))
        {
            return Some(ParsedDecision {
                label: Prediction::Label(label.to_string()),
                extraction: Extraction::Structured,
            });
        }
    }
    if let Some(label) = marker_re()
        .captures_iter(raw)
        .filter_map(|c| match_label(&c[1], task))
        .last()
    {
        return Some(ParsedDecision {
            label: Prediction::Label(label.to_string()),
            extraction: Extraction::Structured,
        });
    }
    let n = raw.chars().count();
    let tail: String = raw.chars().skip(n.saturating_sub(KEYWORD_WINDOW)).collect();
    match mentioned_labels(&tail, task).as_slice() {
        [only] => Some(ParsedDecision {
            label: Prediction::Label(only.to_string()),
            extraction: Extraction::KeywordFallback,
        }),
        _ => None,
    }
}

/// Prompt for the single repair call after an ambiguous answer.
pub fn repair_prompt(previous: &str, task: &TaskSpec) -> String {
    format!(
        "Your previous answer was:\n---\n{previous}\n---\nAnswer with exactly one label: {} or {}.",
        task.label_a, task.label_b
    )
}

fn bullet_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?:[-*•+]|\d+[.)])\s+(.+?)\s*$").expect("valid regex"))
}

fn str_field<'v>(obj: &'v Value, keys: &[&str]) -> Option<&'v str> {
    keys.iter()
        .find_map(|k| obj.get(*k).and_then(Value::as_str))
        .map(str::trim)
        .filter(|s| !s.is_empty())
}

/// Evidence produced under `hypothesis`.
///
/// Structured claims are read from a JSON `claims` array (or a bare array).
/// A claim naming any label other than `hypothesis` in `supports` is
/// reassigned and counted in `coercions`. Without a structured block, every
/// list-marker line becomes one claim. Nothing recoverable yields an empty set.
pub fn parse_evidence(raw: &str, hypothesis: &str, task: &TaskSpec) -> EvidenceSet {
    let items = extract_json(raw).and_then(|v| match v {
        Value::Array(a) => Some(a),
        Value::Object(ref o) => o.get("claims").and_then(Value::as_array).cloned(),
        _ => None,
    });
    let mut set = EvidenceSet::empty(hypothesis, raw);
    match items {
        Some(items) => {
            for item in items {
                let (finding, location, supports, confidence) = match &item {
                    Value::String(s) if !s.trim().is_empty() => (s.trim().to_string(), None, None, None),
                    Value::Object(_) => match str_field(&item, &["finding", "claim", "evidence"]) {
                        Some(f) => (
                            f.to_string(),
                            str_field(&item, &["location"]).map(String::from),
                            str_field(&item, &["supports"]),
                            str_field(&item, &["confidence"]).and_then(Confidence::parse),
                        ),
                        None => continue,
                    },
                    _ => continue,
                };
                if let Some(s) = supports {
                    let same = match_label(s, task)
                        .map_or_else(|| clean_label_text(s) == hypothesis.to_lowercase(), |l| l == hypothesis);
                    if !same {
                        set.coercions += 1;
                    }
                }
                set.claims.push(EvidenceClaim {
                    finding,
                    location,
                    supports: hypothesis.to_string(),
                    confidence,
                });
            }
        }
        None => {
            for line in raw.lines() {
                if let Some(c) = bullet_re().captures(line) {
                    set.claims.push(EvidenceClaim {
                        finding: c[1].to_string(),
                        location: None,
                        supports: hypothesis.to_string(),
                        confidence: None,
                    });
                }
            }
        }
    }
    set
}

/// Evidence block substituted into the judge prompt. Claim numbers are the
/// 0-based indices the judge must use in its flags.
pub fn render_evidence(side: char, set: &EvidenceSet) -> String {
    let mut s = format!("Evidence for hypothesis {side}: {}\n", set.hypothesis);
    if set.claims.is_empty() {
        s.push_str("(no claims)");
        return s;
    }
    for (i, c) in set.claims.iter().enumerate() {
        let _ = write!(s, "[{i}] {}", c.finding);
        let mut extra = Vec::new();
        if let Some(l) = &c.location {
            extra.push(format!("location: {l}"));
        }
        if let Some(conf) = c.confidence {
            extra.push(format!(
                "confidence: {}",
                serde_json::to_value(conf).expect("enum").as_str().unwrap_or("")
            ));
        }
        if !extra.is_empty() {
            let _ = write!(s, " ({})", extra.join("; "));
        }
        if i + 1 < set.claims.len() {
            s.push('\n');
        }
    }
    s
}

/// Claim flags and rationale from a judge reply. Flags pointing at claims
/// that do not exist are dropped and reported.
pub fn parse_claim_flags(
    raw: &str,
    task: &TaskSpec,
    evidence_a: &EvidenceSet,
    evidence_b: &EvidenceSet,
) -> (Vec<ClaimFlag>, String, Vec<String>) {
    let mut flags = Vec::new();
    let mut dropped = Vec::new();
    let Some(v) = extract_json(raw) else {
        return (flags, String::new(), dropped);
    };
    let rationale = str_field(&v, &["rationale", "reasoning"]).unwrap_or("").to_string();
    let Some(items) = v.get("claim_flags").and_then(Value::as_array) else {
        return (flags, rationale, dropped);
    };
    for item in items {
        let side = str_field(item, &["side"]).map(|s| s.to_ascii_lowercase()).or_else(|| {
            str_field(item, &["hypothesis", "supports"])
                .and_then(|h| match_label(h, task))
                .map(|l| if l == task.label_a { "a".into() } else { "b".into() })
        });
        let index = item.get("index").and_then(|i| {
            i.as_u64()
                .or_else(|| i.as_str().and_then(|s| s.trim().trim_matches(['[', ']']).parse().ok()))
        });
        let flag = str_field(item, &["flag"]).and_then(FlagKind::parse);
        let (set, ok) = match side.as_deref() {
            Some("a") => (evidence_a, true),
            Some("b") => (evidence_b, true),
            _ => (evidence_a, false),
        };
        match (ok, index, flag) {
            (true, Some(i), Some(flag)) if (i as usize) < set.claims.len() => flags.push(ClaimFlag {
                index: i as usize,
                hypothesis: set.hypothesis.clone(),
                flag,
            }),
            _ => dropped.push(item.to_string()),
        }
    }
    (flags, rationale, dropped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::builtin_task;

    fn cxr() -> TaskSpec {
        builtin_task("edema_vs_pneumonia").unwrap()
    }

    fn derm() -> TaskSpec {
        builtin_task("melanoma_vs_atypical_nevus").unwrap()
    }

    fn label(d: Option<ParsedDecision>) -> Option<(String, Extraction)> {
        d.map(|d| (d.label.to_string(), d.extraction))
    }

    #[test]
    fn structured_field_wins() {
        let d = parse_decision(r#"{"final_diagnosis": "pneumonia"}"#, &cxr());
        assert_eq!(label(d), Some(("pneumonia".into(), Extraction::Structured)));
    }

    #[test]
    fn final_marker_counts_as_structured() {
        assert_eq!(
            label(parse_decision("FINAL: edema", &cxr())),
            Some(("edema".into(), Extraction::Structured))
        );
        assert_eq!(
            label(parse_decision("reasoning...\n**FINAL:** Melanoma.", &derm())),
            Some(("melanoma".into(), Extraction::Structured))
        );
    }

    #[test]
    fn keyword_fallback_on_single_mention() {
        let d = parse_decision("The pattern is most consistent with atypical nevus overall.", &derm());
        assert_eq!(label(d), Some(("atypical nevus".into(), Extraction::KeywordFallback)));
    }

    #[test]
    fn both_labels_in_tail_is_ambiguous() {
        assert!(parse_decision("could be edema or pneumonia", &cxr()).is_none());
    }

    #[test]
    fn keyword_fallback_only_looks_at_the_tail() {
        let text = format!("pneumonia {} the answer is edema", "x".repeat(500));
        assert_eq!(
            label(parse_decision(&text, &cxr())),
            Some(("edema".into(), Extraction::KeywordFallback))
        );
    }

    #[test]
    fn keyword_respects_word_boundaries_and_containment() {
        let mut task = derm();
        task.label_a = "nevus".into();
        // "atypical nevus" must not also count as "nevus"
        assert_eq!(
            label(parse_decision("consistent with atypical nevus", &task))
                .unwrap()
                .0,
            "atypical nevus"
        );
        assert!(parse_decision("melanomas everywhere", &derm()).is_none());
    }

    #[test]
    fn unknown_structured_label_falls_through() {
        let d = parse_decision(r#"{"final_diagnosis": "effusion"} so edema"#, &cxr());
        assert_eq!(label(d), Some(("edema".into(), Extraction::KeywordFallback)));
    }

    #[test]
    fn evidence_from_structured_block() {
        let raw = r#"Here you go:
```json
{"claims": [
 {"finding": "irregular streaks", "location": "periphery", "supports": "melanoma", "confidence": "high"},
 {"finding": "blue-white veil", "supports": "melanoma"},
 {"finding": "regression structures", "supports": "melanoma", "confidence": "LOW"},
 {"finding": "atypical network", "supports": "melanoma"}
]}
```"#;
        let set = parse_evidence(raw, "melanoma", &derm());
        assert_eq!(set.claims.len(), 4);
        assert_eq!(set.coercions, 0);
        assert_eq!(set.claims[0].location.as_deref(), Some("periphery"));
        assert_eq!(set.claims[2].confidence, Some(Confidence::Low));
        assert_eq!(set.raw_text, raw);
    }

    #[test]
    fn opposing_support_is_coerced() {
        let raw =
            r#"{"claims": [{"finding": "a", "supports": "melanoma"}, {"finding": "b", "supports": "Atypical Nevus"}]}"#;
        let set = parse_evidence(raw, "melanoma", &derm());
        assert_eq!(set.coercions, 1);
        assert!(set.claims.iter().all(|c| c.supports == "melanoma"));
    }

    #[test]
    fn bullet_fallback() {
        let set = parse_evidence("- irregular streaks\n- blue-white veil", "melanoma", &derm());
        let f: Vec<_> = set.claims.iter().map(|c| c.finding.as_str()).collect();
        assert_eq!(f, vec!["irregular streaks", "blue-white veil"]);
    }

    #[test]
    fn unrecoverable_evidence_is_empty() {
        let set = parse_evidence("I cannot help with that.", "edema", &cxr());
        assert!(set.claims.is_empty());
        assert_eq!(set.hypothesis, "edema");
    }

    #[test]
    fn flags_out_of_range_are_dropped() {
        let task = derm();
        let a = parse_evidence("- x\n- y", "melanoma", &task);
        let b = parse_evidence("- z", "atypical nevus", &task);
        let raw = r#"{"claim_flags": [
            {"side": "a", "index": 1, "flag": "contradictory"},
            {"side": "b", "index": 3, "flag": "unsupported"},
            {"hypothesis": "atypical nevus", "index": "0", "flag": "supported"}
        ], "rationale": "r", "final_diagnosis": "atypical nevus"}"#;
        let (flags, rationale, dropped) = parse_claim_flags(raw, &task, &a, &b);
        assert_eq!(rationale, "r");
        assert_eq!(flags.len(), 2);
        assert_eq!(
            flags[0],
            ClaimFlag {
                index: 1,
                hypothesis: "melanoma".into(),
                flag: FlagKind::Contradictory
            }
        );
        assert_eq!(flags[1].hypothesis, "atypical nevus");
        assert_eq!(dropped.len(), 1);
    }

    #[test]
    fn render_numbers_claims_from_zero() {
        let set = parse_evidence(
            r#"{"claims":[{"finding":"f","location":"l","confidence":"high"}]}"#,
            "edema",
            &cxr(),
        );
        assert_eq!(
            render_evidence('A', &set),
            "Evidence for hypothesis A: edema\n[0] f (location: l; confidence: high)"
        );
        assert_eq!(
            render_evidence('B', &EvidenceSet::empty("pneumonia", "")),
            "Evidence for hypothesis B: pneumonia\n(no claims)"
        );
    }
}
