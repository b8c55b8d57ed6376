//! Qualitative case export from CARE-family runs.

use std::str::FromStr;

use anyhow::{bail, Result};
use care_core::{Adjudication, EvidenceSet, FlagKind, Prediction, RunRecord};
use serde::Serialize;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FlagCounts {
    pub supported: usize,
    pub unsupported: usize,
    pub contradictory: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FlagSummary {
    pub a: FlagCounts,
    pub b: FlagCounts,
}

impl FlagSummary {
    fn total(&self, kind: FlagKind) -> usize {
        self.a.get(kind) + self.b.get(kind)
    }
}

impl FlagCounts {
    fn get(&self, kind: FlagKind) -> usize {
        match kind {
            FlagKind::Supported => self.supported,
            FlagKind::Unsupported => self.unsupported,
            FlagKind::Contradictory => self.contradictory,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QualitativeCase {
    pub study_id: String,
    pub pipeline_id: String,
    pub truth: String,
    pub prediction: Prediction,
    pub evidence_a: EvidenceSet,
    pub evidence_b: EvidenceSet,
    pub adjudication: Adjudication,
    pub flag_summary: FlagSummary,
    /// Claims per side not flagged unsupported or contradictory.
    pub surviving: [usize; 2],
}

impl QualitativeCase {
    pub fn from_record(r: &RunRecord) -> Option<Self> {
        let art = r.parsed.as_ref()?;
        let mut summary = FlagSummary::default();
        let mut rejected = [
            vec![false; art.evidence_a.claims.len()],
            vec![false; art.evidence_b.claims.len()],
        ];
        for f in &art.adjudication.claim_flags {
            let side = if f.hypothesis == art.evidence_a.hypothesis {
                0
            } else {
                1
            };
            let counts = if side == 0 { &mut summary.a } else { &mut summary.b };
            match f.flag {
                FlagKind::Supported => counts.supported += 1,
                FlagKind::Unsupported => counts.unsupported += 1,
                FlagKind::Contradictory => counts.contradictory += 1,
            }
            if f.flag != FlagKind::Supported {
                if let Some(slot) = rejected[side].get_mut(f.index) {
                    *slot = true;
                }
            }
        }
        let surviving = [0, 1].map(|s| rejected[s].iter().filter(|x| !**x).count());
        Some(Self {
            study_id: r.study_id.clone(),
            pipeline_id: r.pipeline_id.clone(),
            truth: r.truth.clone(),
            prediction: r.prediction.clone(),
            evidence_a: art.evidence_a.clone(),
            evidence_b: art.evidence_b.clone(),
            adjudication: art.adjudication.clone(),
            flag_summary: summary,
            surviving,
        })
    }

    /// The judge sided with the hypothesis that kept fewer claims.
    pub fn overturned(&self) -> bool {
        let side = match self.prediction.label() {
            Some(l) if l == self.evidence_a.hypothesis => 0,
            Some(l) if l == self.evidence_b.hypothesis => 1,
            _ => return false,
        };
        self.surviving[side] < self.surviving[1 - side]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cmp {
    Gt,
    Ge,
    Eq,
    Le,
    Lt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Both,
    A,
    B,
}

/// Case selector.
///
/// `<flag>[_a|_b]<op><n>` with flag in supported/unsupported/contradictory and
/// op in `> >= = <= <`, or one of `overturned`, `correct`, `wrong`, `abstain`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CaseFilter {
    Count {
        kind: FlagKind,
        side: Side,
        cmp: Cmp,
        n: usize,
    },
    Overturned,
    Correct,
    Wrong,
    Abstain,
}

impl FromStr for CaseFilter {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "overturned" => return Ok(CaseFilter::Overturned),
            "correct" => return Ok(CaseFilter::Correct),
            "wrong" => return Ok(CaseFilter::Wrong),
            "abstain" => return Ok(CaseFilter::Abstain),
            _ => {}
        }
        let Some(pos) = s.find(['>', '<', '=']) else {
            bail!("unrecognized filter {s:?}");
        };
        let (lhs, rest) = s.split_at(pos);
        let (cmp, num) = if let Some(n) = rest.strip_prefix(">=") {
            (Cmp::Ge, n)
        } else if let Some(n) = rest.strip_prefix("<=") {
            (Cmp::Le, n)
        } else if let Some(n) = rest.strip_prefix('>') {
            (Cmp::Gt, n)
        } else if let Some(n) = rest.strip_prefix('<') {
            (Cmp::Lt, n)
        } else {
            (Cmp::Eq, rest.trim_start_matches('='))
        };
        let n: usize = num
            .trim()
            .parse()
            .map_err(|_| anyhow::anyhow!("bad count in filter {s:?}"))?;
        let lhs = lhs.trim();
        let (name, side) = if let Some(x) = lhs.strip_suffix("_a") {
            (x, Side::A)
        } else if let Some(x) = lhs.strip_suffix("_b") {
            (x, Side::B)
        } else {
            (lhs, Side::Both)
        };
        let Some(kind) = FlagKind::parse(name) else {
            bail!("unknown flag kind {name:?} in filter {s:?}");
        };
        Ok(CaseFilter::Count { kind, side, cmp, n })
    }
}

impl CaseFilter {
    pub fn matches(&self, c: &QualitativeCase) -> bool {
        match self {
            CaseFilter::Overturned => c.overturned(),
            CaseFilter::Correct => c.prediction.is_correct(&c.truth),
            CaseFilter::Wrong => !c.prediction.is_correct(&c.truth),
            CaseFilter::Abstain => c.prediction.is_abstain(),
            CaseFilter::Count { kind, side, cmp, n } => {
                let v = match side {
                    Side::Both => c.flag_summary.total(*kind),
                    Side::A => c.flag_summary.a.get(*kind),
                    Side::B => c.flag_summary.b.get(*kind),
                };
                match cmp {
                    Cmp::Gt => v > *n,
                    Cmp::Ge => v >= *n,
                    Cmp::Eq => v == *n,
                    Cmp::Le => v <= *n,
                    Cmp::Lt => v < *n,
                }
            }
        }
    }
}

/// Cases from `records` that satisfy every filter, in study id order.
pub fn select_cases(records: &[RunRecord], filters: &[CaseFilter]) -> Result<Vec<QualitativeCase>> {
    let mut out = Vec::new();
    for r in records {
        let Some(case) = QualitativeCase::from_record(r) else {
            bail!(
                "record {} of pipeline {} carries no CARE artifacts",
                r.study_id,
                r.pipeline_id
            );
        };
        if filters.iter().all(|f| f.matches(&case)) {
            out.push(case);
        }
    }
    out.sort_by(|a, b| a.study_id.cmp(&b.study_id));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_grammar() {
        assert_eq!(
            "contradictory>0".parse::<CaseFilter>().unwrap(),
            CaseFilter::Count {
                kind: FlagKind::Contradictory,
                side: Side::Both,
                cmp: Cmp::Gt,
                n: 0
            }
        );
        assert_eq!(
            "unsupported_b >= 2".parse::<CaseFilter>().unwrap(),
            CaseFilter::Count {
                kind: FlagKind::Unsupported,
                side: Side::B,
                cmp: Cmp::Ge,
                n: 2
            }
        );
        assert_eq!("overturned".parse::<CaseFilter>().unwrap(), CaseFilter::Overturned);
        assert!("bogus>1".parse::<CaseFilter>().is_err());
        assert!("contradictory>x".parse::<CaseFilter>().is_err());
        assert!("nonsense".parse::<CaseFilter>().is_err());
    }
}
