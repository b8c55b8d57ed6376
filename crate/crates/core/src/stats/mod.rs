//! Classification metrics and paired significance tests.
//!
//! ABSTAIN is scored as a wrong prediction: an abstention on a positive-class
//! study counts as a false negative, on a negative-class study as a false
//! positive.

use serde::{Deserialize, Serialize};

use crate::types::Prediction;

mod bootstrap;
mod mcnemar;
mod permutation;

pub use bootstrap::{bootstrap_ci, BootstrapCi};
pub use mcnemar::{discordant_counts, mcnemar, MCNEMAR_EXACT_MAX};
pub use permutation::permutation_test;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    F1,
    Youden,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::F1 => "f1",
            Metric::Youden => "youden",
        }
    }

    pub fn eval(self, c: &Confusion) -> Result<f64, StatsError> {
        match self {
            Metric::Accuracy => c.accuracy(),
            Metric::F1 => c.f1(),
            Metric::Youden => c.youden(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("length mismatch: {0} predictions vs {1} truths")]
    LengthMismatch(usize, usize),
    #[error("{metric} is undefined: {reason}")]
    Undefined { metric: &'static str, reason: &'static str },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Confusion counts relative to a declared positive class.
///
/// `abstain_count` is informational: abstentions are already included in
/// `fn_` or `fp`, so `tp + fp + fn_ + tn` is the number of scored studies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub abstain_count: u64,
}

impl Confusion {
    pub fn n(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn accuracy(&self) -> Result<f64, StatsError> {
        if self.n() == 0 {
            return Err(StatsError::Undefined {
                metric: "accuracy",
                reason: "no scored studies",
            });
        }
        Ok((self.tp + self.tn) as f64 / self.n() as f64)
    }

    pub fn f1(&self) -> Result<f64, StatsError> {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            return Err(StatsError::Undefined {
                metric: "f1",
                reason: "2tp + fp + fn = 0",
            });
        }
        Ok(2.0 * self.tp as f64 / denom as f64)
    }

    pub fn sensitivity(&self) -> Result<f64, StatsError> {
        let denom = self.tp + self.fn_;
        if denom == 0 {
            return Err(StatsError::Undefined {
                metric: "sensitivity",
                reason: "no positive-class studies",
            });
        }
        Ok(self.tp as f64 / denom as f64)
    }

    pub fn specificity(&self) -> Result<f64, StatsError> {
        let denom = self.tn + self.fp;
        if denom == 0 {
            return Err(StatsError::Undefined {
                metric: "specificity",
                reason: "no negative-class studies",
            });
        }
        Ok(self.tn as f64 / denom as f64)
    }

    /// Sensitivity + specificity − 1.
    pub fn youden(&self) -> Result<f64, StatsError> {
        let sens = self.sensitivity().map_err(|_| StatsError::Undefined {
            metric: "youden",
            reason: "no positive-class studies",
        })?;
        let spec = self.specificity().map_err(|_| StatsError::Undefined {
            metric: "youden",
            reason: "no negative-class studies",
        })?;
        Ok(sens + spec - 1.0)
    }
}

/// Compact per-study encoding used by the resampling loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Call {
    Positive,
    Negative,
    Abstain,
}

pub(crate) fn encode(
    preds: &[Prediction],
    truths: &[String],
    positive: &str,
) -> Result<(Vec<Call>, Vec<bool>), StatsError> {
    if preds.len() != truths.len() {
        return Err(StatsError::LengthMismatch(preds.len(), truths.len()));
    }
    let calls = preds
        .iter()
        .map(|p| match p {
            Prediction::Abstain => Call::Abstain,
            Prediction::Label(l) if l == positive => Call::Positive,
            Prediction::Label(_) => Call::Negative,
        })
        .collect();
    let pos = truths.iter().map(|t| t == positive).collect();
    Ok((calls, pos))
}

#[inline]
pub(crate) fn tally(c: &mut Confusion, call: Call, truth_positive: bool) {
    match (call, truth_positive) {
        (Call::Positive, true) => c.tp += 1,
        (Call::Positive, false) => c.fp += 1,
        (Call::Negative, true) => c.fn_ += 1,
        (Call::Negative, false) => c.tn += 1,
        (Call::Abstain, true) => {
            c.fn_ += 1;
            c.abstain_count += 1;
        }
        (Call::Abstain, false) => {
            c.fp += 1;
            c.abstain_count += 1;
        }
    }
}

pub(crate) fn confusion_of(calls: &[Call], truth_positive: &[bool]) -> Confusion {
    let mut c = Confusion::default();
    for (&call, &t) in calls.iter().zip(truth_positive) {
        tally(&mut c, call, t);
    }
    c
}

/// Confusion counts of `preds` against `truths` for `positive`.
pub fn confusion(preds: &[Prediction], truths: &[String], positive: &str) -> Result<Confusion, StatsError> {
    let (calls, pos) = encode(preds, truths, positive)?;
    Ok(confusion_of(&calls, &pos))
}

/// Which test produced a [`TestResult`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    McnemarExact,
    McnemarCc,
    Permutation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub method: TestMethod,
    /// Discordant pairs for McNemar, permutations drawn for the permutation test.
    pub n_effective: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}
