use statrs::function::erf::erfc;

use super::{StatsError, TestMethod, TestResult};
use crate::types::Prediction;

/// Largest discordant total handled by the exact binomial branch.
pub const MCNEMAR_EXACT_MAX: u64 = 25;

/// Discordant pair counts `(b, c)`: `b` = model 1 right and model 2 wrong,
/// `c` = the reverse. ABSTAIN is wrong.
pub fn discordant_counts(
    preds1: &[Prediction],
    preds2: &[Prediction],
    truths: &[String],
) -> Result<(u64, u64), StatsError> {
    if preds1.len() != truths.len() {
        return Err(StatsError::LengthMismatch(preds1.len(), truths.len()));
    }
    if preds2.len() != truths.len() {
        return Err(StatsError::LengthMismatch(preds2.len(), truths.len()));
    }
    let mut b = 0;
    let mut c = 0;
    for ((p1, p2), t) in preds1.iter().zip(preds2).zip(truths) {
        match (p1.is_correct(t), p2.is_correct(t)) {
            (true, false) => b += 1,
            (false, true) => c += 1,
            _ => {}
        }
    }
    Ok((b, c))
}

/// Lower tail `P(X <= k)` for `X ~ Binomial(n, 1/2)`.
fn binom_half_cdf(n: u64, k: u64) -> f64 {
    let mut coef = 1.0f64;
    let mut sum = 0.0f64;
    for i in 0..=k.min(n) {
        if i > 0 {
            coef = coef * (n - i + 1) as f64 / i as f64;
        }
        sum += coef;
    }
    sum * 0.5f64.powi(n as i32)
}

/// McNemar's test on discordant counts.
///
/// `b + c <= 25`: exact two-sided binomial, `p = min(1, 2 P(X <= min(b, c)))`,
/// statistic `min(b, c)`. Otherwise the continuity-corrected chi-square
/// `(|b - c| - 1)^2 / (b + c)` on one degree of freedom.
pub fn mcnemar(b: u64, c: u64) -> TestResult {
    let n = b + c;
    if n == 0 {
        return TestResult {
            statistic: 0.0,
            p_value: 1.0,
            method: TestMethod::McnemarExact,
            n_effective: 0,
            seed: None,
        };
    }
    if n <= MCNEMAR_EXACT_MAX {
        let k = b.min(c);
        let p = (2.0 * binom_half_cdf(n, k)).min(1.0);
        TestResult {
            statistic: k as f64,
            p_value: p,
            method: TestMethod::McnemarExact,
            n_effective: n,
            seed: None,
        }
    } else {
        let diff = b.abs_diff(c) as f64 - 1.0;
        let stat = diff * diff / n as f64;
        // chi-square(1) survival: P(Z^2 > s) = erfc(sqrt(s / 2))
        let p = erfc((stat / 2.0).sqrt()).clamp(0.0, 1.0);
        TestResult {
            statistic: stat,
            p_value: p,
            method: TestMethod::McnemarCc,
            n_effective: n,
            seed: None,
        }
    }
}
