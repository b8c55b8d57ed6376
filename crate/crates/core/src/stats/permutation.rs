use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{encode, tally, Confusion, Metric, StatsError, TestMethod, TestResult};
use crate::canonical::derive_seed;
use crate::exec;
use crate::types::Prediction;

// Float slack when comparing |Δ*| against |Δ|; permuted differences that equal
// the observed one up to rounding must count as ties.
const TIE_EPS: f64 = 1e-12;

/// Paired sign-flip permutation test on `metric(preds1) - metric(preds2)`.
///
/// Each permutation swaps `preds1[i]` and `preds2[i]` independently with
/// probability 1/2. Two-sided `p = (1 + #{|Δ*| >= |Δ|}) / (1 + n_perm)`.
/// A permutation on which the metric is undefined counts as extreme.
/// Permutation `j` draws from its own stream keyed by `(seed, j)`.
pub fn permutation_test(
    preds1: &[Prediction],
    preds2: &[Prediction],
    truths: &[String],
    positive: &str,
    metric: Metric,
    n_perm: u64,
    seed: u64,
) -> Result<TestResult, StatsError> {
    if n_perm == 0 {
        return Err(StatsError::InvalidArgument("n_perm must be at least 1".into()));
    }
    let (c1, pos) = encode(preds1, truths, positive)?;
    let (c2, _) = encode(preds2, truths, positive)?;
    let observed = metric.eval(&super::confusion_of(&c1, &pos))? - metric.eval(&super::confusion_of(&c2, &pos))?;
    let threshold = observed.abs() - TIE_EPS;
    let n = pos.len();
    let extreme = exec::count_indexed(n_perm as usize, |j| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b"perm", &(j as u64).to_le_bytes()]));
        let mut x = Confusion::default();
        let mut y = Confusion::default();
        let mut bits = 0u64;
        for i in 0..n {
            if i % 64 == 0 {
                bits = rng.next_u64();
            }
            let swap = (bits >> (i % 64)) & 1 == 1;
            let (a, b) = if swap { (c2[i], c1[i]) } else { (c1[i], c2[i]) };
            tally(&mut x, a, pos[i]);
            tally(&mut y, b, pos[i]);
        }
        match (metric.eval(&x), metric.eval(&y)) {
            (Ok(mx), Ok(my)) => (mx - my).abs() >= threshold,
            _ => true,
        }
    }) as u64;
    Ok(TestResult {
        statistic: observed,
        p_value: (1 + extreme) as f64 / (1 + n_perm) as f64,
        method: TestMethod::Permutation,
        n_effective: n_perm,
        seed: Some(seed),
    })
}
