use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{confusion_of, encode, Metric, StatsError};
use crate::canonical::derive_seed;
use crate::exec;
use crate::types::Prediction;

const MAX_REDRAWS_PER_RESAMPLE: u32 = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    pub n_boot: usize,
    /// Resamples redrawn because the metric was undefined on them.
    pub redraws: u64,
    pub seed: u64,
}

/// Percentile bootstrap interval from case resampling with replacement.
pub fn bootstrap_ci(
    preds: &[Prediction],
    truths: &[String],
    positive: &str,
    metric: Metric,
    n_boot: usize,
    seed: u64,
    level: f64,
) -> Result<BootstrapCi, StatsError> {
    if n_boot < 100 {
        return Err(StatsError::InvalidArgument(format!(
            "n_boot must be >= 100 (got {n_boot})"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(StatsError::InvalidArgument(format!(
            "level must be in (0, 1) (got {level})"
        )));
    }
    let (calls, pos) = encode(preds, truths, positive)?;
    let n = calls.len();
    if n == 0 {
        return Err(StatsError::InvalidArgument("no studies to resample".into()));
    }
    let draws = exec::map_indexed(n_boot, |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b"boot", &(b as u64).to_le_bytes()]));
        let mut sc = Vec::with_capacity(n);
        let mut sp = Vec::with_capacity(n);
        for redraws in 0..=MAX_REDRAWS_PER_RESAMPLE {
            sc.clear();
            sp.clear();
            for _ in 0..n {
                let k = rng.random_range(0..n);
                sc.push(calls[k]);
                sp.push(pos[k]);
            }
            if let Ok(v) = metric.eval(&confusion_of(&sc, &sp)) {
                return Ok((v, redraws as u64));
            }
        }
        Err(StatsError::Undefined {
            metric: metric.name(),
            reason: "undefined on every redrawn resample",
        })
    });
    let mut values = Vec::with_capacity(n_boot);
    let mut redraws = 0;
    for d in draws {
        let (v, r) = d?;
        values.push(v);
        redraws += r;
    }
    values.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok(BootstrapCi {
        lo: quantile(&values, alpha),
        hi: quantile(&values, 1.0 - alpha),
        level,
        n_boot,
        redraws,
        seed,
    })
}

// Linear interpolation between order statistics (type 7).
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}
