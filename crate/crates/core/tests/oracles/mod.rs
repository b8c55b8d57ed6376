//! Independent reference computations shared by the core tests and the
//! acceptance target. Nothing here calls into the library's statistics code.

#![allow(dead_code)]

use care_core::Prediction;

/// Counts by direct enumeration: (tp, fp, fn, tn). An abstention is a wrong
/// call, so it lands in fn for a positive truth and fp otherwise.
pub fn brute_confusion(preds: &[Prediction], truths: &[String], positive: &str) -> (u64, u64, u64, u64) {
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    let mut tn = 0;
    for i in 0..preds.len() {
        let truth_pos = truths[i] == positive;
        let said_pos = match &preds[i] {
            Prediction::Label(l) => Some(l == positive),
            Prediction::Abstain => None,
        };
        if truth_pos {
            if said_pos == Some(true) {
                tp += 1;
            } else {
                fn_ += 1;
            }
        } else if said_pos == Some(false) {
            tn += 1;
        } else {
            fp += 1;
        }
    }
    (tp, fp, fn_, tn)
}

pub fn brute_accuracy(c: (u64, u64, u64, u64)) -> Option<f64> {
    let (tp, fp, fn_, tn) = c;
    let n = tp + fp + fn_ + tn;
    (n > 0).then(|| (tp + tn) as f64 / n as f64)
}

pub fn brute_f1(c: (u64, u64, u64, u64)) -> Option<f64> {
    let (tp, fp, fn_, _) = c;
    let d = 2 * tp + fp + fn_;
    (d > 0).then(|| (2 * tp) as f64 / d as f64)
}

pub fn brute_youden(c: (u64, u64, u64, u64)) -> Option<f64> {
    let (tp, fp, fn_, tn) = c;
    if tp + fn_ == 0 || tn + fp == 0 {
        return None;
    }
    Some(tp as f64 / (tp + fn_) as f64 + tn as f64 / (tn + fp) as f64 - 1.0)
}

pub fn brute_metric(name: &str, c: (u64, u64, u64, u64)) -> Option<f64> {
    match name {
        "accuracy" => brute_accuracy(c),
        "f1" => brute_f1(c),
        "youden" => brute_youden(c),
        other => panic!("unknown metric {other}"),
    }
}

fn choose(n: u64, k: u64) -> u128 {
    // Pascal's triangle row, exact in integers
    let mut row = vec![1u128];
    for _ in 0..n {
        let mut next = vec![1u128; row.len() + 1];
        for j in 1..row.len() {
            next[j] = row[j - 1] + row[j];
        }
        row = next;
    }
    row[k as usize]
}

/// Two-sided exact McNemar p from an integer binomial sum.
pub fn mcnemar_exact_oracle(b: u64, c: u64) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let k = b.min(c);
    let tail: u128 = (0..=k).map(|i| choose(n, i)).sum();
    let p = 2.0 * tail as f64 / 2f64.powi(n as i32);
    p.min(1.0)
}

/// Chi-square(1) upper tail by composite Simpson quadrature of the density.
pub fn chi2_1_sf_quadrature(x: f64) -> f64 {
    let density = |t: f64| (-t / 2.0).exp() / (2.0 * std::f64::consts::PI * t).sqrt();
    let upper = x + 400.0;
    let steps = 400_000usize;
    let h = (upper - x) / steps as f64;
    let mut s = density(x) + density(upper);
    for i in 1..steps {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * density(x + i as f64 * h);
    }
    s * h / 3.0
}

/// Exact sign-flip p-value limit: the fraction of all 2^n swap patterns
/// whose |Δ*| reaches |Δ| (or whose metric is undefined).
pub fn permutation_exhaustive(
    preds1: &[Prediction],
    preds2: &[Prediction],
    truths: &[String],
    positive: &str,
    metric: &str,
) -> (u64, u64) {
    let n = truths.len();
    assert!(n <= 20, "enumeration is exponential");
    let value = |p: &[Prediction]| brute_metric(metric, brute_confusion(p, truths, positive));
    let observed = (value(preds1).expect("defined") - value(preds2).expect("defined")).abs();
    let mut extreme = 0u64;
    let total = 1u64 << n;
    for mask in 0..total {
        let mut x = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            if mask >> i & 1 == 1 {
                x.push(preds2[i].clone());
                y.push(preds1[i].clone());
            } else {
                x.push(preds1[i].clone());
                y.push(preds2[i].clone());
            }
        }
        match (value(&x), value(&y)) {
            (Some(a), Some(b)) if (a - b).abs() < observed - 1e-12 => {}
            _ => extreme += 1,
        }
    }
    (extreme, total)
}
