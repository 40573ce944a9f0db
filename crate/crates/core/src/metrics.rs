//! Evaluation harness: ranking metrics and the per-run report.
//!
//! AUC is computed from average ranks (ties count half) and is checked
//! against a quadratic pairwise oracle in the test suite; Spearman is the
//! Pearson correlation of average-rank vectors. The report slices the base
//! model's squared prediction error by uncertainty decile and stratum, in
//! two modes: against observed labels, and against the generator's true
//! click probabilities when a ground-truth table is supplied.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::engine::InferenceTrace;
use crate::error::{Error, Result};
use crate::model::sigmoid;

/// Average ranks (1-based); ties share the mean of their rank range.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Probability that a uniformly random positive outranks a uniformly random
/// negative, ties counted one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!(
            "scores ({}) and labels ({}) differ in length",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(
            "AUC needs both classes present".into(),
        ));
    }
    let ranks = average_ranks(scores);
    let rank_sum_pos: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 1)
        .map(|(r, _)| *r)
        .sum();
    let np = n_pos as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Mean binary cross-entropy; scores clamped into `[1e-12, 1 - 1e-12]`.
pub fn logloss(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!(
            "scores ({}) and labels ({}) differ in length",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Data("logloss of an empty batch".into()));
    }
    let mut total = 0.0;
    for (&p, &y) in scores.iter().zip(labels) {
        let p = p.clamp(1e-12, 1.0 - 1e-12);
        total -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / scores.len() as f64)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Data("spearman inputs differ in length".into()));
    }
    if a.len() < 2 {
        return Err(Error::Metric("spearman needs at least two points".into()));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        let dx = x - mean;
        let dy = y - mean;
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return Err(Error::Metric(
            "spearman undefined for a constant input vector".into(),
        ));
    }
    Ok(cov / (var_a.sqrt() * var_b.sqrt()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratumReport {
    pub name: String,
    pub count: usize,
    /// AUC of sigmoid(base logit); absent when the stratum is single-class.
    pub base_auc: Option<f64>,
    /// AUC of the engine's final probability.
    pub final_auc: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub logloss: f64,
    /// Metrics of the raw backbone score recorded in the same traces.
    pub base_auc: f64,
    pub base_logloss: f64,
    /// Spearman between `u` and label-based squared error of the base score;
    /// absent when degenerate (constant inputs).
    pub spearman_u_vs_sqerr: Option<f64>,
    /// Same, against ground-truth probabilities; present with a truth table.
    pub spearman_u_vs_sqerr_true: Option<f64>,
    /// Mean label-based squared error per uncertainty decile (10 entries);
    /// absent when the corpus has fewer than 10 instances.
    pub decile_errors: Option<Vec<f64>>,
    pub decile_errors_true: Option<Vec<f64>>,
    /// Low / medium / high uncertainty strata (cuts at 0.3 and 0.7).
    pub strata: Vec<StratumReport>,
    pub mean_model_calls: f64,
    /// Counts of allocated path budgets `0..=k_max`.
    pub k_histogram: Vec<u64>,
}

fn decile_means(order: &[usize], errors: &[f64]) -> Option<Vec<f64>> {
    let n = order.len();
    if n < 10 {
        return None;
    }
    // First (n mod 10) deciles take one extra element, so sizes differ by
    // at most one.
    let base = n / 10;
    let rem = n % 10;
    let mut out = Vec::with_capacity(10);
    let mut start = 0;
    for d in 0..10 {
        let size = base + usize::from(d < rem);
        let slice = &order[start..start + size];
        out.push(slice.iter().map(|&i| errors[i]).sum::<f64>() / size as f64);
        start += size;
    }
    Some(out)
}

fn stratum_slice(name: &str, idx: &[usize], base: &[f64], fin: &[f64], labels: &[u8]) -> StratumReport {
    let s: Vec<f64> = idx.iter().map(|&i| base[i]).collect();
    let f: Vec<f64> = idx.iter().map(|&i| fin[i]).collect();
    let y: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
    StratumReport {
        name: name.to_string(),
        count: idx.len(),
        base_auc: auc(&s, &y).ok(),
        final_auc: auc(&f, &y).ok(),
    }
}

/// Assembles the evaluation report for a trace set.
///
/// `labels` maps instance id to its observed label; every trace must match.
/// `truth`, when given, supplies ground-truth click probabilities and
/// enables the true-error columns.
pub fn report(
    traces: &[InferenceTrace],
    labels: &HashMap<u64, u8>,
    truth: Option<&HashMap<u64, f64>>,
    k_max: usize,
) -> Result<EvalReport> {
    if traces.is_empty() {
        return Err(Error::Data("no traces to evaluate".into()));
    }
    let n = traces.len();
    let mut y = Vec::with_capacity(n);
    let mut final_probs = Vec::with_capacity(n);
    let mut base_probs = Vec::with_capacity(n);
    let mut u = Vec::with_capacity(n);
    let mut sqerr = Vec::with_capacity(n);
    let mut sqerr_true = truth.map(|_| Vec::with_capacity(n));
    let mut k_histogram = vec![0u64; k_max + 1];
    let mut calls = 0usize;

    for t in traces {
        let label = *labels.get(&t.instance_id).ok_or_else(|| {
            Error::Data(format!("no label for instance {}", t.instance_id))
        })?;
        let base = sigmoid(t.base_logit);
        y.push(label);
        final_probs.push(t.final_prob);
        base_probs.push(base);
        u.push(t.u);
        sqerr.push((base - f64::from(label)).powi(2));
        if let Some(acc) = sqerr_true.as_mut() {
            let p_true = *truth.unwrap().get(&t.instance_id).ok_or_else(|| {
                Error::Data(format!("no ground truth for instance {}", t.instance_id))
            })?;
            acc.push((base - p_true).powi(2));
        }
        if t.k >= k_histogram.len() {
            return Err(Error::Data(format!(
                "trace k = {} exceeds k_max = {k_max}",
                t.k
            )));
        }
        k_histogram[t.k] += 1;
        calls += t.model_calls;
    }

    // Deterministic uncertainty order: ties broken by instance id.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| {
        u[a].total_cmp(&u[b])
            .then_with(|| traces[a].instance_id.cmp(&traces[b].instance_id))
    });

    let low: Vec<usize> = order.iter().copied().filter(|&i| u[i] < 0.3).collect();
    let medium: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| (0.3..0.7).contains(&u[i]))
        .collect();
    let high: Vec<usize> = order.iter().copied().filter(|&i| u[i] >= 0.7).collect();

    Ok(EvalReport {
        auc: auc(&final_probs, &y)?,
        logloss: logloss(&final_probs, &y)?,
        base_auc: auc(&base_probs, &y)?,
        base_logloss: logloss(&base_probs, &y)?,
        spearman_u_vs_sqerr: spearman(&u, &sqerr).ok(),
        spearman_u_vs_sqerr_true: sqerr_true
            .as_ref()
            .and_then(|e| spearman(&u, e).ok()),
        decile_errors: decile_means(&order, &sqerr),
        decile_errors_true: sqerr_true.as_ref().and_then(|e| decile_means(&order, e)),
        strata: vec![
            stratum_slice("low", &low, &base_probs, &final_probs, &y),
            stratum_slice("medium", &medium, &base_probs, &final_probs, &y),
            stratum_slice("high", &high, &base_probs, &final_probs, &y),
        ],
        mean_model_calls: calls as f64 / n as f64,
        k_histogram,
    })
}

/// Plain-text strata table for eyeballing.
pub fn render_strata_table(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str("stratum          count     base AUC   final AUC       delta\n");
    let bounds = ["u < 0.3", "0.3 <= u < 0.7", "u >= 0.7"];
    for (s, b) in report.strata.iter().zip(bounds) {
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "-".into(),
        };
        let delta = match (s.base_auc, s.final_auc) {
            (Some(a), Some(b)) => format!("{:+.4}", b - a),
            _ => "-".into(),
        };
        out.push_str(&format!(
            "{:<16} {:>6} {:>12} {:>11} {:>11}\n",
            format!("{} ({})", s.name, b),
            s.count,
            fmt(s.base_auc),
            fmt(s.final_auc),
            delta
        ));
    }
    out.push_str(&format!(
        "overall          {:>6} {:>12.4} {:>11.4} {:>11}\n",
        report.k_histogram.iter().sum::<u64>(),
        report.base_auc,
        report.auc,
        format!("{:+.4}", report.auc - report.base_auc)
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_perfect_and_tied() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.9], &[1, 0]).unwrap(), 0.0);
        assert!(auc(&[0.4, 0.6], &[1, 1]).is_err());
    }

    /// Quadratic pairwise oracle, ties one half.
    fn auc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let mut total = 0.0;
        let mut pairs = 0.0;
        for (i, (&si, &yi)) in scores.iter().zip(labels).enumerate() {
            if yi != 1 {
                continue;
            }
            for (j, (&sj, &yj)) in scores.iter().zip(labels).enumerate() {
                if i == j || yj != 0 {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    total += 1.0;
                } else if si == sj {
                    total += 0.5;
                }
            }
        }
        total / pairs
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = crate::rng::SplitMix64::new(2024);
        for trial in 0..30 {
            let n = 20 + (rng.next_u64() % 200) as usize;
            // Coarse score grid forces plenty of ties.
            let scores: Vec<f64> = (0..n).map(|_| (rng.next_u64() % 10) as f64 / 10.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| (rng.next_u64() % 2) as u8).collect();
            labels[0] = 1;
            labels[1] = 0;
            let fast = auc(&scores, &labels).unwrap();
            let slow = auc_oracle(&scores, &labels);
            assert!((fast - slow).abs() < 1e-12, "trial {trial}: {fast} vs {slow}");
        }
    }

    #[test]
    fn logloss_known_values() {
        let half = logloss(&[0.5], &[1]).unwrap();
        assert!((half - std::f64::consts::LN_2).abs() < 1e-12);
        // Perfectly wrong scores clamp to the 1e-12 bound: -ln(1e-12) ~ 27.63,
        // up to the dust in 1 - (1 - 1e-12).
        let clamped = logloss(&[1.0], &[0]).unwrap();
        assert!((clamped - 27.63).abs() < 0.01);
        assert!(clamped.is_finite());
        assert!(logloss(&[0.5, 0.5], &[1]).is_err());
    }

    #[test]
    fn logloss_matches_direct_sum() {
        let mut rng = crate::rng::SplitMix64::new(5);
        let n = 500;
        let scores: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
        let labels: Vec<u8> = (0..n).map(|_| (rng.next_u64() % 2) as u8).collect();
        let direct: f64 = scores
            .iter()
            .zip(&labels)
            .map(|(&p, &y)| {
                let p = p.clamp(1e-12, 1.0 - 1e-12);
                -(f64::from(y) * p.ln() + (1.0 - f64::from(y)) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n as f64;
        assert!((logloss(&scores, &labels).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn spearman_monotone_and_reversed() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let up = [10.0, 20.0, 30.0, 40.0];
        let down = [4.0, 3.0, 2.0, 1.0];
        assert!((spearman(&a, &up).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &down).unwrap() + 1.0).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0, 1.0], &a[..3]).is_err());
        assert!(spearman(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn spearman_with_ties_matches_direct_rank_oracle() {
        let a = [1.0, 2.0, 2.0, 3.0, 3.0, 3.0, 4.0];
        let b = [2.0, 1.0, 4.0, 4.0, 5.0, 3.0, 6.0];
        // Pearson on hand-computed average ranks.
        let ra = [1.0, 2.5, 2.5, 5.0, 5.0, 5.0, 7.0];
        let rb = [2.0, 1.0, 4.5, 4.5, 6.0, 3.0, 7.0];
        let mean_a: f64 = ra.iter().sum::<f64>() / 7.0;
        let mean_b: f64 = rb.iter().sum::<f64>() / 7.0;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for i in 0..7 {
            cov += (ra[i] - mean_a) * (rb[i] - mean_b);
            va += (ra[i] - mean_a).powi(2);
            vb += (rb[i] - mean_b).powi(2);
        }
        let expect = cov / (va.sqrt() * vb.sqrt());
        assert!((spearman(&a, &b).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn average_ranks_handle_ties() {
        let r = average_ranks(&[3.0, 1.0, 3.0, 2.0]);
        assert_eq!(r, vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn decile_sizes_differ_by_at_most_one() {
        let order: Vec<usize> = (0..103).collect();
        let errors: Vec<f64> = (0..103).map(|i| i as f64).collect();
        let means = decile_means(&order, &errors).unwrap();
        assert_eq!(means.len(), 10);
        // 103 = 3 deciles of 11 + 7 of 10; means must be increasing here.
        for w in means.windows(2) {
            assert!(w[1] > w[0]);
        }
    }
}
