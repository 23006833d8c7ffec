//! Threshold-free ranking metrics and a paired sign test.

use crate::error::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("non-finite score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!(
            "metric undefined with a single class ({pos} positives, {neg} negatives)"
        )));
    }
    Ok((pos, neg))
}

fn sorted_order(scores: &[f64], descending: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        let o = scores[a].total_cmp(&scores[b]);
        if descending {
            o.reverse()
        } else {
            o
        }
    });
    idx
}

/// Area under the ROC curve as the Mann-Whitney statistic: the probability a
/// random positive outranks a random negative, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (np, nn) = check_inputs(scores, labels)?;
    let idx = sorted_order(scores, false);
    let mut u = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut p, mut q) = (0usize, 0usize);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                p += 1;
            } else {
                q += 1;
            }
            j += 1;
        }
        u += (p * neg_below) as f64 + 0.5 * (p * q) as f64;
        neg_below += q;
        i = j;
    }
    Ok(u / (np as f64 * nn as f64))
}

/// Step-wise average precision, `Σ precision_k · Δrecall_k`, with tied
/// scores entering as one threshold.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (np, _) = check_inputs(scores, labels)?;
    let idx = sorted_order(scores, true);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let prev = tp;
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        if tp > prev {
            ap += (tp as f64 / (tp + fp) as f64) * ((tp - prev) as f64 / np as f64);
        }
        i = j;
    }
    Ok(ap)
}

/// One-sided paired sign test of `a > b`. Ties are dropped. Returns
/// `(wins, trials, p)` with `p = P(X >= wins)` for `X ~ Bin(trials, 1/2)`.
pub fn sign_test(a: &[f64], b: &[f64]) -> Result<(usize, usize, f64)> {
    if a.len() != b.len() {
        return Err(Error::Metric(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let n = wins + losses;
    if n == 0 {
        return Ok((0, 0, 1.0));
    }
    let p = (wins..=n).map(|k| binomial(n, k)).sum::<f64>() / 2f64.powi(n as i32);
    Ok((wins, n, p))
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case() {
        let s = [0.1, 0.4, 0.35, 0.8];
        let l = [false, false, true, true];
        assert_eq!(auroc(&s, &l).unwrap(), 0.75);
        // ranks: 0.8(+) 0.4(-) 0.35(+) 0.1(-) -> (1/1 + 2/3) / 2
        assert!((average_precision(&s, &l).unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn ties_count_half() {
        assert_eq!(auroc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_error() {
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::Metric(_))));
        assert!(matches!(average_precision(&[0.1], &[false]), Err(Error::Metric(_))));
    }

    #[test]
    fn sign_test_values() {
        let (w, n, p) = sign_test(&[2.0; 5], &[1.0; 5]).unwrap();
        assert_eq!((w, n), (5, 5));
        assert_eq!(p, 1.0 / 32.0);
        let (_, n, p) = sign_test(&[2.0, 1.0, 0.0], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(n, 2);
        assert_eq!(p, 0.75);
    }
}
