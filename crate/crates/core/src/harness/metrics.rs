//! Evaluation metrics.

use crate::error::{KtError, Result};

/// Area under the ROC curve by rank sum, ties counted one half.
///
/// Ranks are kept doubled so the statistic stays an integer until the final
/// division; the result is bit-identical to [`auc_pairwise`].
pub fn auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let (pos, neg) = class_counts(labels, scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Positions i..j share the mean 1-based rank (i + 1 + j) / 2.
        let doubled = (i + 1 + j) as u128;
        let positives = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        doubled_rank_sum += doubled * positives;
        i = j;
    }
    let p = pos as u128;
    let numerator = doubled_rank_sum - p * (p + 1);
    Ok(numerator as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Direct count over all positive/negative pairs.
pub fn auc_pairwise(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let (pos, neg) = class_counts(labels, scores)?;
    let mut numerator: u128 = 0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            numerator += if si > sj {
                2
            } else if si == sj {
                1
            } else {
                0
            };
        }
    }
    Ok(numerator as f64 / (2 * pos as u128 * neg as u128) as f64)
}

fn class_counts(labels: &[bool], scores: &[f64]) -> Result<(usize, usize)> {
    if labels.len() != scores.len() {
        return Err(KtError::InvalidInput(format!(
            "{} labels for {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(KtError::InvalidInput("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(KtError::InvalidInput("AUC needs both classes".into()));
    }
    Ok((pos, neg))
}

/// Share of records where `score >= 0.5` matches the label.
pub fn accuracy(labels: &[bool], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() || labels.is_empty() {
        return Err(KtError::InvalidInput("accuracy needs matching nonempty inputs".into()));
    }
    let hits = labels.iter().zip(scores).filter(|(&l, &s)| (s >= 0.5) == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va * vb).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub auc: f64,
    pub acc: f64,
    pub count: usize,
}

impl EvalReport {
    pub fn new(labels: &[bool], scores: &[f64]) -> Result<Self> {
        Ok(Self {
            auc: auc(labels, scores)?,
            acc: accuracy(labels, scores)?,
            count: labels.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_edge_cases() {
        let labels = [false, false, true, true];
        assert_eq!(auc(&labels, &[0.1, 0.2, 0.8, 0.9]).unwrap(), 1.0);
        assert_eq!(auc(&labels, &[0.9, 0.8, 0.2, 0.1]).unwrap(), 0.0);
        assert_eq!(auc(&labels, &[0.5; 4]).unwrap(), 0.5);
        // One tie between a positive and a negative: (3 + 0.5) / 4.
        assert_eq!(auc(&labels, &[0.1, 0.5, 0.5, 0.9]).unwrap(), 0.875);
        assert!(auc(&[true, true], &[0.1, 0.2]).is_err());
        assert!(auc(&[], &[]).is_err());
    }

    #[test]
    fn accuracy_threshold() {
        assert_eq!(accuracy(&[true, false, true, false], &[0.5, 0.49, 0.2, 0.7]).unwrap(), 0.5);
    }

    #[test]
    fn pearson_of_linear_map() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.5]) - 0.9986).abs() < 1e-3);
    }
}
