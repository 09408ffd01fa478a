//! Classification and regression metrics.

use alloc::string::String;
use alloc::vec::Vec;

use crate::data::TargetKind;
use crate::error::{shape_err, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationMetrics {
    pub acc: f64,
    /// Absent when only one class is present.
    pub auc: Option<f64>,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionMetrics {
    pub mse: f64,
    pub mae: f64,
    /// Absent when either series is constant.
    pub pearson: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub split: String,
    pub n_samples: usize,
    pub loss: Option<f64>,
    pub classification: Option<ClassificationMetrics>,
    pub regression: Option<RegressionMetrics>,
    /// Free-form counters such as peak memory or seconds per step.
    pub counters: Vec<(String, f64)>,
}

impl MetricsReport {
    /// The headline metric: AUC for classification, Pearson ρ for regression.
    pub fn primary(&self) -> Option<f64> {
        match (&self.classification, &self.regression) {
            (Some(c), _) => c.auc,
            (_, Some(r)) => r.pearson,
            _ => None,
        }
    }
}

/// Area under the ROC curve through the Mann–Whitney rank statistic with
/// midranks for ties. `labels` are 0/1.
pub fn auc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&y| y > 0.5).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps midranks integral so the statistic is exact.
    let mut rank2_pos: u64 = 0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        for &o in &order[i..=j] {
            if labels[o] > 0.5 {
                rank2_pos += mid2;
            }
        }
        i = j + 1;
    }
    let u2 = rank2_pos - (n_pos * (n_pos + 1)) as u64;
    Some(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / math::sqrt(saa * sbb)).clamp(-1.0, 1.0))
}

/// Metrics for predictions (logits or reals) against labels.
pub fn compute_metrics(preds: &[f64], labels: &[f64], kind: TargetKind, split: &str) -> Result<MetricsReport> {
    if preds.len() != labels.len() || preds.len() < 2 {
        return Err(shape_err!("need at least 2 paired predictions, got {} and {}", preds.len(), labels.len()));
    }
    let mut report = MetricsReport { split: split.into(), n_samples: preds.len(), ..Default::default() };
    match kind {
        TargetKind::BinaryClassification => {
            let (mut tp, mut fp, mut fneg, mut correct) = (0usize, 0usize, 0usize, 0usize);
            for (&z, &y) in preds.iter().zip(labels) {
                let (p, t) = (z > 0.0, y > 0.5);
                correct += (p == t) as usize;
                match (p, t) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    _ => {}
                }
            }
            let denom = 2 * tp + fp + fneg;
            report.classification = Some(ClassificationMetrics {
                acc: correct as f64 / preds.len() as f64,
                auc: auc(preds, labels),
                f1: if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 },
            });
        }
        TargetKind::Regression => {
            let n = preds.len() as f64;
            let mse = preds.iter().zip(labels).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / n;
            let mae = preds.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / n;
            report.regression = Some(RegressionMetrics { mse, mae, pearson: pearson(preds, labels) });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise(scores: &[f64], labels: &[f64]) -> Option<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] > 0.5 && labels[j] < 0.5 {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        (den > 0.0).then(|| num / den)
    }

    #[test]
    fn small_cases() {
        assert_eq!(auc(&[0.2, 0.8, 0.6], &[0.0, 1.0, 0.0]), Some(1.0));
        assert_eq!(auc(&[0.2, 0.8, 0.6], &[0.0, 1.0, 0.0]), pairwise(&[0.2, 0.8, 0.6], &[0.0, 1.0, 0.0]));
        assert_eq!(auc(&[0.5, 0.5], &[0.0, 1.0]), Some(0.5));
        assert_eq!(auc(&[0.1, 0.2], &[1.0, 1.0]), None);

        let r = compute_metrics(&[-2.0, -1.0, 1.0, 3.0], &[0.0, 0.0, 1.0, 1.0], TargetKind::BinaryClassification, "test").unwrap();
        let c = r.classification.unwrap();
        assert_eq!((c.acc, c.auc, c.f1), (1.0, Some(1.0), 1.0));

        let y = [0.3, -1.0, 2.0];
        let r = compute_metrics(&y, &y, TargetKind::Regression, "val").unwrap().regression.unwrap();
        assert_eq!((r.mse, r.mae), (0.0, 0.0));
        assert!((r.pearson.unwrap() - 1.0).abs() < 1e-12);
        assert!(compute_metrics(&[1.0], &[1.0], TargetKind::Regression, "x").is_err());
    }

    proptest! {
        #[test]
        fn auc_equals_pairwise(v in prop::collection::vec((0u8..6, any::<bool>()), 2..50)) {
            let scores: Vec<f64> = v.iter().map(|p| p.0 as f64 * 0.25).collect();
            let labels: Vec<f64> = v.iter().map(|p| p.1 as u8 as f64).collect();
            prop_assert_eq!(auc(&scores, &labels), pairwise(&scores, &labels));
        }
    }
}
