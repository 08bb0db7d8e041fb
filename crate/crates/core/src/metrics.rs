//! Rank-based ROC-AUC (Mann-Whitney with average ranks for ties), masked
//! per-task reporting, and multi-seed aggregation.

use serde::{Deserialize, Serialize};

use crate::data::TaskSet;

/// AUC via the rank statistic:
/// (sum of positive ranks - n_pos(n_pos+1)/2) / (n_pos * n_neg),
/// ties given average rank. Undefined when either class is absent.
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores/labels length mismatch");
    let n = scores.len();
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&y, _)| y == 1.0)
        .map(|(_, &r)| r)
        .sum();
    Some((rank_sum - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0) / (n_pos as f64 * n_neg as f64))
}

/// Per-task AUC with missing-label masking, mirroring one result row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub per_task: Vec<Option<f64>>,
    pub mean_auc: Option<f64>,
    pub n_pos: Vec<usize>,
    pub n_neg: Vec<usize>,
}

/// Score each task over the rows where its mask is 1.
pub fn masked_auc_report(
    scores: &[f64],
    labels: &[f64],
    mask: &[f64],
    tasks: &TaskSet,
) -> AucReport {
    let k = tasks.len();
    assert_eq!(scores.len(), labels.len());
    assert_eq!(scores.len(), mask.len());
    assert_eq!(scores.len() % k, 0);
    let rows = scores.len() / k;
    let mut per_task = Vec::with_capacity(k);
    let mut n_pos = Vec::with_capacity(k);
    let mut n_neg = Vec::with_capacity(k);
    for t in 0..k {
        let mut s = Vec::new();
        let mut y = Vec::new();
        for r in 0..rows {
            if mask[r * k + t] == 1.0 {
                s.push(scores[r * k + t]);
                y.push(labels[r * k + t]);
            }
        }
        let pos = y.iter().filter(|&&v| v == 1.0).count();
        n_pos.push(pos);
        n_neg.push(y.len() - pos);
        per_task.push(roc_auc(&s, &y));
    }
    let defined: Vec<f64> = per_task.iter().flatten().copied().collect();
    let mean_auc = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    AucReport {
        per_task,
        mean_auc,
        n_pos,
        n_neg,
    }
}

/// Mean and sample standard deviation (n-1) of one metric across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl SeedAggregate {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { values, mean, std }
    }
}

/// Aggregates for mean AUC and each task across a set of reports.
/// Tasks undefined in some report are aggregated over the reports where
/// they are defined.
pub struct ReportAggregate {
    pub mean_auc: Option<SeedAggregate>,
    pub per_task: Vec<Option<SeedAggregate>>,
}

pub fn aggregate_seeds(reports: &[AucReport]) -> ReportAggregate {
    assert!(!reports.is_empty());
    let k = reports[0].per_task.len();
    let means: Vec<f64> = reports.iter().filter_map(|r| r.mean_auc).collect();
    let mean_auc = if means.is_empty() {
        None
    } else {
        Some(SeedAggregate::from_values(means))
    };
    let per_task = (0..k)
        .map(|t| {
            let vals: Vec<f64> = reports.iter().filter_map(|r| r.per_task[t]).collect();
            if vals.is_empty() {
                None
            } else {
                Some(SeedAggregate::from_values(vals))
            }
        })
        .collect();
    ReportAggregate { mean_auc, per_task }
}

/// JSON form of one evaluation: field names are fixed for golden tests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportJson {
    pub split: String,
    pub seed: u64,
    pub per_task: std::collections::BTreeMap<String, Option<f64>>,
    pub mean_auc: Option<f64>,
    pub n_pos: Vec<usize>,
    pub n_neg: Vec<usize>,
}

pub fn report_to_json(report: &AucReport, tasks: &TaskSet, split: &str, seed: u64) -> ReportJson {
    ReportJson {
        split: split.to_string(),
        seed,
        per_task: tasks
            .names()
            .iter()
            .cloned()
            .zip(report.per_task.iter().copied())
            .collect(),
        mean_auc: report.mean_auc,
        n_pos: report.n_pos.clone(),
        n_neg: report.n_neg.clone(),
    }
}

/// O(n_pos * n_neg) pairwise AUC, ties counted one half. Test oracle for
/// the rank-based implementation; kept here so acceptance suites and unit
/// tests share one copy.
pub fn roc_auc_pairwise(scores: &[f64], labels: &[f64]) -> Option<f64> {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 1.0)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y == 0.0)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut total = 0.0;
    for &p in &pos {
        for &q in &neg {
            if p > q {
                total += 1.0;
            } else if p == q {
                total += 0.5;
            }
        }
    }
    Some(total / (pos.len() * neg.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_separation() {
        let auc = roc_auc(&[0.9, 0.8, 0.2, 0.1], &[1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((auc - 1.0).abs() < 1e-15);
    }

    #[test]
    fn full_ties_half() {
        let auc = roc_auc(&[0.5, 0.5, 0.5, 0.5], &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((auc - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mixed_case_half() {
        // concordant pairs: 2 of 4
        let auc = roc_auc(&[0.8, 0.6, 0.7, 0.2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((auc - 0.5).abs() < 1e-15);
    }

    #[test]
    fn undefined_single_class() {
        assert!(roc_auc(&[0.1, 0.2], &[1.0, 1.0]).is_none());
        assert!(roc_auc(&[0.1, 0.2], &[0.0, 0.0]).is_none());
    }

    #[test]
    fn matches_pairwise_oracle_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let n = rng.random_range(2..200);
            // quantized scores inject plenty of ties
            let scores: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 8.0).round() / 8.0).collect();
            let labels: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 }).collect();
            match (roc_auc(&scores, &labels), roc_auc_pairwise(&scores, &labels)) {
                (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12, "{a} vs {b}"),
                (None, None) => {}
                other => panic!("disagreement on definedness: {other:?}"),
            }
        }
    }

    #[test]
    fn invariant_under_monotone_transform_and_negation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scores: Vec<f64> = (0..50).map(|_| rng.random()).collect();
        let labels: Vec<f64> = (0..50).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let base = roc_auc(&scores, &labels).unwrap();
        let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp()).collect();
        assert!((roc_auc(&transformed, &labels).unwrap() - base).abs() < 1e-12);
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        assert!((roc_auc(&negated, &labels).unwrap() - (1.0 - base)).abs() < 1e-12);
    }

    #[test]
    fn masked_report_excludes_fully_masked_task() {
        let tasks = TaskSet::default();
        // 4 rows x 4 tasks; task 2 fully masked, others perfectly scored
        let mut scores = vec![0.0; 16];
        let mut labels = vec![0.0; 16];
        let mut mask = vec![1.0; 16];
        for r in 0..4 {
            let y = if r < 2 { 1.0 } else { 0.0 };
            for t in 0..4 {
                scores[r * 4 + t] = if y == 1.0 { 0.9 } else { 0.1 };
                labels[r * 4 + t] = y;
            }
            mask[r * 4 + 2] = 0.0;
        }
        let rep = masked_auc_report(&scores, &labels, &mask, &tasks);
        assert!(rep.per_task[2].is_none());
        assert_eq!(rep.n_pos[2] + rep.n_neg[2], 0);
        assert!((rep.mean_auc.unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn masked_report_matches_pairwise() {
        let tasks = TaskSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let rows = 50;
        let k = tasks.len();
        let scores: Vec<f64> = (0..rows * k).map(|_| (rng.random::<f64>() * 4.0).round() / 4.0).collect();
        let labels: Vec<f64> = (0..rows * k).map(|_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 }).collect();
        let mask: Vec<f64> = (0..rows * k).map(|_| if rng.random::<f64>() < 0.8 { 1.0 } else { 0.0 }).collect();
        let rep = masked_auc_report(&scores, &labels, &mask, &tasks);
        for t in 0..k {
            let mut s = Vec::new();
            let mut y = Vec::new();
            for r in 0..rows {
                if mask[r * k + t] == 1.0 {
                    s.push(scores[r * k + t]);
                    y.push(labels[r * k + t]);
                }
            }
            match (rep.per_task[t], roc_auc_pairwise(&s, &y)) {
                (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12),
                (None, None) => {}
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn aggregate_identical_reports_zero_std() {
        let rep = AucReport {
            per_task: vec![Some(0.8); 4],
            mean_auc: Some(0.8),
            n_pos: vec![1; 4],
            n_neg: vec![1; 4],
        };
        let agg = aggregate_seeds(&[rep.clone(), rep.clone(), rep]);
        let m = agg.mean_auc.unwrap();
        assert!((m.mean - 0.8).abs() < 1e-15);
        assert!(m.std.abs() < 1e-12);
    }

    #[test]
    fn aggregate_table_row_values() {
        let agg = SeedAggregate::from_values(vec![0.91, 0.92, 0.82, 0.91, 0.92, 0.82]);
        assert!((agg.mean - 0.8833333333333333).abs() < 1e-12);
        assert!((agg.std - 0.0492).abs() < 1e-3);
        assert_eq!(format!("{:.2} ± {:.2}", agg.mean, agg.std), "0.88 ± 0.05");
    }

    #[test]
    fn aggregate_two_values() {
        let agg = SeedAggregate::from_values(vec![0.8, 0.9]);
        assert!((agg.mean - 0.85).abs() < 1e-15);
        assert!((agg.std - 0.05_f64 * 2.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn single_value_std_zero() {
        let agg = SeedAggregate::from_values(vec![0.7]);
        assert_eq!(agg.std, 0.0);
    }

    #[test]
    fn report_json_field_names() {
        let tasks = TaskSet::default();
        let rep = AucReport {
            per_task: vec![Some(0.5), None, Some(1.0), Some(0.75)],
            mean_auc: Some(0.75),
            n_pos: vec![1, 0, 2, 3],
            n_neg: vec![1, 2, 2, 1],
        };
        let json = serde_json::to_value(report_to_json(&rep, &tasks, "e0_e1/e2/e3", 7)).unwrap();
        for field in ["split", "seed", "per_task", "mean_auc", "n_pos", "n_neg"] {
            assert!(json.get(field).is_some(), "missing {field}");
        }
        assert_eq!(json["per_task"]["Cardiomegaly"], 0.5);
    }
}
