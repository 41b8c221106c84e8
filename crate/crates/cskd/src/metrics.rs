//! Evaluation suite: top-k error, expected calibration error with
//! equal-width bins, feature-space recall@k, hierarchical accuracy, and the
//! misclassified log-probability export.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One evaluated sample: temperature-1 softmax row, ground truth, and the
/// penultimate-layer feature vector.
#[derive(Clone, Debug)]
pub struct PredictionRecord {
    pub probs: Vec<f64>,
    pub label: usize,
    pub penultimate: Vec<f64>,
}

impl PredictionRecord {
    /// Argmax with ties resolved to the lowest class index.
    pub fn predicted(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn confidence(&self) -> f64 {
        self.probs[self.predicted()]
    }

    pub fn is_correct(&self) -> bool {
        self.predicted() == self.label
    }
}

/// Fraction of records whose label is outside the `k` highest-probability
/// classes; probability ties rank the lower class index first.
pub fn topk_error(records: &[PredictionRecord], k: usize) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Domain("top-k error over an empty record set".into()));
    }
    let classes = records[0].probs.len();
    if k == 0 || k > classes {
        return Err(Error::Domain(format!("k = {k} outside [1, {classes}]")));
    }
    let mut misses = 0usize;
    let mut order: Vec<usize> = Vec::with_capacity(classes);
    for rec in records {
        order.clear();
        order.extend(0..classes);
        order.sort_by(|&a, &b| {
            rec.probs[b]
                .partial_cmp(&rec.probs[a])
                .expect("finite probabilities")
                .then(a.cmp(&b))
        });
        if !order[..k].contains(&rec.label) {
            misses += 1;
        }
    }
    Ok(misses as f64 / records.len() as f64)
}

/// One confidence bin of a reliability table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Mean confidence of the bin's members, 0 for an empty bin.
    pub conf: f64,
    /// Fraction correct among the bin's members, 0 for an empty bin.
    pub acc: f64,
}

/// Reliability table over `m` equal-width bins plus the scalar expected
/// calibration error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<BinStat>,
    pub n: usize,
    pub ece: f64,
}

impl CalibrationReport {
    pub fn num_bins(&self) -> usize {
        self.bins.len()
    }
}

/// Bin index (0-based) for a confidence value: bin `m` covers
/// `((m-1)/M, m/M]`, with confidence 0 assigned to the first bin.
/// Both this and the test oracle compare against the same `j/M` edges.
fn bin_of(conf: f64, m: usize) -> usize {
    let mut lo = 0usize; // edges index: bin b covers (b/m, (b+1)/m]
    let mut hi = m - 1;
    while lo < hi {
        let mid = (lo + hi) / 2;
        // conf belongs to a bin <= mid iff conf <= (mid+1)/m
        if conf <= (mid + 1) as f64 / m as f64 {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo
}

/// Expected calibration error with `m` equal-width confidence bins.
/// Confidence is the max-class probability; correctness compares the
/// (tie-broken) argmax against the label.
pub fn ece(records: &[PredictionRecord], m: usize) -> Result<CalibrationReport> {
    if records.is_empty() {
        return Err(Error::Domain("calibration over an empty record set".into()));
    }
    if m == 0 {
        return Err(Error::Domain("bin count must be >= 1".into()));
    }
    let mut count = vec![0usize; m];
    let mut conf_sum = vec![0.0; m];
    let mut correct = vec![0usize; m];
    for rec in records {
        let c = rec.confidence();
        let b = bin_of(c, m);
        count[b] += 1;
        conf_sum[b] += c;
        if rec.is_correct() {
            correct[b] += 1;
        }
    }
    let n = records.len();
    let mut bins = Vec::with_capacity(m);
    let mut ece = 0.0;
    for b in 0..m {
        let (conf, acc) = if count[b] > 0 {
            (conf_sum[b] / count[b] as f64, correct[b] as f64 / count[b] as f64)
        } else {
            (0.0, 0.0)
        };
        if count[b] > 0 {
            ece += count[b] as f64 / n as f64 * (acc - conf).abs();
        }
        bins.push(BinStat {
            lo: b as f64 / m as f64,
            hi: (b + 1) as f64 / m as f64,
            count: count[b],
            conf,
            acc,
        });
    }
    Ok(CalibrationReport { bins, n, ece })
}

/// Percentage of records with at least one same-label record among their
/// `k` nearest neighbors (Euclidean distance over penultimate features,
/// distance ties broken by lower record index).
pub fn recall_at_k(records: &[PredictionRecord], k: usize) -> Result<f64> {
    if records.len() < 2 {
        return Err(Error::Domain("recall@k needs at least two records".into()));
    }
    if k == 0 {
        return Err(Error::Domain("k must be >= 1".into()));
    }
    if records.len() < k + 1 {
        return Err(Error::Domain(format!(
            "recall@{k} needs at least {} records, got {}",
            k + 1,
            records.len()
        )));
    }
    let n = records.len();
    let mut hits = 0usize;
    // Selection by repeated minimum over (squared distance, index) keys;
    // k is tiny compared to n in every caller.
    let mut dist = vec![0.0f64; n];
    for i in 0..n {
        for (j, rec) in records.iter().enumerate() {
            dist[j] = squared_l2(&records[i].penultimate, &rec.penultimate);
        }
        let mut taken = vec![false; n];
        taken[i] = true;
        let mut hit = false;
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for j in 0..n {
                if taken[j] {
                    continue;
                }
                match best {
                    None => best = Some(j),
                    Some(b) => {
                        if dist[j] < dist[b] {
                            best = Some(j);
                        }
                    }
                }
            }
            let b = best.expect("k < n by precondition");
            taken[b] = true;
            if records[b].label == records[i].label {
                hit = true;
                break;
            }
        }
        if hit {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64 * 100.0)
}

pub(crate) fn squared_l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Coarse-label confusion counts obtained by mapping fine predictions
/// through `fine_to_coarse`; rows are true coarse labels, columns predicted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchyReport {
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
}

pub fn hierarchical_accuracy(
    pred_fine: &[usize],
    true_fine: &[usize],
    fine_to_coarse: &[usize],
) -> Result<HierarchyReport> {
    if pred_fine.len() != true_fine.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            pred_fine.len(),
            true_fine.len()
        )));
    }
    if pred_fine.is_empty() {
        return Err(Error::Domain("hierarchical accuracy over an empty set".into()));
    }
    let coarse_of = |fine: usize| -> Result<usize> {
        fine_to_coarse
            .get(fine)
            .copied()
            .ok_or_else(|| Error::Map(format!("fine label {fine} has no coarse mapping")))
    };
    let num_coarse = fine_to_coarse.iter().copied().max().unwrap_or(0) + 1;
    let mut confusion = vec![vec![0usize; num_coarse]; num_coarse];
    let mut agree = 0usize;
    for (&p, &t) in pred_fine.iter().zip(true_fine) {
        let (cp, ct) = (coarse_of(p)?, coarse_of(t)?);
        confusion[ct][cp] += 1;
        if cp == ct {
            agree += 1;
        }
    }
    Ok(HierarchyReport {
        confusion,
        accuracy: agree as f64 / pred_fine.len() as f64,
    })
}

/// `(ln p_predicted, ln p_true)` rows for every misclassified record.
pub fn misclassified_logprobs(records: &[PredictionRecord]) -> Vec<(f64, f64)> {
    records
        .iter()
        .filter(|r| !r.is_correct())
        .map(|r| {
            (
                r.probs[r.predicted()].max(f64::MIN_POSITIVE).ln(),
                r.probs[r.label].max(f64::MIN_POSITIVE).ln(),
            )
        })
        .collect()
}

// ---- csv writers -----------------------------------------------------------

/// `metric,split,value` rows.
pub fn metrics_csv(rows: &[(String, String, f64)]) -> String {
    let mut out = String::from("metric,split,value\n");
    for (metric, split, value) in rows {
        out.push_str(&format!("{metric},{split},{value}\n"));
    }
    out
}

/// `bin_lo,bin_hi,count,conf,acc` rows, one per bin.
pub fn reliability_csv(report: &CalibrationReport) -> String {
    let mut out = String::from("bin_lo,bin_hi,count,conf,acc\n");
    for b in &report.bins {
        out.push_str(&format!("{},{},{},{},{}\n", b.lo, b.hi, b.count, b.conf, b.acc));
    }
    out
}

/// `log_p_pred,log_p_true` rows for the misclassified export.
pub fn logprob_csv(rows: &[(f64, f64)]) -> String {
    let mut out = String::from("log_p_pred,log_p_true\n");
    for (p, t) in rows {
        out.push_str(&format!("{p},{t}\n"));
    }
    out
}

/// `label,f0,...` rows of penultimate features.
pub fn features_csv(records: &[PredictionRecord]) -> String {
    let dim = records.first().map(|r| r.penultimate.len()).unwrap_or(0);
    let mut out = String::from("label");
    for j in 0..dim {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for r in records {
        out.push_str(&r.label.to_string());
        for v in &r.penultimate {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(probs: Vec<f64>, label: usize) -> PredictionRecord {
        PredictionRecord { probs, label, penultimate: vec![] }
    }

    fn rec_at(pos: f64, label: usize) -> PredictionRecord {
        PredictionRecord { probs: vec![1.0], label, penultimate: vec![pos] }
    }

    #[test]
    fn topk_perfect_and_full_k() {
        let records = vec![rec(vec![0.9, 0.1], 0), rec(vec![0.2, 0.8], 1)];
        assert_eq!(topk_error(&records, 1).unwrap(), 0.0);
        assert_eq!(topk_error(&records, 2).unwrap(), 0.0);
    }

    #[test]
    fn topk_counts_misses() {
        let records = vec![
            rec(vec![0.9, 0.1, 0.0], 0),
            rec(vec![0.1, 0.8, 0.1], 1),
            rec(vec![0.5, 0.3, 0.2], 0),
            rec(vec![0.6, 0.3, 0.1], 2),
        ];
        assert_eq!(topk_error(&records, 1).unwrap(), 0.25);
        assert!(topk_error(&records, 4).is_err());
        assert!(topk_error(&records, 0).is_err());
    }

    #[test]
    fn topk_tie_prefers_lower_class() {
        // uniform row: classes rank 0, 1, 2...; label 1 is inside top-2
        let records = vec![rec(vec![1.0 / 3.0; 3], 1)];
        assert_eq!(topk_error(&records, 1).unwrap(), 1.0);
        assert_eq!(topk_error(&records, 2).unwrap(), 0.0);
    }

    #[test]
    fn ece_perfect_confidence() {
        let records = vec![rec(vec![1.0, 0.0], 0); 10];
        let report = ece(&records, 20).unwrap();
        assert_eq!(report.ece, 0.0);
        assert_eq!(report.n, 10);
    }

    #[test]
    fn ece_hand_binned_example() {
        // confidences {0.9, 0.9, 0.6, 0.6}, correctness {1, 0, 1, 1}, M=20
        let records = vec![
            rec(vec![0.9, 0.1], 0),
            rec(vec![0.9, 0.1], 1),
            rec(vec![0.6, 0.4], 0),
            rec(vec![0.6, 0.4], 0),
        ];
        let report = ece(&records, 20).unwrap();
        assert_eq!(report.ece, 0.4);
        let occupied: Vec<&BinStat> = report.bins.iter().filter(|b| b.count > 0).collect();
        assert_eq!(occupied.len(), 2);
        assert_eq!(occupied[0].count, 2);
        assert!((occupied[0].conf - 0.6).abs() < 1e-15);
        assert_eq!(occupied[0].acc, 1.0);
        assert_eq!(occupied[1].acc, 0.5);
    }

    #[test]
    fn ece_single_record() {
        let records = vec![rec(vec![0.7, 0.3], 0)];
        let report = ece(&records, 20).unwrap();
        assert!((report.ece - 0.3).abs() < 1e-12);
    }

    #[test]
    fn ece_counts_partition_samples() {
        let records: Vec<_> = (0..57)
            .map(|i| rec(vec![0.5 + (i as f64) * 0.008, 0.5 - (i as f64) * 0.008], i % 2))
            .collect();
        for m in [1, 7, 20] {
            let report = ece(&records, m).unwrap();
            let total: usize = report.bins.iter().map(|b| b.count).sum();
            assert_eq!(total, records.len());
        }
    }

    #[test]
    fn ece_zero_confidence_lands_in_first_bin() {
        // force confidence 0 via an all-zero probability row
        let records = vec![rec(vec![0.0, 0.0], 0)];
        let report = ece(&records, 10).unwrap();
        assert_eq!(report.bins[0].count, 1);
    }

    #[test]
    fn ece_rejects_empty() {
        assert!(ece(&[], 20).is_err());
    }

    #[test]
    fn recall_two_records() {
        let same = vec![rec_at(0.0, 1), rec_at(1.0, 1)];
        assert_eq!(recall_at_k(&same, 1).unwrap(), 100.0);
        let diff = vec![rec_at(0.0, 0), rec_at(1.0, 1)];
        assert_eq!(recall_at_k(&diff, 1).unwrap(), 0.0);
    }

    #[test]
    fn recall_three_point_line() {
        // positions 0, 1, 10 with labels A, A, B: the B point's nearest is A
        let records = vec![rec_at(0.0, 0), rec_at(1.0, 0), rec_at(10.0, 1)];
        let r = recall_at_k(&records, 1).unwrap();
        assert!((r - 200.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn recall_preconditions() {
        let records = vec![rec_at(0.0, 0), rec_at(1.0, 1)];
        assert!(recall_at_k(&records, 2).is_err());
        assert!(recall_at_k(&records[..1], 1).is_err());
        assert!(recall_at_k(&records, 0).is_err());
    }

    #[test]
    fn hierarchy_identity_and_within_group_errors() {
        let map = vec![0, 0, 1, 1];
        let all_right = hierarchical_accuracy(&[0, 1, 2, 3], &[0, 1, 2, 3], &map).unwrap();
        assert_eq!(all_right.accuracy, 1.0);
        assert_eq!(all_right.confusion[0][1], 0);
        assert_eq!(all_right.confusion[1][0], 0);

        // fine wrong but same coarse keeps coarse accuracy at 1
        let same_group = hierarchical_accuracy(&[1, 0, 3, 2], &[0, 1, 2, 3], &map).unwrap();
        assert_eq!(same_group.accuracy, 1.0);

        // one cross-group error among four
        let one_cross = hierarchical_accuracy(&[0, 1, 2, 0], &[0, 1, 2, 3], &map).unwrap();
        assert_eq!(one_cross.accuracy, 0.75);
        assert_eq!(one_cross.confusion[1][0], 1);

        assert!(matches!(
            hierarchical_accuracy(&[7], &[0], &map),
            Err(Error::Map(_))
        ));
    }

    #[test]
    fn logprob_export_rows() {
        let records = vec![
            rec(vec![0.9, 0.1], 0),              // correct, excluded
            rec(vec![0.7, 0.3], 1),              // misclassified
            rec(vec![0.5, 0.5], 0),              // tie -> argmax 0 -> correct, excluded
        ];
        let rows = misclassified_logprobs(&records);
        assert_eq!(rows.len(), 1);
        assert!((rows[0].0 - 0.7f64.ln()).abs() < 1e-15);
        assert!((rows[0].1 - 0.3f64.ln()).abs() < 1e-15);

        let all_correct = vec![rec(vec![0.9, 0.1], 0)];
        assert!(misclassified_logprobs(&all_correct).is_empty());
    }

    #[test]
    fn csv_shapes() {
        let report = ece(&[rec(vec![0.7, 0.3], 0)], 4).unwrap();
        let text = reliability_csv(&report);
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("bin_lo,bin_hi,count,conf,acc"));

        let m = metrics_csv(&[("top1_error".into(), "test".into(), 0.25)]);
        assert!(m.contains("top1_error,test,0.25"));
    }
}
