//! Evaluation metrics: accuracy, expected calibration error, the area
//! under the risk-coverage curve, and ANLS answer scoring.

use std::fmt;

use serde::{Deserialize, Serialize};

pub type MetricsResult<T> = Result<T, MetricsError>;

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    EmptyInput(&'static str),
    InvalidConfidence { value: f64 },
    InvalidBins { n_bins: usize },
    InvalidThreshold { value: f64 },
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::EmptyInput(what) => write!(f, "empty input: {what}"),
            MetricsError::InvalidConfidence { value } => {
                write!(f, "confidence must lie in (0, 1], got {value}")
            }
            MetricsError::InvalidBins { n_bins } => {
                write!(f, "bin count must be >= 1, got {n_bins}")
            }
            MetricsError::InvalidThreshold { value } => {
                write!(f, "threshold must lie in [0, 1], got {value}")
            }
        }
    }
}

impl std::error::Error for MetricsError {}

/// One scored prediction: top-1 posterior, correctness, and optionally the
/// full probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub confidence: f64,
    pub correct: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<Vec<f64>>,
}

impl PredictionRecord {
    pub fn new(confidence: f64, correct: bool) -> Self {
        PredictionRecord {
            confidence,
            correct,
            probabilities: None,
        }
    }
}

/// One point of the risk-coverage curve: coverage `i/N` and the error rate
/// among the `i` most confident predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskCoveragePoint {
    pub coverage: f64,
    pub selective_risk: f64,
}

/// Fraction of correct predictions.
pub fn accuracy(records: &[PredictionRecord]) -> MetricsResult<f64> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput("records"));
    }
    let hits = records.iter().filter(|r| r.correct).count();
    Ok(hits as f64 / records.len() as f64)
}

fn check_confidences(records: &[PredictionRecord]) -> MetricsResult<()> {
    for r in records {
        if !(r.confidence > 0.0 && r.confidence <= 1.0) {
            return Err(MetricsError::InvalidConfidence {
                value: r.confidence,
            });
        }
    }
    Ok(())
}

fn ece_bin_index(confidence: f64, n_bins: usize) -> usize {
    // Half-open bins (lo, hi] over (0, 1]; confidence 1.0 lands in the
    // last bin. The snap steps pin the convention exactly when a
    // confidence sits on a representable bin edge and `c * n` rounds the
    // wrong way.
    let n = n_bins as f64;
    let mut idx = ((confidence * n).ceil() as usize)
        .saturating_sub(1)
        .min(n_bins - 1);
    while idx > 0 && confidence <= idx as f64 / n {
        idx -= 1;
    }
    while idx + 1 < n_bins && confidence > (idx + 1) as f64 / n {
        idx += 1;
    }
    idx
}

/// Expected calibration error over `n_bins` equal-width confidence bins.
/// Bin `b` contributes `(|B_b|/N) * |acc(B_b) - conf(B_b)|`; empty bins
/// contribute nothing.
pub fn ece(records: &[PredictionRecord], n_bins: usize) -> MetricsResult<f64> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput("records"));
    }
    if n_bins == 0 {
        return Err(MetricsError::InvalidBins { n_bins });
    }
    check_confidences(records)?;

    let mut count = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    let mut hit_sum = vec![0usize; n_bins];
    for r in records {
        let b = ece_bin_index(r.confidence, n_bins);
        count[b] += 1;
        conf_sum[b] += r.confidence;
        hit_sum[b] += r.correct as usize;
    }
    let n = records.len() as f64;
    let mut total = 0.0;
    for b in 0..n_bins {
        if count[b] == 0 {
            continue;
        }
        let acc = hit_sum[b] as f64 / count[b] as f64;
        let conf = conf_sum[b] / count[b] as f64;
        total += (count[b] as f64 / n) * (acc - conf).abs();
    }
    Ok(total)
}

/// Sort order for the risk-coverage curve: confidence descending, ties
/// broken by stable original order.
fn confidence_ranking(records: &[PredictionRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[b]
            .confidence
            .partial_cmp(&records[a].confidence)
            .expect("confidences are finite")
    });
    order
}

/// The discrete risk-coverage curve: for every coverage level `i/N`, the
/// selective risk among the `i` most confident predictions.
pub fn risk_coverage_curve(
    records: &[PredictionRecord],
) -> MetricsResult<Vec<RiskCoveragePoint>> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput("records"));
    }
    check_confidences(records)?;
    let order = confidence_ranking(records);
    let n = records.len();
    let mut errors = 0usize;
    let mut points = Vec::with_capacity(n);
    for (i, &idx) in order.iter().enumerate() {
        if !records[idx].correct {
            errors += 1;
        }
        points.push(RiskCoveragePoint {
            coverage: (i + 1) as f64 / n as f64,
            selective_risk: errors as f64 / (i + 1) as f64,
        });
    }
    Ok(points)
}

/// Area under the risk-coverage curve: the mean selective risk over all
/// `N` coverage levels. Depends on the confidence ranking only.
pub fn aurc(records: &[PredictionRecord]) -> MetricsResult<f64> {
    let curve = risk_coverage_curve(records)?;
    let n = curve.len() as f64;
    Ok(curve.iter().map(|p| p.selective_risk).sum::<f64>() / n)
}

// ---------------------------------------------------------------------------
// ANLS
// ---------------------------------------------------------------------------

/// Lowercase, trim, and collapse internal whitespace runs to single spaces.
pub fn normalize_answer(s: &str) -> String {
    s.to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Levenshtein edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    // Two-row iterative dynamic program.
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + (ca != cb) as usize;
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn normalized_similarity(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    let max_len = p.chars().count().max(g.chars().count());
    1.0 - levenshtein(&p, &g) as f64 / max_len as f64
}

/// Best normalized Levenshtein similarity against any gold answer, cut to
/// zero below `threshold`. The result is therefore never strictly between
/// 0 and the threshold.
pub fn anls_single(prediction: &str, golds: &[String], threshold: f64) -> MetricsResult<f64> {
    if golds.is_empty() {
        return Err(MetricsError::EmptyInput("golds"));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(MetricsError::InvalidThreshold { value: threshold });
    }
    let best = golds
        .iter()
        .map(|g| normalized_similarity(prediction, g))
        .fold(0.0, f64::max);
    Ok(if best >= threshold { best } else { 0.0 })
}

/// Mean [`anls_single`] over a dataset of (prediction, golds) items.
pub fn anls_dataset(items: &[(String, Vec<String>)], threshold: f64) -> MetricsResult<f64> {
    if items.is_empty() {
        return Err(MetricsError::EmptyInput("items"));
    }
    let mut total = 0.0;
    for (pred, golds) in items {
        total += anls_single(pred, golds, threshold)?;
    }
    Ok(total / items.len() as f64)
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EceReport {
    pub n_bins: usize,
    pub value: f64,
}

/// Serializable summary of the evaluation stack over one record set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    pub ece: EceReport,
    pub aurc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anls: Option<f64>,
}

impl MetricsReport {
    pub fn from_records(records: &[PredictionRecord], n_bins: usize) -> MetricsResult<Self> {
        Ok(MetricsReport {
            n: records.len(),
            accuracy: accuracy(records)?,
            ece: EceReport {
                n_bins,
                value: ece(records, n_bins)?,
            },
            aurc: aurc(records)?,
            anls: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(confidence: f64, correct: bool) -> PredictionRecord {
        PredictionRecord::new(confidence, correct)
    }

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn accuracy_basics() {
        assert_eq!(accuracy(&[rec(0.9, true), rec(0.8, true)]).unwrap(), 1.0);
        assert_eq!(accuracy(&[rec(0.9, true), rec(0.8, false)]).unwrap(), 0.5);
        assert!(matches!(
            accuracy(&[]),
            Err(MetricsError::EmptyInput(_))
        ));
    }

    #[test]
    fn ece_perfectly_calibrated_certainty() {
        let records = vec![rec(1.0, true); 5];
        assert_eq!(ece(&records, 10).unwrap(), 0.0);
    }

    #[test]
    fn ece_two_record_worked_example() {
        let records = vec![rec(0.8, true), rec(0.6, false)];
        assert_close(ece(&records, 10).unwrap(), 0.4, 1e-12);
    }

    #[test]
    fn ece_single_bin_collapses_to_gap() {
        let records = vec![
            rec(0.9, true),
            rec(0.7, false),
            rec(0.55, true),
            rec(0.4, false),
        ];
        let expect = (accuracy(&records).unwrap()
            - records.iter().map(|r| r.confidence).sum::<f64>() / 4.0)
            .abs();
        assert_close(ece(&records, 1).unwrap(), expect, 1e-12);
    }

    #[test]
    fn ece_boundary_convention() {
        // 0.1 belongs to the first bin (0, 0.1], 1.0 to the last.
        assert_eq!(ece_bin_index(0.1, 10), 0);
        assert_eq!(ece_bin_index(0.1000001, 10), 1);
        assert_eq!(ece_bin_index(1.0, 10), 9);
        assert_eq!(ece_bin_index(0.05, 10), 0);
    }

    #[test]
    fn ece_rejects_bad_inputs() {
        assert!(matches!(ece(&[], 10), Err(MetricsError::EmptyInput(_))));
        assert!(matches!(
            ece(&[rec(0.5, true)], 0),
            Err(MetricsError::InvalidBins { .. })
        ));
        assert!(matches!(
            ece(&[rec(0.0, true)], 10),
            Err(MetricsError::InvalidConfidence { .. })
        ));
        assert!(matches!(
            ece(&[rec(1.5, true)], 10),
            Err(MetricsError::InvalidConfidence { .. })
        ));
    }

    #[test]
    fn aurc_all_correct_is_zero() {
        let records = vec![rec(0.9, true), rec(0.5, true), rec(0.2, true)];
        assert_eq!(aurc(&records).unwrap(), 0.0);
    }

    #[test]
    fn aurc_two_record_enumeration() {
        let records = vec![rec(0.9, true), rec(0.4, false)];
        assert_close(aurc(&records).unwrap(), 0.25, 1e-12);
        let flipped = vec![rec(0.9, false), rec(0.4, true)];
        assert_close(aurc(&flipped).unwrap(), 0.75, 1e-12);
    }

    #[test]
    fn aurc_ties_broken_by_original_order() {
        let a = vec![rec(0.5, true), rec(0.5, false)];
        let b = vec![rec(0.5, false), rec(0.5, true)];
        assert_close(aurc(&a).unwrap(), 0.25, 1e-12);
        assert_close(aurc(&b).unwrap(), 0.75, 1e-12);
    }

    #[test]
    fn risk_coverage_points_sorted_by_coverage() {
        let records = vec![rec(0.9, true), rec(0.7, false), rec(0.3, true)];
        let curve = risk_coverage_curve(&records).unwrap();
        assert_eq!(curve.len(), 3);
        for (i, p) in curve.iter().enumerate() {
            assert_close(p.coverage, (i + 1) as f64 / 3.0, 1e-12);
            assert!(p.selective_risk >= 0.0 && p.selective_risk <= 1.0);
        }
    }

    #[test]
    fn anls_worked_examples() {
        assert_eq!(
            anls_single("Table 3", &["table 3".to_string()], 0.5).unwrap(),
            1.0
        );
        assert_close(
            anls_single("tabel", &["table".to_string()], 0.5).unwrap(),
            0.6,
            1e-12,
        );
        assert_eq!(anls_single("x", &["table".to_string()], 0.5).unwrap(), 0.0);
    }

    #[test]
    fn anls_both_empty_scores_one() {
        assert_eq!(anls_single("", &["  ".to_string()], 0.5).unwrap(), 1.0);
    }

    #[test]
    fn anls_takes_best_gold() {
        let golds = vec!["wrong".to_string(), "answer".to_string()];
        assert_eq!(anls_single("Answer", &golds, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn anls_rejects_bad_inputs() {
        assert!(matches!(
            anls_single("x", &[], 0.5),
            Err(MetricsError::EmptyInput(_))
        ));
        assert!(matches!(
            anls_single("x", &["y".to_string()], 1.5),
            Err(MetricsError::InvalidThreshold { .. })
        ));
    }

    #[test]
    fn anls_dataset_means_items() {
        let items = vec![
            ("table 3".to_string(), vec!["Table 3".to_string()]),
            ("zzz".to_string(), vec!["table".to_string()]),
        ];
        assert_close(anls_dataset(&items, 0.5).unwrap(), 0.5, 1e-12);
        let single = vec![items[0].clone()];
        assert_eq!(
            anls_dataset(&single, 0.5).unwrap(),
            anls_single("table 3", &single[0].1, 0.5).unwrap()
        );
    }

    #[test]
    fn levenshtein_basics() {
        assert_eq!(levenshtein("", ""), 0);
        assert_eq!(levenshtein("abc", ""), 3);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("tabel", "table"), 2);
    }

    #[test]
    fn normalization_collapses_whitespace() {
        assert_eq!(normalize_answer("  Table\t 3 \n"), "table 3");
        assert_eq!(normalize_answer(""), "");
    }

    #[test]
    fn report_serializes_expected_keys() {
        let records = vec![rec(0.9, true), rec(0.6, false)];
        let report = MetricsReport::from_records(&records, 10).unwrap();
        let json = serde_json::to_value(&report).unwrap();
        assert!(json.get("n").is_some());
        assert!(json.get("accuracy").is_some());
        assert!(json["ece"].get("n_bins").is_some());
        assert!(json["ece"].get("value").is_some());
        assert!(json.get("aurc").is_some());
        assert!(json.get("anls").is_none());
    }
}
