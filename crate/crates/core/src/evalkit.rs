//! Threshold metrics, rank-based areas and percentile threshold sweeps.
//!
//! Conventions pinned here so sweeps are reproducible bit for bit:
//!
//! - A sample is predicted anomalous iff `score >= threshold`.
//! - `precision = 0` when nothing is predicted positive; `f1 = 0` when
//!   `precision + recall = 0`.
//! - ROC AUC is the Mann-Whitney statistic with half credit for ties.
//! - AUPRC is average precision, with tied scores grouped into one step.
//! - Percentiles interpolate linearly between the closest order statistics
//!   (inclusive definition), so the 100th percentile is the maximum.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ROC_AUC_FORMULA: &str = "mann-whitney-u/v1: (#{pos>neg} + 0.5*#{pos=neg}) / (n_pos*n_neg)";
pub const AUPRC_FORMULA: &str = "average-precision/v1: sum over distinct thresholds (desc) of dRecall*Precision";
pub const PERCENTILE_FORMULA: &str = "linear-inclusive/v1: v[floor(h)] + (h-floor(h))*(v[floor(h)+1]-v[floor(h)]), h=p/100*(n-1)";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Counts {
    /// Precision, recall and F1 with the zero-denominator conventions.
    pub fn rates(&self) -> (f64, f64, f64) {
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        (precision, recall, f1)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::arg("metrics need at least one sample"));
    }
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::data("scores contain NaN"));
    }
    Ok(())
}

pub fn confusion(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Counts> {
    check_inputs(scores, labels)?;
    let mut c = Counts::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Precision, recall and F1 at a fixed threshold (`label == true` is abnormal).
pub fn prf1(scores: &[f64], labels: &[bool], threshold: f64) -> Result<Prf1> {
    let counts = confusion(scores, labels, threshold)?;
    let (precision, recall, f1) = counts.rates();
    Ok(Prf1 {
        precision,
        recall,
        f1,
        counts,
    })
}

/// Indices sorted by descending score.
fn order_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::arg("ROC AUC needs both classes present"));
    }
    // Mann-Whitney via mid-ranks: U = R_pos - n_pos(n_pos+1)/2.
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid_rank = (i + j + 2) as f64 / 2.0;
        let pos_in_group = idx[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum_pos += mid_rank * pos_in_group as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let n_pos = labels.iter().filter(|&&y| y).count();
    if n_pos == 0 {
        return Err(Error::arg("AUPRC needs at least one positive"));
    }
    let idx = order_desc(scores);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(area)
}

/// Linear-interpolation percentile, `p` in `[0, 100]`.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    percentile_sorted(&sorted, p)
}

pub fn percentile_sorted(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::arg("percentile of an empty sample"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::arg(format!("percentile {p} outside [0, 100]")));
    }
    let h = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if frac == 0.0 || lo + 1 >= sorted.len() {
        return Ok(sorted[lo]);
    }
    Ok(sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            lo: 90.0,
            hi: 100.0,
            step: 0.5,
        }
    }
}

impl SweepSpec {
    pub fn percentiles(&self) -> Result<Vec<f64>> {
        if !(self.lo < self.hi) {
            return Err(Error::arg(format!("sweep needs lo < hi, got {} >= {}", self.lo, self.hi)));
        }
        if !(self.step > 0.0) || self.lo < 0.0 || self.hi > 100.0 {
            return Err(Error::arg("sweep percentiles must lie in [0, 100] with a positive step"));
        }
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize;
        Ok((0..=n).map(|i| (self.lo + i as f64 * self.step).min(self.hi)).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub percentile: f64,
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Thresholds at training-score percentiles, evaluated on the test set.
pub fn threshold_sweep(
    train_scores: &[f64],
    test_scores: &[f64],
    test_labels: &[bool],
    spec: SweepSpec,
) -> Result<Vec<SweepRow>> {
    if train_scores.is_empty() {
        return Err(Error::arg("threshold sweep needs training scores"));
    }
    let mut sorted = train_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    spec.percentiles()?
        .into_iter()
        .map(|p| {
            let threshold = percentile_sorted(&sorted, p)?;
            let m = prf1(test_scores, test_labels, threshold)?;
            Ok(SweepRow {
                percentile: p,
                threshold,
                tp: m.counts.tp,
                fp: m.counts.fp,
                fn_: m.counts.fn_,
                tn: m.counts.tn,
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc_roc: f64,
    pub auprc: f64,
    pub sweep: Vec<SweepRow>,
    /// Expected anomaly gap of the training scores, when computed.
    #[serde(default)]
    pub eag: Option<f64>,
    /// Config and seed provenance supplied by the caller.
    pub provenance: BTreeMap<String, serde_json::Value>,
    /// Formula version tags for every metric in the report.
    pub formulas: BTreeMap<String, String>,
}

pub fn formula_tags() -> BTreeMap<String, String> {
    [
        ("roc_auc", ROC_AUC_FORMULA),
        ("auprc", AUPRC_FORMULA),
        ("percentile", PERCENTILE_FORMULA),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

/// Full evaluation of one detector run on a labeled test set.
pub fn evaluate(
    train_scores: &[f64],
    test_scores: &[f64],
    test_labels: &[bool],
    spec: SweepSpec,
    provenance: BTreeMap<String, serde_json::Value>,
) -> Result<MetricsReport> {
    Ok(MetricsReport {
        auc_roc: roc_auc(test_scores, test_labels)?,
        auprc: auprc(test_scores, test_labels)?,
        sweep: threshold_sweep(train_scores, test_scores, test_labels, spec)?,
        eag: None,
        provenance,
        formulas: formula_tags(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

pub const SWEEP_CSV_HEADER: &str = "percentile,threshold,tp,fp,fn,tn,precision,recall,f1";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.percentile, r.threshold, r.tp, r.fp, r.fn_, r.tn, r.precision, r.recall, r.f1
        );
    }
    out
}

pub fn report_json(report: &MetricsReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

pub fn emit_report(report: &MetricsReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    let body = match format {
        ReportFormat::Json => report_json(report)?,
        ReportFormat::Csv => sweep_csv(&report.sweep),
    };
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn load_report(path: impl AsRef<Path>) -> Result<MetricsReport> {
    let path = path.as_ref();
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> MeanStd {
        if values.is_empty() {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateSweepRow {
    pub percentile: f64,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f1: MeanStd,
}

/// Mean and standard deviation across repeated seeded runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub auc_roc: MeanStd,
    pub auprc: MeanStd,
    pub sweep: Vec<AggregateSweepRow>,
}

pub fn aggregate(reports: &[MetricsReport]) -> Result<AggregateReport> {
    let first = reports.first().ok_or_else(|| Error::arg("nothing to aggregate"))?;
    let rows = first.sweep.len();
    if reports.iter().any(|r| r.sweep.len() != rows) {
        return Err(Error::arg("reports have different sweep lengths"));
    }
    let col = |f: &dyn Fn(&MetricsReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    let sweep = (0..rows)
        .map(|i| AggregateSweepRow {
            percentile: first.sweep[i].percentile,
            precision: col(&|r| r.sweep[i].precision),
            recall: col(&|r| r.sweep[i].recall),
            f1: col(&|r| r.sweep[i].f1),
        })
        .collect();
    Ok(AggregateReport {
        runs: reports.len(),
        auc_roc: col(&|r| r.auc_roc),
        auprc: col(&|r| r.auprc),
        sweep,
    })
}

pub fn aggregate_csv(agg: &AggregateReport) -> String {
    let mut out = String::from("percentile,precision_mean,precision_std,recall_mean,recall_std,f1_mean,f1_std\n");
    for r in &agg.sweep {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.percentile, r.precision.mean, r.precision.std, r.recall.mean, r.recall.std, r.f1.mean, r.f1.std
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&x| x == 1).collect()
    }

    #[test]
    fn all_positive_predictions_on_900_100() {
        let scores = vec![1.0; 1000];
        let y: Vec<bool> = (0..1000).map(|i| i < 100).collect();
        let m = prf1(&scores, &y, 0.5).unwrap();
        assert_eq!(m.precision, 0.1);
        assert_eq!(m.recall, 1.0);
        assert!((m.f1 - 2.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_hand_counts() {
        let m = prf1(&[0.9, 0.8, 0.1], &labels(&[1, 1, 0]), 0.5).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));

        let c = Counts { tp: 3, fp: 1, fn_: 1, tn: 0 };
        let (p, r, f) = c.rates();
        assert_eq!((p, r), (0.75, 0.75));
        assert!((f - 0.75).abs() < 1e-15);
    }

    #[test]
    fn zero_denominator_conventions() {
        let m = prf1(&[0.1, 0.2], &labels(&[1, 0]), 0.9).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert!(prf1(&[], &[], 0.0).is_err());
    }

    #[test]
    fn roc_auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &labels(&[1, 1, 0, 0])).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.4, 0.3, 0.2, 0.1], &labels(&[0, 1, 0, 1])).unwrap(), 0.25);
        assert_eq!(roc_auc(&[0.5; 6], &labels(&[0, 1, 0, 1, 1, 0])).unwrap(), 0.5);
        assert!(roc_auc(&[0.1, 0.2], &labels(&[1, 1])).is_err());
    }

    #[test]
    fn auprc_examples() {
        let ap = auprc(&[0.9, 0.8, 0.7], &labels(&[1, 0, 1])).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(auprc(&[0.9, 0.8, 0.2], &labels(&[1, 1, 0])).unwrap(), 1.0);
        assert!(auprc(&[0.9], &labels(&[0])).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(percentile(&v, 100.0).unwrap(), 5.0);
        assert_eq!(percentile(&v, 50.0).unwrap(), 3.0);
        assert!((percentile(&v, 90.0).unwrap() - 4.6).abs() < 1e-12);
        assert!(percentile(&[], 50.0).is_err());
    }

    #[test]
    fn default_sweep_has_21_rows() {
        let train: Vec<f64> = (0..200).map(f64::from).collect();
        let test = [10.0, 195.0, 199.0, 50.0];
        let rows = threshold_sweep(&train, &test, &labels(&[0, 1, 1, 0]), SweepSpec::default()).unwrap();
        assert_eq!(rows.len(), 21);
        assert_eq!(rows[0].percentile, 90.0);
        assert_eq!(rows[20].percentile, 100.0);
        assert_eq!(rows[20].threshold, 199.0);
        assert!(rows.windows(2).all(|w| w[0].percentile < w[1].percentile));
        assert!(rows[20].recall <= rows[0].recall);
    }

    #[test]
    fn constant_train_scores_give_identical_rows() {
        let rows = threshold_sweep(&[2.0; 30], &[1.0, 3.0], &labels(&[0, 1]), SweepSpec::default()).unwrap();
        assert!(rows.iter().all(|r| r.threshold == 2.0 && r.f1 == rows[0].f1));
    }

    #[test]
    fn sweep_rejects_inverted_range() {
        let spec = SweepSpec { lo: 95.0, hi: 90.0, step: 0.5 };
        assert!(threshold_sweep(&[1.0], &[1.0], &[true], spec).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let train: Vec<f64> = (0..50).map(f64::from).collect();
        let report = evaluate(&train, &[1.0, 49.0], &labels(&[0, 1]), SweepSpec::default(), BTreeMap::new()).unwrap();
        let csv = sweep_csv(&report.sweep);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 22);
        assert_eq!(lines[0], SWEEP_CSV_HEADER);
    }

    #[test]
    fn json_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let train: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut prov = BTreeMap::new();
        prov.insert("seed".to_string(), serde_json::json!(7));
        let report = evaluate(&train, &[0.1, 0.95, -0.3], &labels(&[0, 1, 0]), SweepSpec::default(), prov).unwrap();
        let p1 = dir.path().join("a.json");
        emit_report(&report, &p1, ReportFormat::Json).unwrap();
        let loaded = load_report(&p1).unwrap();
        let p2 = dir.path().join("b.json");
        emit_report(&loaded, &p2, ReportFormat::Json).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn aggregation_reports_mean_and_std() {
        let train: Vec<f64> = (0..40).map(f64::from).collect();
        let mk = |s: f64| evaluate(&train, &[s, 39.0], &labels(&[0, 1]), SweepSpec::default(), BTreeMap::new()).unwrap();
        let agg = aggregate(&[mk(1.0), mk(39.5)]).unwrap();
        assert_eq!(agg.runs, 2);
        assert_eq!(agg.auc_roc.mean, 0.5);
        assert_eq!(agg.auc_roc.std, 0.5);
        assert_eq!(agg.sweep.len(), 21);
    }
}
