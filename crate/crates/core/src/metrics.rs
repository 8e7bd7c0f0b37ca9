//! Confusion counts and the five change-detection scores.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::segmentation::Mask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

/// Tally `pred` against `gt`, skipping pixels set in `ignore`.
pub fn confusion(pred: &Mask, gt: &Mask, ignore: Option<&Mask>) -> Result<ConfusionCounts> {
    let dims = |m: &Mask| (m.width(), m.height());
    if dims(pred) != dims(gt) || ignore.is_some_and(|i| dims(i) != dims(gt)) {
        return Err(Error::dim(format!(
            "confusion: prediction {:?}, ground truth {:?}, ignore {:?}",
            dims(pred),
            dims(gt),
            ignore.map(dims)
        )));
    }
    let mut c = ConfusionCounts::default();
    for (i, (&p, &g)) in pred.bits().iter().zip(gt.bits()).enumerate() {
        if ignore.is_some_and(|m| m.bits()[i]) {
            continue;
        }
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub accuracy: f32,
    pub f_measure: f32,
    pub precision: f32,
    pub recall: f32,
    pub specificity: f32,
    pub counts: ConfusionCounts,
}

/// Accuracy, precision, recall, specificity and F-measure.
///
/// Precision and recall are 1 when `tp = fp = fn = 0` and 0 when only their
/// numerator vanishes. Specificity is 1 when there are no negatives at all.
pub fn compute_metrics(c: ConfusionCounts) -> Result<MetricReport> {
    let total = c.total();
    if total == 0 {
        return Err(Error::contract("compute_metrics: all confusion counts are zero"));
    }
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let vacuous = c.tp + c.fp + c.fn_ == 0;
    let ratio = |num: f64, den: f64| {
        if den > 0.0 {
            num / den
        } else if vacuous {
            1.0
        } else {
            0.0
        }
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let specificity = if tn + fp > 0.0 { tn / (tn + fp) } else { 1.0 };
    Ok(MetricReport {
        accuracy: ((tp + tn) / total as f64) as f32,
        f_measure: f as f32,
        precision: precision as f32,
        recall: recall as f32,
        specificity: specificity as f32,
        counts: c,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    /// Unweighted mean of each metric over frames, with summed counts.
    pub mean: MetricReport,
    /// Metrics recomputed from the summed counts.
    pub pooled: MetricReport,
}

pub fn aggregate(reports: &[MetricReport]) -> Result<Aggregate> {
    if reports.is_empty() {
        return Err(Error::contract("aggregate: no reports"));
    }
    let n = reports.len() as f64;
    let mean_of = |f: fn(&MetricReport) -> f32| (reports.iter().map(|r| f(r) as f64).sum::<f64>() / n) as f32;
    let counts = reports.iter().fold(ConfusionCounts::default(), |acc, r| acc + r.counts);
    Ok(Aggregate {
        mean: MetricReport {
            accuracy: mean_of(|r| r.accuracy),
            f_measure: mean_of(|r| r.f_measure),
            precision: mean_of(|r| r.precision),
            recall: mean_of(|r| r.recall),
            specificity: mean_of(|r| r.specificity),
            counts,
        },
        pooled: compute_metrics(counts)?,
    })
}

pub const CSV_HEADER: &str = "sequence,frame,tp,fp,fn,tn,accuracy,precision,recall,specificity,f_measure";

/// One evaluated frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRow {
    pub sequence: String,
    pub frame: String,
    pub report: MetricReport,
}

fn push_row(out: &mut String, sequence: &str, frame: &str, r: &MetricReport) {
    let c = r.counts;
    let _ = writeln!(
        out,
        "{sequence},{frame},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
        c.tp, c.fp, c.fn_, c.tn, r.accuracy, r.precision, r.recall, r.specificity, r.f_measure
    );
}

/// Per-frame rows followed by `mean` and `pooled` aggregate rows for every
/// sequence, in first-appearance order.
pub fn report_csv(rows: &[FrameRow]) -> Result<String> {
    let mut out = format!("{CSV_HEADER}\n");
    let mut sequences: Vec<&str> = Vec::new();
    for row in rows {
        if !sequences.contains(&row.sequence.as_str()) {
            sequences.push(&row.sequence);
        }
        push_row(&mut out, &row.sequence, &row.frame, &row.report);
    }
    for seq in sequences {
        let reports: Vec<MetricReport> = rows.iter().filter(|r| r.sequence == seq).map(|r| r.report).collect();
        let agg = aggregate(&reports)?;
        push_row(&mut out, seq, "mean", &agg.mean);
        push_row(&mut out, seq, "pooled", &agg.pooled);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    #[test]
    fn hand_evaluated_example() {
        let r = compute_metrics(counts(8, 2, 2, 88)).unwrap();
        assert!((r.precision - 0.8).abs() < 1e-6);
        assert!((r.recall - 0.8).abs() < 1e-6);
        assert!((r.f_measure - 0.8).abs() < 1e-6);
        assert!((r.accuracy - 0.96).abs() < 1e-6);
        assert!((r.specificity - 88.0 / 90.0).abs() < 1e-6);
    }

    #[test]
    fn zero_denominator_conventions() {
        let r = compute_metrics(counts(0, 0, 0, 100)).unwrap();
        assert_eq!(
            (r.precision, r.recall, r.f_measure, r.accuracy, r.specificity),
            (1.0, 1.0, 1.0, 1.0, 1.0)
        );
        let r = compute_metrics(counts(0, 0, 5, 95)).unwrap();
        assert_eq!((r.precision, r.recall, r.f_measure), (0.0, 0.0, 0.0));
        let r = compute_metrics(counts(0, 5, 0, 95)).unwrap();
        assert_eq!((r.precision, r.recall, r.f_measure), (0.0, 0.0, 0.0));
        let r = compute_metrics(counts(4, 0, 0, 0)).unwrap();
        assert_eq!(r.specificity, 1.0);
        assert!(compute_metrics(counts(0, 0, 0, 0)).is_err());
    }

    #[test]
    fn csv_has_aggregate_rows() {
        let report = compute_metrics(counts(1, 0, 0, 3)).unwrap();
        let rows = vec![FrameRow {
            sequence: "s".into(),
            frame: "f0".into(),
            report,
        }];
        let csv = report_csv(&rows).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[2].starts_with("s,mean,1,0,0,3,"));
        assert!(lines[3].starts_with("s,pooled,1,0,0,3,"));
    }
}
