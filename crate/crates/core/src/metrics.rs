//! Confusion matrices, one-vs-rest classification metrics, and k-fold tables.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `counts[p][t]`: samples predicted as class `p` whose true class is `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if counts.iter().any(|row| row.len() != k) {
            return Err(Error::shape("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, predicted: usize, truth: usize) -> u64 {
        self.counts[predicted][truth]
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    /// Element-wise sum, e.g. to pool k-fold results.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::shape("cannot merge confusion matrices of different size"));
        }
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
        Ok(())
    }

    /// `(tp, fp, fn, tn)` for class `c` against the rest.
    pub fn one_vs_rest(&self, c: usize) -> (u64, u64, u64, u64) {
        let tp = self.counts[c][c];
        let fp = self.counts[c].iter().sum::<u64>() - tp;
        let fn_ = self.counts.iter().map(|row| row[c]).sum::<u64>() - tp;
        let tn = self.total() - tp - fp - fn_;
        (tp, fp, fn_, tn)
    }

    /// K×K grid with class-name headers; rows are predictions, columns truths.
    pub fn to_csv(&self, class_names: &[String]) -> Result<String> {
        check_names(class_names, self.num_classes())?;
        let mut s = String::from("predicted\\true");
        for n in class_names {
            let _ = write!(s, ",{n}");
        }
        s.push('\n');
        for (name, row) in class_names.iter().zip(&self.counts) {
            s.push_str(name);
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        Ok(s)
    }
}

/// Tallies predictions against labels.
pub fn confusion(preds: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::arg(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut cm = ConfusionMatrix::zeros(k);
    for (&p, &t) in preds.iter().zip(labels) {
        if p >= k || t >= k {
            return Err(Error::arg(format!("class index ({p}, {t}) outside [0, {k})")));
        }
        cm.counts[p][t] += 1;
    }
    Ok(cm)
}

/// A metric value with a flag for the zero-denominator case (value then 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metric {
    pub value: f64,
    pub undefined: bool,
}

impl Metric {
    fn ratio(num: f64, den: f64) -> Self {
        if den == 0.0 {
            Metric {
                value: 0.0,
                undefined: true,
            }
        } else {
            Metric {
                value: num / den,
                undefined: false,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: Metric,
    pub recall: Metric,
    pub specificity: Metric,
    pub f1: Metric,
}

impl ClassMetrics {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        let (tp, fp, fn_, tn) = (tp as f64, fp as f64, fn_ as f64, tn as f64);
        let precision = Metric::ratio(tp, tp + fp);
        let recall = Metric::ratio(tp, tp + fn_);
        let specificity = Metric::ratio(tn, fp + tn);
        let f1 = Metric::ratio(2.0 * precision.value * recall.value, precision.value + recall.value);
        ClassMetrics {
            precision,
            recall,
            specificity,
            f1,
        }
    }

    pub fn values(&self) -> [f64; 4] {
        [self.precision.value, self.recall.value, self.specificity.value, self.f1.value]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    /// trace / total (zero with `accuracy_undefined` for an empty matrix).
    pub accuracy: f64,
    pub accuracy_undefined: bool,
    /// Unweighted mean over classes of each per-class metric.
    pub macro_avg: [f64; 4],
    pub confusion: ConfusionMatrix,
}

pub const METRIC_NAMES: [&str; 4] = ["Precision", "Recall", "Specificity", "F1"];

/// Per-class one-vs-rest precision, recall, specificity, and F1, plus
/// accuracy and macro averages.
pub fn per_class_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let k = cm.num_classes();
    if k < 2 {
        return Err(Error::arg(format!("metrics need at least 2 classes, got {k}")));
    }
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let (tp, fp, fn_, tn) = cm.one_vs_rest(c);
            ClassMetrics::from_counts(tp, fp, fn_, tn)
        })
        .collect();
    let mut macro_avg = [0.0; 4];
    for m in &per_class {
        for (acc, v) in macro_avg.iter_mut().zip(m.values()) {
            *acc += v;
        }
    }
    for v in &mut macro_avg {
        *v /= k as f64;
    }
    let acc = Metric::ratio(cm.trace() as f64, cm.total() as f64);
    Ok(MetricsReport {
        per_class,
        accuracy: acc.value,
        accuracy_undefined: acc.undefined,
        macro_avg,
        confusion: cm.clone(),
    })
}

/// Accuracy followed by the four macro metrics, as reported per fold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoldRow {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub f1: f64,
}

impl FoldRow {
    pub fn from_report(r: &MetricsReport) -> Self {
        FoldRow {
            accuracy: r.accuracy,
            precision: r.macro_avg[0],
            recall: r.macro_avg[1],
            specificity: r.macro_avg[2],
            f1: r.macro_avg[3],
        }
    }

    pub fn values(&self) -> [f64; 5] {
        [self.accuracy, self.precision, self.recall, self.specificity, self.f1]
    }

    fn from_values(v: [f64; 5]) -> Self {
        FoldRow {
            accuracy: v[0],
            precision: v[1],
            recall: v[2],
            specificity: v[3],
            f1: v[4],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KFoldTable {
    pub folds: Vec<FoldRow>,
    pub average: FoldRow,
}

/// Arithmetic mean of every metric across folds.
pub fn kfold_aggregate(folds: &[FoldRow]) -> Result<KFoldTable> {
    if folds.is_empty() {
        return Err(Error::arg("k-fold aggregation needs at least one fold"));
    }
    let mut sum = [0.0; 5];
    for f in folds {
        for (s, v) in sum.iter_mut().zip(f.values()) {
            *s += v;
        }
    }
    let n = folds.len() as f64;
    Ok(KFoldTable {
        folds: folds.to_vec(),
        average: FoldRow::from_values(sum.map(|s| s / n)),
    })
}

pub fn kfold_aggregate_reports(reports: &[MetricsReport]) -> Result<KFoldTable> {
    kfold_aggregate(&reports.iter().map(FoldRow::from_report).collect::<Vec<_>>())
}

/// Fraction rendered as a percentage with two decimals (`0.98333` → `98.33`).
pub fn percent(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

fn check_names(names: &[String], k: usize) -> Result<()> {
    if names.len() != k {
        return Err(Error::arg(format!("{} class names for {k} classes", names.len())));
    }
    if let Some(i) = names.iter().position(|n| n.trim().is_empty()) {
        return Err(Error::arg(format!("class name {i} is empty")));
    }
    if names.iter().any(|n| n.contains(',') || n.contains('\n')) {
        return Err(Error::arg("class names may not contain commas or newlines"));
    }
    Ok(())
}

/// Per-class table: `Type,Precision,Recall,Specificity,F1`, one row per
/// class and a final `Average` row.
pub fn render_report(report: &MetricsReport, class_names: &[String]) -> Result<String> {
    check_names(class_names, report.per_class.len())?;
    let mut s = String::from("Type");
    for n in METRIC_NAMES {
        let _ = write!(s, ",{n}");
    }
    s.push('\n');
    for (name, m) in class_names.iter().zip(&report.per_class) {
        s.push_str(name);
        for v in m.values() {
            let _ = write!(s, ",{}", percent(v));
        }
        s.push('\n');
    }
    s.push_str("Average");
    for v in report.macro_avg {
        let _ = write!(s, ",{}", percent(v));
    }
    s.push('\n');
    Ok(s)
}

/// `K-Fold,Accuracy,Precision,Recall,Specificity,F1` with fold rows then `Average`.
pub fn render_kfold(table: &KFoldTable) -> String {
    let mut s = String::from("K-Fold,Accuracy,Precision,Recall,Specificity,F1\n");
    let mut row = |label: &str, r: &FoldRow| {
        s.push_str(label);
        for v in r.values() {
            let _ = write!(s, ",{}", percent(v));
        }
        s.push('\n');
    };
    for (i, f) in table.folds.iter().enumerate() {
        row(&(i + 1).to_string(), f);
    }
    row("Average", &table.average);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_orientation() {
        let cm = confusion(&[0, 1], &[1, 1], 2).unwrap();
        assert_eq!(cm.get(0, 1), 1);
        assert_eq!(cm.get(1, 1), 1);
        assert_eq!(cm.get(0, 0) + cm.get(1, 0), 0);
        assert_eq!(confusion(&[], &[], 3).unwrap(), ConfusionMatrix::zeros(3));
        assert!(confusion(&[3], &[0], 3).is_err());
        assert!(confusion(&[0, 1], &[0], 3).is_err());
    }

    #[test]
    fn diagonal_is_perfect() {
        let cm = confusion(&[0, 1, 2, 2, 1], &[0, 1, 2, 2, 1], 3).unwrap();
        let r = per_class_metrics(&cm).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.per_class.iter().all(|m| m.values() == [1.0; 4]));
    }

    #[test]
    fn worked_binary_example() {
        // class 0 positive: TP=50, FP=10, FN=10, TN=30
        let cm = ConfusionMatrix::from_counts(vec![vec![50, 10], vec![10, 30]]).unwrap();
        assert_eq!(cm.one_vs_rest(0), (50, 10, 10, 30));
        let r = per_class_metrics(&cm).unwrap();
        let m = r.per_class[0];
        assert!((r.accuracy - 0.8).abs() < 1e-15);
        assert!((m.precision.value - 50.0 / 60.0).abs() < 1e-15);
        assert!((m.recall.value - 50.0 / 60.0).abs() < 1e-15);
        assert!((m.specificity.value - 0.75).abs() < 1e-15);
        assert!((m.f1.value - 50.0 / 60.0).abs() < 1e-15);
    }

    #[test]
    fn zero_denominators_are_flagged() {
        // class 2 never predicted and never present
        let cm = confusion(&[0, 1], &[0, 1], 3).unwrap();
        let r = per_class_metrics(&cm).unwrap();
        assert!(r.per_class[2].precision.undefined);
        assert_eq!(r.per_class[2].precision.value, 0.0);
        assert!(!r.per_class[2].specificity.undefined);
        let empty = per_class_metrics(&ConfusionMatrix::zeros(2)).unwrap();
        assert!(empty.accuracy_undefined);
    }

    #[test]
    fn rendering() {
        assert_eq!(percent(0.98333), "98.33");
        assert_eq!(percent(1.0), "100.00");
        let cm = confusion(&[0, 1, 1], &[0, 1, 0], 2).unwrap();
        let r = per_class_metrics(&cm).unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        let csv = render_report(&r, &names).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "Type,Precision,Recall,Specificity,F1");
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().starts_with("Average,"));
        assert!(render_report(&r, &["a".into(), "".into()]).is_err());
        assert_eq!(cm.to_csv(&names).unwrap(), "predicted\\true,a,b\na,1,0\nb,1,1\n");
    }

    #[test]
    fn aggregate_single_and_identical() {
        let f = FoldRow {
            accuracy: 0.9,
            precision: 0.8,
            recall: 0.7,
            specificity: 0.95,
            f1: 0.75,
        };
        assert_eq!(kfold_aggregate(&[f]).unwrap().average, f);
        let t = kfold_aggregate(&[f, f, f]).unwrap();
        for (a, b) in t.average.values().iter().zip(f.values()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(kfold_aggregate(&[]).is_err());
        let csv = render_kfold(&t);
        assert_eq!(csv.lines().count(), 5);
    }
}
