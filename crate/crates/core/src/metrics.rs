//! Classification metrics for the binary and three-class tasks.
//!
//! Counts live in a [`ConfusionMatrix`] indexed `[true][predicted]`.
//! [`metrics`] derives per-class precision, recall and F1, their macro
//! averages, accuracy, and (for binary tasks) the metrics of the positive
//! class. Zero denominators yield 0 and are listed in
//! [`MetricsReport::degenerate`] rather than raised.

use std::fmt::Write as _;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::labels::Task;
use crate::Real;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("y_true has {truth} labels but y_pred has {pred}")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("label {label} at position {index} is out of range for {num_classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("expected {expected} class names, got {got}")]
    ClassNames { expected: usize, got: usize },
    #[error("prediction file: {0}")]
    Csv(#[from] csv::Error),
    #[error("prediction file, row {row}: unknown {column} `{value}` for the {task} task")]
    UnknownLabel {
        row: usize,
        column: &'static str,
        value: String,
        task: Task,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    class_names: Vec<String>,
    /// Row-major `[true][predicted]`.
    counts: Vec<u64>,
}

/// Tally predictions against ground truth.
pub fn confusion(y_true: &[usize], y_pred: &[usize], num_classes: usize) -> Result<ConfusionMatrix, MetricsError> {
    if y_true.len() != y_pred.len() {
        return Err(MetricsError::LengthMismatch {
            truth: y_true.len(),
            pred: y_pred.len(),
        });
    }
    let mut counts = vec![0u64; num_classes * num_classes];
    for (index, (&t, &p)) in y_true.iter().zip(y_pred).enumerate() {
        for label in [t, p] {
            if label >= num_classes {
                return Err(MetricsError::LabelOutOfRange {
                    index,
                    label,
                    num_classes,
                });
            }
        }
        counts[t * num_classes + p] += 1;
    }
    Ok(ConfusionMatrix {
        class_names: (0..num_classes).map(|c| format!("class {c}")).collect(),
        counts,
    })
}

impl ConfusionMatrix {
    pub fn with_class_names<S: Into<String>>(
        mut self,
        names: impl IntoIterator<Item = S>,
    ) -> Result<Self, MetricsError> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() != self.num_classes() {
            return Err(MetricsError::ClassNames {
                expected: self.num_classes(),
                got: names.len(),
            });
        }
        self.class_names = names;
        Ok(self)
    }

    pub fn for_task(y_true: &[usize], y_pred: &[usize], task: Task) -> Result<Self, MetricsError> {
        confusion(y_true, y_pred, task.num_classes())?.with_class_names(task.class_names().iter().copied())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes() + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|c| self.get(c, c)).sum()
    }

    /// Number of samples whose true class is each class.
    pub fn row_sums(&self) -> Vec<u64> {
        let n = self.num_classes();
        (0..n).map(|t| (0..n).map(|p| self.get(t, p)).sum()).collect()
    }

    /// Number of samples predicted as each class.
    pub fn col_sums(&self) -> Vec<u64> {
        let n = self.num_classes();
        (0..n).map(|p| (0..n).map(|t| self.get(t, p)).sum()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics<T> {
    pub class: String,
    pub precision: T,
    pub recall: T,
    pub f1: T,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositiveClassMetrics<T> {
    pub class_index: usize,
    pub class: String,
    pub precision: T,
    pub recall: T,
    pub f1: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport<T> {
    pub total: u64,
    pub accuracy: T,
    pub per_class: Vec<ClassMetrics<T>>,
    pub macro_precision: T,
    pub macro_recall: T,
    pub macro_f1: T,
    /// Always `"macro"`; multi-class headline numbers are macro averages.
    pub averaging: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive: Option<PositiveClassMetrics<T>>,
    /// Quantities whose denominator was zero, e.g. `precision[dirty]`.
    pub degenerate: Vec<String>,
}

impl<T: Real> MetricsReport<T> {
    /// `(precision, recall, f1, accuracy)`: positive-class values when a
    /// positive class was given, macro averages otherwise.
    pub fn headline(&self) -> [T; 4] {
        match &self.positive {
            Some(p) => [p.precision, p.recall, p.f1, self.accuracy],
            None => [self.macro_precision, self.macro_recall, self.macro_f1, self.accuracy],
        }
    }
}

fn ratio<T: Real>(num: u64, den: u64, flag: impl FnOnce() -> String, flags: &mut Vec<String>) -> T {
    if den == 0 {
        flags.push(flag());
        T::zero()
    } else {
        T::from_u64(num).expect("count") / T::from_u64(den).expect("count")
    }
}

fn harmonic<T: Real>(p: T, r: T, flag: impl FnOnce() -> String, flags: &mut Vec<String>) -> T {
    let s = p + r;
    if s == T::zero() {
        flags.push(flag());
        T::zero()
    } else {
        (p + p) * r / s
    }
}

pub fn metrics<T: Real>(cm: &ConfusionMatrix, positive_class: Option<usize>) -> MetricsReport<T> {
    let n = cm.num_classes();
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    let mut degenerate = Vec::new();

    let per_class: Vec<ClassMetrics<T>> = (0..n)
        .map(|c| {
            let name = &cm.class_names[c];
            let tp = cm.get(c, c);
            let precision = ratio(tp, cols[c], || format!("precision[{name}]"), &mut degenerate);
            let recall = ratio(tp, rows[c], || format!("recall[{name}]"), &mut degenerate);
            let f1 = harmonic(precision, recall, || format!("f1[{name}]"), &mut degenerate);
            ClassMetrics {
                class: name.clone(),
                precision,
                recall,
                f1,
                support: rows[c],
            }
        })
        .collect();

    let mean = |f: fn(&ClassMetrics<T>) -> T| -> T {
        if n == 0 {
            T::zero()
        } else {
            per_class.iter().map(f).fold(T::zero(), |a, b| a + b) / T::from_usize(n).expect("count")
        }
    };
    let macro_precision = mean(|m| m.precision);
    let macro_recall = mean(|m| m.recall);
    let macro_f1 = mean(|m| m.f1);
    let accuracy = ratio(cm.trace(), cm.total(), || "accuracy".into(), &mut degenerate);

    let positive = positive_class.filter(|&c| c < n).map(|c| {
        let m = &per_class[c];
        PositiveClassMetrics {
            class_index: c,
            class: m.class.clone(),
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
        }
    });

    MetricsReport {
        total: cm.total(),
        accuracy,
        per_class,
        macro_precision,
        macro_recall,
        macro_f1,
        averaging: "macro".into(),
        positive,
        degenerate,
    }
}

/// Round half away from zero to `decimals` places, treating values within
/// 1e-9 of a half step as exact halves so `0.925` becomes `0.93` despite
/// its binary representation.
pub fn round_half_up(x: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    let y = x.abs() * scale;
    let floor = y.floor();
    let frac = y - floor;
    let rounded = if frac >= 0.5 - 1e-9 { floor + 1.0 } else { floor };
    (rounded / scale).copysign(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub scheme: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

/// Scheme comparison in the layout of a results table, values rounded to
/// two decimals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

pub fn table_report<T: Real>(reports: &[(String, MetricsReport<T>)]) -> ComparisonTable {
    let rows = reports
        .iter()
        .map(|(scheme, rep)| {
            let [p, r, f, a] = rep.headline().map(|v| round_half_up(v.to_f64().expect("finite"), 2));
            TableRow {
                scheme: scheme.clone(),
                precision: p,
                recall: r,
                f1: f,
                accuracy: a,
            }
        })
        .collect();
    ComparisonTable {
        columns: ["Training Scheme", "Precision", "Recall", "F1-Score", "Accuracy"]
            .map(String::from)
            .to_vec(),
        rows,
    }
}

impl ComparisonTable {
    pub fn to_fixed_width(&self) -> String {
        let scheme_w = self
            .rows
            .iter()
            .map(|r| r.scheme.len())
            .chain([self.columns[0].len()])
            .max()
            .unwrap_or(0);
        let num_w: Vec<usize> = self.columns[1..].iter().map(|c| c.len().max(4)).collect();
        let mut out = String::new();
        let _ = write!(out, "{:<scheme_w$}", self.columns[0]);
        for (c, w) in self.columns[1..].iter().zip(&num_w) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<scheme_w$}", r.scheme);
            for (v, w) in [r.precision, r.recall, r.f1, r.accuracy].iter().zip(&num_w) {
                let _ = write!(out, "  {v:>w$.2}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.2},{:.2},{:.2},{:.2}",
                r.scheme, r.precision, r.recall, r.f1, r.accuracy
            );
        }
        out
    }
}

/// Parsed prediction file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Predictions {
    pub sample_ids: Vec<String>,
    pub y_true: Vec<usize>,
    pub y_pred: Vec<usize>,
}

#[derive(Deserialize)]
struct PredictionRow {
    sample_id: String,
    true_label: String,
    predicted_label: String,
}

/// Read a `sample_id,true_label,predicted_label` CSV. Labels may be class
/// indices or class names of `task`.
pub fn read_predictions<R: Read>(reader: R, task: Task) -> Result<Predictions, MetricsError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Predictions {
        sample_ids: Vec::new(),
        y_true: Vec::new(),
        y_pred: Vec::new(),
    };
    for (i, row) in rdr.deserialize::<PredictionRow>().enumerate() {
        let row = row?;
        let parse = |value: &str, column: &'static str| {
            task.parse_label(value).ok_or_else(|| MetricsError::UnknownLabel {
                row: i + 2,
                column,
                value: value.to_owned(),
                task,
            })
        };
        out.y_true.push(parse(&row.true_label, "true_label")?);
        out.y_pred.push(parse(&row.predicted_label, "predicted_label")?);
        out.sample_ids.push(row.sample_id);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn perfect_predictions_give_diagonal_and_ones() {
        let y = [0, 1, 2, 2, 1, 0, 0];
        let cm = confusion(&y, &y, 3).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                if t != p {
                    assert_eq!(cm.get(t, p), 0);
                }
            }
        }
        let m = metrics::<f64>(&cm, None);
        assert_eq!(m.headline(), [1.0; 4]);
        assert!(m.degenerate.is_empty());
    }

    #[test]
    fn all_predicted_one_fills_single_column() {
        let t = [0, 1, 1, 0, 1];
        let cm = confusion(&t, &[1; 5], 2).unwrap();
        assert_eq!(cm.col_sums(), vec![0, 5]);
        assert_eq!(cm.row_sums(), vec![2, 3]);
        let m = metrics::<f64>(&cm, Some(1));
        assert!(m.degenerate.iter().any(|d| d == "precision[class 0]"));
        assert_eq!(m.per_class[0].precision, 0.0);
    }

    #[test]
    fn degenerate_all_dirty_matches_few_shot_row() {
        let y_true: Vec<usize> = (0..744).map(|i| usize::from(i < 484)).collect();
        let cm = ConfusionMatrix::for_task(&y_true, &[1; 744], Task::Binary).unwrap();
        let m = metrics::<f64>(&cm, Task::Binary.positive_class());
        let [p, r, f, a] = m.headline();
        assert_abs_diff_eq!(p, 484.0 / 744.0, epsilon = 1e-15);
        assert_eq!(r, 1.0);
        assert_abs_diff_eq!(f, 2.0 * p / (p + 1.0), epsilon = 1e-15);
        assert_eq!(a, p);
        let table = table_report(&[("Few-Shot".to_owned(), m)]);
        let row = &table.rows[0];
        assert_eq!(
            [row.precision, row.recall, row.f1, row.accuracy],
            [0.65, 1.0, 0.79, 0.65]
        );
    }

    #[test]
    fn errors() {
        assert!(matches!(
            confusion(&[0, 1], &[0], 2),
            Err(MetricsError::LengthMismatch { .. })
        ));
        assert!(matches!(
            confusion(&[0, 3], &[0, 0], 3),
            Err(MetricsError::LabelOutOfRange { index: 1, label: 3, .. })
        ));
        assert!(confusion(&[0], &[0], 2).unwrap().with_class_names(["a"]).is_err());
    }

    #[test]
    fn empty_input_is_flagged_not_thrown() {
        let cm = confusion(&[], &[], 2).unwrap();
        let m = metrics::<f64>(&cm, Some(1));
        assert_eq!(m.accuracy, 0.0);
        assert!(m.degenerate.contains(&"accuracy".to_owned()));
    }

    #[test]
    fn rounding() {
        assert_eq!(round_half_up(0.925, 2), 0.93);
        assert_eq!(round_half_up(0.145, 2), 0.15);
        assert_eq!(round_half_up(0.7883, 2), 0.79);
        assert_eq!(round_half_up(0.6505, 2), 0.65);
        assert_eq!(round_half_up(0.924999, 2), 0.92);
        assert_eq!(round_half_up(1.0, 2), 1.0);
    }

    #[test]
    fn table_layouts() {
        let empty = table_report::<f64>(&[]);
        assert_eq!(empty.to_fixed_width().lines().count(), 1);
        assert_eq!(empty.to_csv().lines().count(), 1);

        let cm = confusion(&[0, 1, 1, 0], &[0, 1, 0, 0], 2).unwrap();
        let m = metrics::<f64>(&cm, Some(1));
        let t = table_report(&[("A".to_owned(), m.clone()), ("Longer name".to_owned(), m)]);
        let text = t.to_fixed_width();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().starts_with("A "));
        assert!(t.to_csv().contains("A,1.00,0.50,0.67,0.75"));
    }

    #[test]
    fn read_prediction_csv() {
        let csv = "sample_id,true_label,predicted_label\na,clean,dirty\nb,1,1\nc, dirty ,clean\n";
        let p = read_predictions(csv.as_bytes(), Task::Binary).unwrap();
        assert_eq!(p.y_true, vec![0, 1, 1]);
        assert_eq!(p.y_pred, vec![1, 1, 0]);
        assert_eq!(p.sample_ids, ["a", "b", "c"]);

        let bad = "sample_id,true_label,predicted_label\na,clean,lightly dirty\n";
        match read_predictions(bad.as_bytes(), Task::Binary) {
            Err(MetricsError::UnknownLabel { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "predicted_label");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(read_predictions("id,x\n1,2\n".as_bytes(), Task::Binary).is_err());
    }
}
