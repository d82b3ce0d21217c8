//! Confusion-matrix metrics: overall accuracy, mean IoU, mean F1.
//!
//! The matrix convention is `counts[[i, j]]` = pixels of true class `i`
//! predicted as class `j` (both zero-based; class ids are 1-based with the
//! ignore value excluded before counting). Classes absent from both ground
//! truth and prediction are reported as `None` and excluded from means.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Aggregation rule for mean F1.
///
/// `Standard` is the macro mean of per-class F1 = 2*p_ii/(row_i + col_i).
/// `Summed` first sums per-class ratios p_ii/(row_i + p_ii) into a global
/// precision P and p_ii/(col_i + p_ii) into a global recall R (denominators
/// count the diagonal twice), then evaluates 2PR/(P+R)/l. It tops out at 0.5
/// for perfect predictions and is kept for comparability; per-class scores
/// always use the standard definition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum F1Mode {
    Standard,
    Summed,
}

/// Per-class values (None = class unsupported) plus the aggregate.
#[derive(Debug, Clone)]
pub struct ClassMetric {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Argument(
                "confusion matrix needs at least one class".into(),
            ));
        }
        Ok(ConfusionMatrix {
            counts: Array2::zeros((num_classes, num_classes)),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    /// Number of evaluated (non-ignored) pixels.
    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// Returns a new matrix with the pixel pairs counted in; pixels whose
    /// ground truth equals `ignore` are skipped entirely.
    pub fn accumulate(
        &self,
        pred: ArrayView2<'_, u8>,
        gt: ArrayView2<'_, u8>,
        ignore: u8,
    ) -> Result<Self> {
        if pred.dim() != gt.dim() {
            return Err(Error::Argument(format!(
                "prediction extent {:?} does not match ground truth {:?}",
                pred.dim(),
                gt.dim()
            )));
        }
        let l = self.num_classes();
        let mut counts = self.counts.clone();
        for (p, g) in pred.iter().zip(gt.iter()) {
            if *g == ignore {
                continue;
            }
            let gi = class_index(*g, l, "ground truth")?;
            let pi = class_index(*p, l, "prediction")?;
            counts[[gi, pi]] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    /// Adds two matrices; partition-and-merge equals one global accumulate.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.num_classes() != other.num_classes() {
            return Err(Error::Argument(format!(
                "cannot merge {}-class and {}-class matrices",
                self.num_classes(),
                other.num_classes()
            )));
        }
        Ok(ConfusionMatrix {
            counts: &self.counts + &other.counts,
        })
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::UndefinedMetric(
                "confusion matrix has no evaluated pixels".into(),
            ));
        }
        Ok(())
    }

    fn row_sum(&self, i: usize) -> u64 {
        self.counts.row(i).sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        self.counts.column(j).sum()
    }

    /// Trace over total.
    pub fn overall_accuracy(&self) -> Result<f64> {
        self.require_nonempty()?;
        let trace: u64 = (0..self.num_classes()).map(|i| self.counts[[i, i]]).sum();
        Ok(trace as f64 / self.total() as f64)
    }

    /// Per-class intersection over union and its mean over supported classes.
    pub fn mean_iou(&self) -> Result<ClassMetric> {
        self.require_nonempty()?;
        let l = self.num_classes();
        let mut per_class = Vec::with_capacity(l);
        let mut sum = 0.0;
        let mut supported = 0usize;
        for i in 0..l {
            let row = self.row_sum(i);
            let col = self.col_sum(i);
            if row + col == 0 {
                per_class.push(None);
                continue;
            }
            let tp = self.counts[[i, i]];
            let iou = tp as f64 / (row + col - tp) as f64;
            per_class.push(Some(iou));
            sum += iou;
            supported += 1;
        }
        Ok(ClassMetric {
            per_class,
            mean: sum / supported as f64,
        })
    }

    /// Per-class F1 (standard definition) and the aggregate per [`F1Mode`].
    pub fn mean_f1(&self, mode: F1Mode) -> Result<ClassMetric> {
        self.require_nonempty()?;
        let l = self.num_classes();
        let mut per_class = Vec::with_capacity(l);
        let mut sum = 0.0;
        let mut supported = 0usize;
        for i in 0..l {
            let row = self.row_sum(i);
            let col = self.col_sum(i);
            if row + col == 0 {
                per_class.push(None);
                continue;
            }
            let tp = self.counts[[i, i]];
            let f1 = 2.0 * tp as f64 / (row + col) as f64;
            per_class.push(Some(f1));
            sum += f1;
            supported += 1;
        }
        let mean = match mode {
            F1Mode::Standard => sum / supported as f64,
            F1Mode::Summed => {
                let mut p = 0.0;
                let mut r = 0.0;
                for i in 0..l {
                    let tp = self.counts[[i, i]] as f64;
                    let row = self.row_sum(i) as f64;
                    let col = self.col_sum(i) as f64;
                    if row + tp > 0.0 {
                        p += tp / (row + tp);
                    }
                    if col + tp > 0.0 {
                        r += tp / (col + tp);
                    }
                }
                if p + r > 0.0 {
                    2.0 * p * r / (p + r) / l as f64
                } else {
                    0.0
                }
            }
        };
        Ok(ClassMetric { per_class, mean })
    }
}

fn class_index(label: u8, num_classes: usize, what: &str) -> Result<usize> {
    if label == 0 || label as usize > num_classes {
        return Err(Error::Data(format!(
            "{what} label {label} outside valid class range 1..={num_classes}"
        )));
    }
    Ok(label as usize - 1)
}

/// One row of the JSON report's per-class section.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerClassEntry {
    pub class_id: usize,
    pub name: String,
    pub iou: Option<f64>,
    pub f1: Option<f64>,
}

/// Serializable evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub oa: f64,
    pub miou: f64,
    pub mf1: f64,
    pub per_class: Vec<PerClassEntry>,
    pub confusion: Vec<Vec<u64>>,
    pub mode: F1Mode,
    pub evaluated_pixels: u64,
}

/// Assembles the full report from a matrix and the manifest's class names.
pub fn build_report(cm: &ConfusionMatrix, class_names: &[String], mode: F1Mode) -> Result<Report> {
    let l = cm.num_classes();
    if class_names.len() != l {
        return Err(Error::Argument(format!(
            "{} class names supplied for {l} classes",
            class_names.len()
        )));
    }
    let oa = cm.overall_accuracy()?;
    let iou = cm.mean_iou()?;
    let f1 = cm.mean_f1(mode)?;
    let per_class = (0..l)
        .map(|i| PerClassEntry {
            class_id: i + 1,
            name: class_names[i].clone(),
            iou: iou.per_class[i],
            f1: f1.per_class[i],
        })
        .collect();
    let confusion = (0..l)
        .map(|i| cm.counts().row(i).to_vec())
        .collect();
    Ok(Report {
        oa,
        miou: iou.mean,
        mf1: f1.mean,
        per_class,
        confusion,
        mode,
        evaluated_pixels: cm.total(),
    })
}

/// Fixed-width text rendering of a report for terminal output.
pub fn render_table(report: &Report) -> String {
    let mut out = String::new();
    let name_w = report
        .per_class
        .iter()
        .map(|e| e.name.len())
        .max()
        .unwrap_or(4)
        .max(5);
    out.push_str(&format!("{:>3}  {:<name_w$}  {:>8}  {:>8}\n", "id", "class", "IoU", "F1"));
    for e in &report.per_class {
        let fmt = |v: Option<f64>| match v {
            Some(v) => format!("{:8.4}", v),
            None => format!("{:>8}", "--"),
        };
        out.push_str(&format!(
            "{:>3}  {:<name_w$}  {}  {}\n",
            e.class_id,
            e.name,
            fmt(e.iou),
            fmt(e.f1)
        ));
    }
    out.push_str(&format!(
        "OA {:.4}  mIoU {:.4}  mF1 {:.4}  ({} pixels evaluated)\n",
        report.oa, report.miou, report.mf1, report.evaluated_pixels
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    /// The worked four-pixel example used across the metric tests:
    /// pred = [1,1,2,2], gt = [1,2,2,2].
    fn example_matrix() -> ConfusionMatrix {
        let cm = ConfusionMatrix::new(2).unwrap();
        let pred = arr2(&[[1u8, 1, 2, 2]]);
        let gt = arr2(&[[1u8, 2, 2, 2]]);
        cm.accumulate(pred.view(), gt.view(), 0).unwrap()
    }

    #[test]
    fn accumulate_counts_match_hand_tally() {
        let cm = example_matrix();
        assert_eq!(cm.counts()[[0, 0]], 1); // true 1 predicted 1
        assert_eq!(cm.counts()[[1, 0]], 1); // true 2 predicted 1
        assert_eq!(cm.counts()[[1, 1]], 2); // true 2 predicted 2
        assert_eq!(cm.counts()[[0, 1]], 0);
        assert_eq!(cm.total(), 4);
    }

    #[test]
    fn hand_computed_aggregates_on_the_example() {
        let cm = example_matrix();
        assert!((cm.overall_accuracy().unwrap() - 0.75).abs() < 1e-15);
        let iou = cm.mean_iou().unwrap();
        assert_eq!(iou.per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((iou.mean - 7.0 / 12.0).abs() < 1e-15);
        let f1 = cm.mean_f1(F1Mode::Standard).unwrap();
        assert_eq!(f1.per_class, vec![Some(2.0 / 3.0), Some(0.8)]);
        assert!((f1.mean - 11.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn summed_mode_matches_frozen_transcription() {
        // Hand transcription of the summed-denominator definition on the
        // example matrix, done independently before this module was written:
        // P = 1/(1+1) + 2/(3+2) = 9/10, R = 1/(2+1) + 2/(2+2) = 5/6,
        // aggregate = (1/2) * 2PR/(P+R) = 45/104.
        let cm = example_matrix();
        let f1 = cm.mean_f1(F1Mode::Summed).unwrap();
        assert!((f1.mean - 45.0 / 104.0).abs() < 1e-15, "{}", f1.mean);
        // Per-class entries stay on the standard definition.
        assert_eq!(f1.per_class, vec![Some(2.0 / 3.0), Some(0.8)]);
    }

    #[test]
    fn perfect_and_uniform_matrices() {
        let cm = ConfusionMatrix::new(2).unwrap();
        let ids = arr2(&[[1u8, 2, 1, 2]]);
        let perfect = cm.accumulate(ids.view(), ids.view(), 0).unwrap();
        assert_eq!(perfect.overall_accuracy().unwrap(), 1.0);
        assert!(perfect
            .mean_iou()
            .unwrap()
            .per_class
            .iter()
            .all(|v| *v == Some(1.0)));
        assert_eq!(perfect.mean_f1(F1Mode::Standard).unwrap().mean, 1.0);

        let uniform = ConfusionMatrix {
            counts: arr2(&[[1u64, 1], [1, 1]]),
        };
        assert_eq!(uniform.overall_accuracy().unwrap(), 0.5);
    }

    #[test]
    fn ignored_pixels_and_empty_matrices() {
        let cm = ConfusionMatrix::new(3).unwrap();
        let pred = arr2(&[[1u8, 2, 3]]);
        let gt = arr2(&[[0u8, 0, 0]]);
        let cm = cm.accumulate(pred.view(), gt.view(), 0).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(matches!(
            cm.overall_accuracy(),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(cm.mean_iou(), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn unsupported_class_reported_as_null() {
        // 3 classes but only 1 and 2 appear anywhere.
        let cm = ConfusionMatrix::new(3).unwrap();
        let pred = arr2(&[[1u8, 2, 2]]);
        let gt = arr2(&[[1u8, 1, 2]]);
        let cm = cm.accumulate(pred.view(), gt.view(), 0).unwrap();
        let iou = cm.mean_iou().unwrap();
        assert_eq!(iou.per_class[2], None);
        assert!((iou.mean - (0.5 + 0.5) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_labels_rejected() {
        let cm = ConfusionMatrix::new(2).unwrap();
        let bad_pred = arr2(&[[3u8]]);
        let gt = arr2(&[[1u8]]);
        assert!(matches!(
            cm.accumulate(bad_pred.view(), gt.view(), 0),
            Err(Error::Data(_))
        ));
        // A prediction equal to the ignore value is also invalid; only the
        // ground truth side can mark a pixel as ignored.
        let zero_pred = arr2(&[[0u8]]);
        assert!(matches!(
            cm.accumulate(zero_pred.view(), gt.view(), 0),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn merge_equals_single_pass() {
        let base = ConfusionMatrix::new(4).unwrap();
        let pred = arr2(&[[1u8, 2, 3, 4, 1, 2], [4u8, 3, 2, 1, 1, 1]]);
        let gt = arr2(&[[1u8, 1, 3, 4, 2, 2], [4u8, 4, 2, 1, 0, 3]]);
        let whole = base.accumulate(pred.view(), gt.view(), 0).unwrap();
        let top = base
            .accumulate(pred.slice(ndarray::s![0..1, ..]), gt.slice(ndarray::s![0..1, ..]), 0)
            .unwrap();
        let bottom = base
            .accumulate(pred.slice(ndarray::s![1..2, ..]), gt.slice(ndarray::s![1..2, ..]), 0)
            .unwrap();
        assert_eq!(whole, top.merge(&bottom).unwrap());
    }

    #[test]
    fn report_serializes_expected_keys() {
        let cm = example_matrix();
        let names = vec!["water".to_string(), "forest".to_string()];
        let report = build_report(&cm, &names, F1Mode::Standard).unwrap();
        let json: serde_json::Value =
            serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
        for key in ["oa", "miou", "mf1", "per_class", "confusion", "mode", "evaluated_pixels"] {
            assert!(json.get(key).is_some(), "missing key {key}");
        }
        assert_eq!(json["mode"], "standard");
        assert_eq!(json["evaluated_pixels"], 4);
        assert_eq!(json["per_class"][0]["name"], "water");
        assert_eq!(json["confusion"][1][0], 1);
    }
}
