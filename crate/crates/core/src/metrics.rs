//! Hard evaluation metrics: the population confusion matrix, overall /
//! producer's / user's accuracy, and Matthews correlation with macro
//! averaging.

use crate::error::{Error, Result};
use crate::raster::{ClassScheme, Raster, UNLABELED};
use serde::{Deserialize, Serialize};

/// Class-by-class pixel counts; rows index the predicted class, columns the
/// reference class. Stored as f64 so normalized fixtures load directly.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<f64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self { n: n_classes, counts: vec![0.0; n_classes * n_classes] }
    }

    /// Build from row-major counts (rows = predicted).
    pub fn from_counts(n_classes: usize, counts: Vec<f64>) -> Result<Self> {
        if counts.len() != n_classes * n_classes {
            return Err(Error::Shape(format!(
                "{} cells for a {n_classes}x{n_classes} matrix",
                counts.len()
            )));
        }
        if counts.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Input("matrix cells must be finite and nonnegative".into()));
        }
        Ok(Self { n: n_classes, counts })
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn at(&self, predicted: usize, reference: usize) -> f64 {
        self.counts[predicted * self.n + reference]
    }

    pub fn increment(&mut self, predicted: usize, reference: usize) {
        self.counts[predicted * self.n + reference] += 1.0;
    }

    /// Elementwise merge of another matrix (shard accumulation).
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.n != other.n {
            return Err(Error::Shape(format!(
                "cannot merge {}x{} into {}x{} matrix",
                other.n, other.n, self.n, self.n
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.at(i, i)).sum()
    }

    pub fn row_sum(&self, predicted: usize) -> f64 {
        (0..self.n).map(|j| self.at(predicted, j)).sum()
    }

    pub fn col_sum(&self, reference: usize) -> f64 {
        (0..self.n).map(|i| self.at(i, reference)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.at(i, j)).collect())
            .collect()
    }

    /// One-vs-rest binarization for class i: (TP, TN, FP, FN).
    pub fn one_vs_rest(&self, class: usize) -> (f64, f64, f64, f64) {
        let tp = self.at(class, class);
        let fp = self.row_sum(class) - tp;
        let fn_ = self.col_sum(class) - tp;
        let tn = self.total() - tp - fp - fn_;
        (tp, tn, fp, fn_)
    }
}

/// Tally predicted vs reference class rasters. Pixels carrying the unlabeled
/// sentinel in either raster are excluded.
pub fn confusion_matrix(
    predicted: &Raster,
    reference: &Raster,
    n_classes: usize,
) -> Result<ConfusionMatrix> {
    if predicted.bands() != 1 || reference.bands() != 1 {
        return Err(Error::Shape("class rasters must be single band".into()));
    }
    if predicted.width() != reference.width() || predicted.height() != reference.height() {
        return Err(Error::Shape(format!(
            "predicted {}x{} vs reference {}x{}",
            predicted.height(),
            predicted.width(),
            reference.height(),
            reference.width()
        )));
    }
    let mut m = ConfusionMatrix::new(n_classes);
    for r in 0..predicted.height() {
        for c in 0..predicted.width() {
            let p = predicted.value_at(0, r, c) as u8;
            let g = reference.value_at(0, r, c) as u8;
            if p == UNLABELED || g == UNLABELED {
                continue;
            }
            if p as usize >= n_classes || g as usize >= n_classes {
                return Err(Error::Encoding(format!(
                    "class id {} at (row {r}, col {c}) out of range 0..{n_classes}",
                    p.max(g)
                )));
            }
            m.increment(p as usize, g as usize);
        }
    }
    Ok(m)
}

/// Divide every cell by the grand total; the result sums to 1.
pub fn normalize_matrix(m: &ConfusionMatrix) -> Result<ConfusionMatrix> {
    let total = m.total();
    if total <= 0.0 {
        return Err(Error::Input("cannot normalize an empty confusion matrix".into()));
    }
    Ok(ConfusionMatrix {
        n: m.n,
        counts: m.counts.iter().map(|v| v / total).collect(),
    })
}

/// Overall accuracy: trace / total.
pub fn overall_accuracy(m: &ConfusionMatrix) -> f64 {
    let total = m.total();
    if total == 0.0 {
        return 0.0;
    }
    m.trace() / total
}

/// Producer's accuracy for a class: diagonal / reference-column sum. Absent
/// (None) when the class never occurs in the reference.
pub fn producers_accuracy(m: &ConfusionMatrix, class: usize) -> Option<f64> {
    let col = m.col_sum(class);
    (col > 0.0).then(|| m.at(class, class) / col)
}

/// User's accuracy for a class: diagonal / predicted-row sum. Absent (None)
/// when the class is never predicted.
pub fn users_accuracy(m: &ConfusionMatrix, class: usize) -> Option<f64> {
    let row = m.row_sum(class);
    (row > 0.0).then(|| m.at(class, class) / row)
}

/// Binary Matthews correlation coefficient; returns 0 when any denominator
/// factor vanishes (no-better-than-chance convention).
pub fn mcc_binary(tp: f64, tn: f64, fp: f64, fn_: f64) -> f64 {
    let factors = [(tp + fp), (tp + fn_), (tn + fp), (tn + fn_)];
    if factors.iter().any(|&f| f == 0.0) {
        return 0.0;
    }
    (tp * tn - fp * fn_) / factors.iter().product::<f64>().sqrt()
}

/// Macro-averaged MCC: mean of one-vs-rest binary MCC over all classes.
pub fn macro_mcc(m: &ConfusionMatrix) -> f64 {
    let per_class: f64 = (0..m.n)
        .map(|i| {
            let (tp, tn, fp, fn_) = m.one_vs_rest(i);
            mcc_binary(tp, tn, fp, fn_)
        })
        .sum();
    per_class / m.n as f64
}

/// Per-class line of the metrics report. pa/ua are None (serialized null)
/// when the class has an empty reference column / predicted row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub pa: Option<f64>,
    pub ua: Option<f64>,
    pub mcc: f64,
}

/// The JSON evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub oa: f64,
    pub mmcc: f64,
    pub per_class: Vec<ClassMetrics>,
    pub matrix_normalized: Vec<Vec<f64>>,
}

/// Assemble the full report from a confusion matrix.
pub fn metrics_report(m: &ConfusionMatrix, scheme: &ClassScheme) -> Result<MetricsReport> {
    if scheme.len() != m.n_classes() {
        return Err(Error::Shape(format!(
            "scheme has {} classes, matrix {}",
            scheme.len(),
            m.n_classes()
        )));
    }
    let normalized = normalize_matrix(m)?;
    let per_class = (0..m.n_classes())
        .map(|i| {
            let (tp, tn, fp, fn_) = m.one_vs_rest(i);
            ClassMetrics {
                class: scheme.label(i as u8).unwrap_or("?").to_string(),
                pa: producers_accuracy(m, i),
                ua: users_accuracy(m, i),
                mcc: mcc_binary(tp, tn, fp, fn_),
            }
        })
        .collect();
    Ok(MetricsReport {
        oa: overall_accuracy(m),
        mmcc: macro_mcc(m),
        per_class,
        matrix_normalized: normalized.rows(),
    })
}
