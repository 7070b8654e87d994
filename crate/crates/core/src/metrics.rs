//! Confusion-count metrics for binary classification and mask segmentation.
//!
//! Non-forest (deforestation) is the positive class. Precision, recall, F1,
//! accuracy and IoU use their standard definitions:
//!
//! - precision = tp / (tp + fp)
//! - recall    = tp / (tp + fn)
//! - f1        = 2PR / (P + R)
//! - accuracy  = (tp + tn) / (tp + fp + tn + fn)
//! - iou       = tp / (tp + fp + fn)
//!
//! A metric whose denominator is zero is reported as undefined, never as 0.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{LabelMask, IGNORE, NON_FOREST};
use crate::segset::Label;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("{metric} is undefined: zero denominator")]
    ZeroDenominator { metric: &'static str },
    #[error("prediction is {pred_w}x{pred_h} but truth is {truth_w}x{truth_h}")]
    DimensionMismatch {
        pred_w: usize,
        pred_h: usize,
        truth_w: usize,
        truth_h: usize,
    },
    #[error("prediction contains an ignore pixel at index {0}")]
    IgnoreInPrediction(usize),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

fn ratio(num: u64, den: u64, metric: &'static str) -> Result<f64, MetricError> {
    if den == 0 {
        Err(MetricError::ZeroDenominator { metric })
    } else {
        Ok(num as f64 / den as f64)
    }
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, truth_positive: bool, pred_positive: bool) {
        match (truth_positive, pred_positive) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fn_ += 1,
        }
    }

    pub fn merge(&self, o: &Self) -> Self {
        Self::new(
            self.tp + o.tp,
            self.fp + o.fp,
            self.tn + o.tn,
            self.fn_ + o.fn_,
        )
    }

    pub fn precision(&self) -> Result<f64, MetricError> {
        ratio(self.tp, self.tp + self.fp, "precision")
    }

    pub fn recall(&self) -> Result<f64, MetricError> {
        ratio(self.tp, self.tp + self.fn_, "recall")
    }

    /// Harmonic mean of precision and recall, computed as 2tp / (2tp + fp + fn).
    pub fn f1(&self) -> Result<f64, MetricError> {
        self.precision()?;
        self.recall()?;
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_, "f1")
    }

    pub fn accuracy(&self) -> Result<f64, MetricError> {
        ratio(self.tp + self.tn, self.total(), "accuracy")
    }

    pub fn iou(&self) -> Result<f64, MetricError> {
        ratio(self.tp, self.tp + self.fp + self.fn_, "iou")
    }

    pub fn summary(&self) -> MetricSummary {
        MetricSummary::from_results([
            ("precision", self.precision()),
            ("recall", self.recall()),
            ("f1", self.f1()),
            ("accuracy", self.accuracy()),
            ("iou", self.iou()),
        ])
    }
}

/// Five metrics with `null` for undefined values; `undefined` names them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub iou: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

impl MetricSummary {
    fn from_results(items: [(&'static str, Result<f64, MetricError>); 5]) -> Self {
        let mut s = MetricSummary::default();
        for (name, r) in items {
            let v = match r {
                Ok(v) => Some(v),
                Err(_) => {
                    s.undefined.push(name.to_string());
                    None
                }
            };
            match name {
                "precision" => s.precision = v,
                "recall" => s.recall = v,
                "f1" => s.f1 = v,
                "accuracy" => s.accuracy = v,
                _ => s.iou = v,
            }
        }
        s
    }

    /// Mean of each metric over the summaries where it is defined.
    pub fn macro_mean(items: &[MetricSummary]) -> Self {
        let mean = |get: fn(&MetricSummary) -> Option<f64>, name: &'static str| {
            let vals: Vec<f64> = items.iter().filter_map(get).collect();
            if vals.is_empty() {
                (name, Err(MetricError::ZeroDenominator { metric: name }))
            } else {
                (name, Ok(vals.iter().sum::<f64>() / vals.len() as f64))
            }
        };
        Self::from_results([
            mean(|s| s.precision, "precision"),
            mean(|s| s.recall, "recall"),
            mean(|s| s.f1, "f1"),
            mean(|s| s.accuracy, "accuracy"),
            mean(|s| s.iou, "iou"),
        ])
    }
}

/// Pixelwise counts over pixels whose truth is not ignore.
pub fn confusion(pred: &LabelMask, truth: &LabelMask) -> Result<ConfusionCounts, MetricError> {
    if pred.width() != truth.width() || pred.height() != truth.height() {
        return Err(MetricError::DimensionMismatch {
            pred_w: pred.width(),
            pred_h: pred.height(),
            truth_w: truth.width(),
            truth_h: truth.height(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (i, (&p, &t)) in pred.labels().iter().zip(truth.labels()).enumerate() {
        if p == IGNORE {
            return Err(MetricError::IgnoreInPrediction(i));
        }
        if t == IGNORE {
            continue;
        }
        c.add(t == NON_FOREST, p == NON_FOREST);
    }
    Ok(c)
}

pub fn confusion_from_labels(
    truth: &[Label],
    pred: &[Label],
) -> Result<ConfusionCounts, MetricError> {
    if truth.len() != pred.len() {
        return Err(MetricError::Length(truth.len(), pred.len()));
    }
    let mut c = ConfusionCounts::default();
    for (t, p) in truth.iter().zip(pred) {
        c.add(t.is_positive(), p.is_positive());
    }
    Ok(c)
}

/// RGB error map: black = TN, white = TP, red = FN, blue = FP, gray = ignored truth.
pub fn error_visualization(
    pred: &LabelMask,
    truth: &LabelMask,
) -> Result<Vec<[u8; 3]>, MetricError> {
    confusion(pred, truth)?;
    Ok(pred
        .labels()
        .iter()
        .zip(truth.labels())
        .map(|(&p, &t)| match (t, p == NON_FOREST) {
            (IGNORE, _) => [128, 128, 128],
            (NON_FOREST, true) => [255, 255, 255],
            (NON_FOREST, false) => [255, 0, 0],
            (_, true) => [0, 0, 255],
            (_, false) => [0, 0, 0],
        })
        .collect())
}
