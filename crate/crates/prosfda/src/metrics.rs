//! Per-class IoU and the overall mean, accumulated through a mergeable
//! confusion matrix. Classes whose union is empty never appeared in truth
//! or prediction; they are reported as absent and excluded from the mean.

use crate::error::{Error, Result};
use crate::model::LabelMap;

/// Pixel counts indexed `[truth][prediction]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::ShapeMismatch(format!(
                "confusion matrix for {num_classes} classes needs {} counts, got {}",
                num_classes * num_classes,
                counts.len()
            )));
        }
        Ok(Self { num_classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tallies one image worth of predictions against ground truth.
    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.height() != truth.height() || pred.width() != truth.width() {
            return Err(Error::ShapeMismatch(format!(
                "prediction {}x{} vs truth {}x{}",
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            )));
        }
        for (&p, &t) in pred.as_slice().iter().zip(truth.as_slice()) {
            if p >= self.num_classes || t >= self.num_classes {
                return Err(Error::InvalidArgument(format!(
                    "label pair (truth {t}, pred {p}) out of range for {} classes",
                    self.num_classes
                )));
            }
            self.counts[t * self.num_classes + p] += 1;
        }
        Ok(())
    }

    /// Element-wise sum; confusion matrices shard cleanly across images.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::ShapeMismatch(format!(
                "cannot merge confusion matrices of {} and {} classes",
                self.num_classes, other.num_classes
            )));
        }
        for (a, &b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Per-class IoU percentages (`None` = class absent from truth and
/// prediction) and the mean over present classes.
#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub overall: Option<f64>,
}

/// IoU per class: `TP / (TP + FP + FN)`, as percentages.
pub fn iou_report(cm: &ConfusionMatrix) -> IouReport {
    let c = cm.num_classes();
    let mut per_class = Vec::with_capacity(c);
    let mut sum = 0.0;
    let mut present = 0usize;
    for k in 0..c {
        let tp = cm.count(k, k);
        let fp: u64 = (0..c).filter(|&t| t != k).map(|t| cm.count(t, k)).sum();
        let fn_: u64 = (0..c).filter(|&p| p != k).map(|p| cm.count(k, p)).sum();
        let union = tp + fp + fn_;
        if union == 0 {
            per_class.push(None);
        } else {
            let iou = 100.0 * tp as f64 / union as f64;
            sum += iou;
            present += 1;
            per_class.push(Some(iou));
        }
    }
    let overall = if present > 0 { Some(sum / present as f64) } else { None };
    IouReport { per_class, overall }
}

impl IouReport {
    /// Aligned text table, one row per class plus the overall mean.
    pub fn text_table(&self) -> String {
        let mut s = String::new();
        s.push_str("class        iou_percent\n");
        for (k, iou) in self.per_class.iter().enumerate() {
            match iou {
                Some(v) => s.push_str(&format!("{:<12} {:>10.2}\n", k, v)),
                None => s.push_str(&format!("{:<12} {:>10}\n", k, "absent")),
            }
        }
        match self.overall {
            Some(v) => s.push_str(&format!("{:<12} {:>10.2}\n", "overall", v)),
            None => s.push_str(&format!("{:<12} {:>10}\n", "overall", "absent")),
        }
        s
    }

    /// CSV rows `class,iou_percent` with a final `overall` row; absent
    /// classes render as empty values.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,iou_percent\n");
        for (k, iou) in self.per_class.iter().enumerate() {
            match iou {
                Some(v) => s.push_str(&format!("{k},{v:.2}\n")),
                None => s.push_str(&format!("{k},\n")),
            }
        }
        match self.overall {
            Some(v) => s.push_str(&format!("overall,{v:.2}\n")),
            None => s.push_str("overall,\n"),
        }
        s
    }

    pub fn overall_or_zero(&self) -> f64 {
        self.overall.unwrap_or(0.0)
    }
}
