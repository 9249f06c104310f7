//! Confusion-matrix segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmentation::{SegmentationMask, IGNORE};

/// `(C + 1) x (C + 1)` pixel counts; rows are ground truth, columns are
/// predictions, index 0 is background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    size: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(class_count: usize) -> Self {
        let size = class_count + 1;
        Self {
            size,
            counts: vec![0; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.size + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Add every non-ignored pixel of a prediction/ground-truth pair.
    pub fn accumulate(&mut self, pred: &SegmentationMask, gt: &SegmentationMask) -> Result<()> {
        if pred.labels().dim() != gt.labels().dim() {
            return Err(Error::ShapeMismatch(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.labels().dim(),
                gt.labels().dim()
            )));
        }
        for (&g, &p) in gt.labels().iter().zip(pred.labels().iter()) {
            if g == IGNORE || p == IGNORE {
                continue;
            }
            let (g, p) = (g as usize, p as usize);
            if g >= self.size || p >= self.size {
                return Err(Error::invalid(format!(
                    "label {} outside {} classes",
                    g.max(p),
                    self.size - 1
                )));
            }
            self.counts[g * self.size + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.size != other.size {
            return Err(Error::ShapeMismatch("confusion matrices differ in size".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    fn tp_fp_fn(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let col: u64 = (0..self.size).map(|g| self.get(g, c)).sum();
        let row: u64 = (0..self.size).map(|p| self.get(c, p)).sum();
        (tp, col - tp, row - tp)
    }

    /// IoU per class (background first); `None` where the union is empty.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.size)
            .map(|c| {
                let (tp, fp, fn_) = self.tp_fp_fn(c);
                let union = tp + fp + fn_;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean over classes with a non-empty union.
    pub fn mean_iou(&self) -> f64 {
        let present: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }

    /// Macro precision and recall over foreground classes present in the
    /// ground truth. A present class that is never predicted has precision 0.
    pub fn precision_recall(&self) -> (f64, f64) {
        let mut p = Vec::new();
        let mut r = Vec::new();
        for c in 1..self.size {
            let (tp, fp, fn_) = self.tp_fp_fn(c);
            if tp + fn_ == 0 {
                continue;
            }
            p.push(if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 });
            r.push(tp as f64 / (tp + fn_) as f64);
        }
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        (mean(&p), mean(&r))
    }

    /// Pooled foreground precision and recall (every foreground pixel counts once).
    pub fn micro_precision_recall(&self) -> (f64, f64) {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for c in 1..self.size {
            let (a, b, d) = self.tp_fp_fn(c);
            tp += a;
            fp += b;
            fn_ += d;
        }
        let ratio = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        (ratio(tp, tp + fp), ratio(tp, tp + fn_))
    }

    pub fn report(&self, class_names: &[String]) -> MetricsReport {
        let (precision, recall) = self.precision_recall();
        let (micro_precision, micro_recall) = self.micro_precision_recall();
        let names: Vec<String> = std::iter::once("background".to_string())
            .chain((1..self.size).map(|c| {
                class_names
                    .get(c - 1)
                    .cloned()
                    .unwrap_or_else(|| format!("class{}", c - 1))
            }))
            .collect();
        MetricsReport {
            per_class_iou: names.into_iter().zip(self.iou_per_class()).collect(),
            mean_iou: self.mean_iou(),
            precision,
            recall,
            micro_precision,
            micro_recall,
            pixels: self.total(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_iou: Vec<(String, Option<f64>)>,
    pub mean_iou: f64,
    /// Macro average over foreground classes present in ground truth.
    pub precision: f64,
    pub recall: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub pixels: u64,
}

impl MetricsReport {
    pub fn to_table(&self) -> String {
        let mut out = String::from("class                 IoU\n");
        for (name, iou) in &self.per_class_iou {
            match iou {
                Some(v) => out.push_str(&format!("{name:<16} {:>8.2}\n", 100.0 * v)),
                None => out.push_str(&format!("{name:<16} {:>8}\n", "-")),
            }
        }
        out.push_str(&format!("{:<16} {:>8.2}\n", "mIoU", 100.0 * self.mean_iou));
        out.push_str(&format!("{:<16} {:>8.2}\n", "precision", 100.0 * self.precision));
        out.push_str(&format!("{:<16} {:>8.2}\n", "recall", 100.0 * self.recall));
        out.push_str(&format!("{:<16} {:>8.2}\n", "micro-precision", 100.0 * self.micro_precision));
        out.push_str(&format!("{:<16} {:>8.2}\n", "micro-recall", 100.0 * self.micro_recall));
        out
    }

    /// Machine-readable form keyed by class name.
    pub fn to_json(&self) -> serde_json::Value {
        let per_class: serde_json::Map<String, serde_json::Value> = self
            .per_class_iou
            .iter()
            .map(|(n, v)| (n.clone(), serde_json::json!(v)))
            .collect();
        serde_json::json!({
            "per_class_iou": per_class,
            "mean_iou": self.mean_iou,
            "precision": { "macro": self.precision, "micro": self.micro_precision },
            "recall": { "macro": self.recall, "micro": self.micro_recall },
            "pixels": self.pixels,
        })
    }
}
