//! Quantitative evaluation: per-class segmentation metrics, synthetic
//! dataset generation, a compact segmentation network, and the cross
//! train/test matrix over data sources.

mod cross;
mod segment;
mod synth;

pub use cross::{cross_evaluate, score, CrossCell, CrossMatrix, Source};
pub use segment::{train_segmenter, SegConfig, SegModel};
pub use synth::{generate_synthetic_dataset, make_texture_dataset};

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forge::LabelMap;

/// One-vs-rest scores of a single class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    /// Ground-truth pixels of this class.
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub per_class: Vec<ClassScores>,
    /// Unweighted means over all classes.
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub pixel_accuracy: f64,
}

/// `confusion[truth][pred]` pixel counts over all pairs.
pub fn confusion_matrix(preds: &[&LabelMap], gts: &[&LabelMap], classes: usize) -> Result<Vec<Vec<u64>>> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!("{} predictions vs {} ground truths", preds.len(), gts.len())));
    }
    let mut cm = vec![vec![0u64; classes]; classes];
    for (k, (p, g)) in preds.iter().zip(gts).enumerate() {
        if (p.width, p.height) != (g.width, g.height) {
            return Err(Error::Shape(format!(
                "pair {k}: {}x{} prediction vs {}x{} ground truth",
                p.width, p.height, g.width, g.height
            )));
        }
        p.check_classes(classes)?;
        g.check_classes(classes)?;
        for (&a, &b) in g.data.iter().zip(&p.data) {
            cm[a as usize][b as usize] += 1;
        }
    }
    Ok(cm)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class scores and their macro averages. A class absent from both
/// ground truth and predictions scores 1 everywhere; absent from ground
/// truth only, it scores precision and recall 0.
pub fn reconstruction_metrics(preds: &[&LabelMap], gts: &[&LabelMap], classes: usize) -> Result<ClassMetrics> {
    let cm = confusion_matrix(preds, gts, classes)?;
    let total: u64 = cm.iter().flatten().sum();
    if total == 0 {
        return Err(Error::Input("no pixels to score".into()));
    }
    let per_class: Vec<ClassScores> = (0..classes)
        .map(|c| {
            let tp = cm[c][c];
            let fn_ = cm[c].iter().sum::<u64>() - tp;
            let fp = (0..classes).map(|t| cm[t][c]).sum::<u64>() - tp;
            let tn = total - tp - fp - fn_;
            let accuracy = ratio(tp + tn, total);
            if tp + fp + fn_ == 0 {
                return ClassScores {
                    accuracy,
                    precision: 1.0,
                    recall: 1.0,
                    f1: 1.0,
                    iou: 1.0,
                    support: 0,
                };
            }
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores {
                accuracy,
                precision,
                recall,
                f1,
                iou: ratio(tp, tp + fp + fn_),
                support: tp + fn_,
            }
        })
        .collect();
    let mean = |f: fn(&ClassScores) -> f64| per_class.iter().map(f).sum::<f64>() / classes as f64;
    Ok(ClassMetrics {
        accuracy: mean(|s| s.accuracy),
        precision: mean(|s| s.precision),
        recall: mean(|s| s.recall),
        f1: mean(|s| s.f1),
        iou: mean(|s| s.iou),
        pixel_accuracy: ratio((0..classes).map(|c| cm[c][c]).sum(), total),
        per_class,
    })
}

impl ClassMetrics {
    /// Aligned text table: one row per class, then the macro average.
    pub fn table(&self, names: &[String]) -> String {
        let width = names.iter().map(String::len).max().unwrap_or(0).max(9);
        let mut s = format!(
            "{:<width$}  {:>8}  {:>9}  {:>6}  {:>6}  {:>6}\n",
            "class", "accuracy", "precision", "recall", "f1", "iou"
        );
        let mut row = |name: &str, a: f64, p: f64, r: f64, f: f64, i: f64| {
            writeln!(s, "{name:<width$}  {a:>8.4}  {p:>9.4}  {r:>6.4}  {f:>6.4}  {i:>6.4}").expect("string write");
        };
        for (k, c) in self.per_class.iter().enumerate() {
            let name = names.get(k).cloned().unwrap_or_else(|| k.to_string());
            row(&name, c.accuracy, c.precision, c.recall, c.f1, c.iou);
        }
        row("average", self.accuracy, self.precision, self.recall, self.f1, self.iou);
        writeln!(s, "pixel accuracy {:.4}", self.pixel_accuracy).expect("string write");
        s
    }
}
