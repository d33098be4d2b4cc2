//! Confusion-matrix segmentation metrics.

use crate::error::{Error, Result};
use crate::griddata::{PseudoMask, IGNORE};

/// `K x K` pixel counts; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|k| self.get(k, k)).sum()
    }

    /// Adds one image. `pred` holds a class id per pixel in raster order;
    /// ground-truth pixels marked [`IGNORE`] are skipped.
    pub fn accumulate(&mut self, pred: &[usize], gt: &PseudoMask) -> Result<()> {
        if pred.len() != gt.labels().len() {
            return Err(Error::Shape(format!(
                "{} predictions for a {}x{} mask",
                pred.len(),
                gt.height(),
                gt.width()
            )));
        }
        for (&p, &g) in pred.iter().zip(gt.labels()) {
            if g == IGNORE {
                continue;
            }
            let g = g as usize;
            for c in [p, g] {
                if c >= self.classes {
                    return Err(Error::InvalidClass { class: c, num_classes: self.classes });
                }
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    /// Elementwise sum with another shard.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape("confusion matrices of different sizes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU per class; `None` for classes absent from both gt and prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|k| {
                let tp = self.get(k, k);
                let gt_total: u64 = (0..self.classes).map(|p| self.get(k, p)).sum();
                let pred_total: u64 = (0..self.classes).map(|g| self.get(g, k)).sum();
                let union = gt_total + pred_total - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with a non-empty union.
    pub fn miou(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(Error::Empty("confusion matrix has no counts".into()));
        }
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Empty("confusion matrix has no counts".into()));
        }
        Ok(self.trace() as f64 / total as f64)
    }
}
