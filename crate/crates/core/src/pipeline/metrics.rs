//! Pixel and class accuracy from a confusion matrix.

use serde::Serialize;

use crate::error::{dim_err, Result};
use crate::training::IGNORE_LABEL;

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    /// Count every pixel whose ground truth is not the ignore label.
    pub fn add(&mut self, truth: &[u8], predicted: &[u8]) -> Result<()> {
        if truth.len() != predicted.len() {
            return Err(dim_err!(
                "{} ground-truth labels vs {} predictions",
                truth.len(),
                predicted.len()
            ));
        }
        let c = self.classes;
        for (&t, &p) in truth.iter().zip(predicted) {
            if t == IGNORE_LABEL {
                continue;
            }
            if t as usize >= c || p as usize >= c {
                return Err(dim_err!("label pair ({t}, {p}) outside {c} classes"));
            }
            self.counts[t as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn row_total(&self, truth: usize) -> u64 {
        self.counts[truth * self.classes..(truth + 1) * self.classes]
            .iter()
            .sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes).map(|k| self.get(k, k)).sum()
    }

    /// Correct / valid pixels; 0 when nothing was counted.
    pub fn pixel_accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            0.0
        } else {
            self.correct() as f64 / t as f64
        }
    }

    /// Per-class recall; `None` for classes absent from the ground truth.
    pub fn per_class(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|k| {
                let n = self.row_total(k);
                (n > 0).then(|| self.get(k, k) as f64 / n as f64)
            })
            .collect()
    }

    /// Unweighted mean recall over classes present in the ground truth.
    pub fn class_accuracy(&self) -> f64 {
        let present: Vec<f64> = self.per_class().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }

    pub fn report(&self) -> MetricsReport {
        MetricsReport {
            pixel_accuracy: self.pixel_accuracy(),
            class_accuracy: self.class_accuracy(),
            per_class: self.per_class(),
            confusion: (0..self.classes)
                .map(|r| self.counts[r * self.classes..(r + 1) * self.classes].to_vec())
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub pixel_accuracy: f64,
    pub class_accuracy: f64,
    pub per_class: Vec<Option<f64>>,
    pub confusion: Vec<Vec<u64>>,
}
