//! Average cross entropy over labelled pixels.

use crate::error::{dim_err, Error, Result};
use crate::tensor::{FeatureMap, Scalar};

use super::model::IGNORE_LABEL;

/// Smallest probability fed to the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct LossReport<T> {
    pub loss: f64,
    /// Unnormalized `Σ −log p` with its rounding compensation.
    pub total: NeumaierSum,
    /// Gradient with respect to the pre-softmax scores.
    pub d_logits: FeatureMap<T>,
    /// Number of non-ignored pixels.
    pub valid: usize,
    pub classes: usize,
}

/// Compensated summation; keeps the loss accurate to a few ulps so that
/// finite differences of it resolve small gradients.
#[derive(Clone, Copy, Debug, Default)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }

    /// `self − other`, keeping the low-order parts of both.
    pub fn diff(&self, other: &NeumaierSum) -> f64 {
        (self.sum - other.sum) + (self.comp - other.comp)
    }
}

/// `L = -(1/N) Σ log p(true class)` over non-ignored pixels, with the gradient
/// through the softmax `(p - onehot) / N` (zero at ignored pixels).
pub fn cross_entropy<T: Scalar>(probs: &FeatureMap<T>, labels: &[u8]) -> Result<LossReport<T>> {
    let (h, w, c) = probs.dims();
    if labels.len() != h * w {
        return Err(dim_err!(
            "cross_entropy: {} labels for a {h}x{w} map",
            labels.len()
        ));
    }
    let mut valid = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        if l == IGNORE_LABEL {
            continue;
        }
        if l as usize >= c {
            return Err(dim_err!(
                "cross_entropy: label {l} at ({}, {}) is not below {c}",
                i / w,
                i % w
            ));
        }
        valid += 1;
    }
    if valid == 0 {
        return Err(Error::Degenerate(
            "every pixel carries the ignore label".into(),
        ));
    }
    let n = T::lit(valid as f64);
    let mut sum = NeumaierSum::default();
    let mut d = FeatureMap::zeros(h, w, c);
    for (&l, (px, dpx)) in labels
        .iter()
        .zip(probs.data().chunks_exact(c).zip(d.data_mut().chunks_exact_mut(c)))
    {
        if l == IGNORE_LABEL {
            continue;
        }
        sum.add(-px[l as usize].as_f64().max(PROB_FLOOR).ln());
        for (g, &p) in dpx.iter_mut().zip(px) {
            *g = p / n;
        }
        dpx[l as usize] -= T::one() / n;
    }
    Ok(LossReport {
        loss: sum.value() / valid as f64,
        total: sum,
        d_logits: d,
        valid,
        classes: c,
    })
}
