//! Prediction, evaluation and image export.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{FeatureMap, Scalar};
use crate::training::model::{argmax_labels, forward, ModelParams, Prepared, IGNORE_LABEL};
use crate::training::train::PlanCache;

use super::dataset::{write_gray, write_rgb};
use super::metrics::{Confusion, MetricsReport};

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub id: String,
    pub labels: Vec<u8>,
    pub probs: FeatureMap<T>,
    /// Per-level fusion weights `H × W × Q`, when the fusion mode has them.
    pub weights: Option<FeatureMap<T>>,
}

impl<T: Scalar> Prediction<T> {
    pub fn height(&self) -> usize {
        self.probs.height()
    }

    pub fn width(&self) -> usize {
        self.probs.width()
    }
}

pub fn predict_one<T: Scalar>(params: &ModelParams<T>, sample: &Prepared<T>, plans: &PlanCache) -> Result<Prediction<T>> {
    let (h, w) = (sample.image.height(), sample.image.width());
    let f = forward(params, &sample.image, &sample.topic, plans.get(h, w)?)?;
    Ok(Prediction {
        id: sample.id.clone(),
        labels: argmax_labels(&f.probs),
        probs: f.probs,
        weights: f.fusion.weights,
    })
}

/// Predictions for every sample, in input order.
pub fn predict<T: Scalar>(params: &ModelParams<T>, samples: &[Prepared<T>]) -> Result<Vec<Prediction<T>>> {
    let plans = PlanCache::for_samples(params, samples)?;
    par::map_slice(samples, |s| predict_one(params, s, &plans))
        .into_iter()
        .collect()
}

/// Metrics of `params` on labelled samples, plus the predictions made.
pub fn evaluate<T: Scalar>(params: &ModelParams<T>, samples: &[Prepared<T>]) -> Result<(MetricsReport, Vec<Prediction<T>>)> {
    if samples.is_empty() {
        return Err(Error::Degenerate("evaluation set is empty".into()));
    }
    let preds = predict(params, samples)?;
    let mut confusion = Confusion::new(params.arch.classes);
    for (s, p) in samples.iter().zip(&preds) {
        confusion.add(&s.labels, &p.labels)?;
    }
    Ok((confusion.report(), preds))
}

/// Accuracy over pixels whose ground truth is neither background (0) nor
/// ignored. `None` when there are no such pixels.
pub fn region_accuracy<'a>(pairs: impl IntoIterator<Item = (&'a [u8], &'a [u8])>) -> Option<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (truth, pred) in pairs {
        for (&t, &p) in truth.iter().zip(pred) {
            if t != 0 && t != IGNORE_LABEL {
                total += 1;
                hit += usize::from(t == p);
            }
        }
    }
    (total > 0).then(|| hit as f64 / total as f64)
}

/// RGB bytes for a label map. Ignored pixels are white.
pub fn colorize(labels: &[u8], palette: &[[u8; 3]]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(labels.len() * 3);
    for &l in labels {
        let rgb = if l == IGNORE_LABEL {
            [255, 255, 255]
        } else {
            *palette
                .get(l as usize)
                .ok_or_else(|| Error::Dimension(format!("label {l} has no palette colour")))?
        };
        out.extend_from_slice(&rgb);
    }
    Ok(out)
}

/// Inverse of [`colorize`] for palettes whose colours are distinct and not white.
pub fn decolorize(rgb: &[u8], palette: &[[u8; 3]]) -> Result<Vec<u8>> {
    rgb.chunks_exact(3)
        .enumerate()
        .map(|(i, px)| {
            if px == [255, 255, 255] {
                return Ok(IGNORE_LABEL);
            }
            palette
                .iter()
                .position(|c| c == px)
                .map(|k| k as u8)
                .ok_or_else(|| Error::Format(format!("pixel {i} colour {px:?} is not in the palette")))
        })
        .collect()
}

/// Weights in `[0, 1]` quantized to 8-bit grey, one map per level.
pub fn weight_maps<T: Scalar>(weights: &FeatureMap<T>) -> Vec<Vec<u8>> {
    let q = weights.channels();
    (0..q)
        .map(|k| {
            weights
                .data()
                .chunks_exact(q)
                .map(|px| (px[k].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect()
        })
        .collect()
}

/// Files written by [`export_prediction`].
#[derive(Clone, Debug, Default)]
pub struct Exported {
    pub labels: PathBuf,
    pub color: Option<PathBuf>,
    pub weights: Vec<PathBuf>,
}

/// Writes `{id}_labels.png` (class indices) and, on request, a
/// palette-coloured `{id}_color.png` and `{id}_omega{q}.png` weight maps.
pub fn export_prediction<T: Scalar>(
    dir: &Path,
    pred: &Prediction<T>,
    palette: Option<&[[u8; 3]]>,
    weights: bool,
) -> Result<Exported> {
    let (h, w) = (pred.height(), pred.width());
    let mut out = Exported {
        labels: dir.join(format!("{}_labels.png", pred.id)),
        ..Exported::default()
    };
    write_gray(&out.labels, h, w, pred.labels.clone())?;
    if let Some(palette) = palette {
        let path = dir.join(format!("{}_color.png", pred.id));
        write_rgb(&path, h, w, colorize(&pred.labels, palette)?)?;
        out.color = Some(path);
    }
    if weights {
        if let Some(om) = &pred.weights {
            for (q, map) in weight_maps(om).into_iter().enumerate() {
                let path = dir.join(format!("{}_omega{}.png", pred.id, q + 1));
                write_gray(&path, h, w, map)?;
                out.weights.push(path);
            }
        }
    }
    Ok(out)
}
