//! Context vectors injected into the recurrence: the 3×3 block-max global
//! feature of a level's input map, and a holistic topic descriptor of the
//! raw image.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{FeatureMap, Scalar};

/// Boundaries of `parts` near-equal pieces of `0..n` (rounded cumulative fractions).
pub fn partition(n: usize, parts: usize) -> Vec<usize> {
    (0..=parts).map(|k| (2 * k * n + parts) / (2 * parts)).collect()
}

/// Half-open rectangle `[row0, row1) × [col0, col1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
}

/// Concatenated per-block channel maxima, `g_1 … g_9` in row-major block order.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalFeature<T> {
    pub values: Vec<T>,
    pub blocks: [Block; 9],
}

/// Where each entry of the global feature came from.
#[derive(Clone, Debug)]
pub struct GlobalArgmax {
    map_dims: (usize, usize, usize),
    argmax: Vec<usize>,
}

impl GlobalArgmax {
    pub fn map_dims(&self) -> (usize, usize, usize) {
        self.map_dims
    }
}

pub fn global_blocks(height: usize, width: usize) -> [Block; 9] {
    let rows = partition(height, 3);
    let cols = partition(width, 3);
    std::array::from_fn(|b| Block {
        row0: rows[b / 3],
        row1: rows[b / 3 + 1],
        col0: cols[b % 3],
        col1: cols[b % 3 + 1],
    })
}

/// Max-pool each of the 3×3 blocks of `map` per channel.
pub fn global_feature<T: Scalar>(map: &FeatureMap<T>) -> Result<(GlobalFeature<T>, GlobalArgmax)> {
    let (h, w, d) = map.dims();
    if h < 3 || w < 3 {
        return Err(dim_err!("global_feature needs at least 3x3, got {h}x{w}"));
    }
    let blocks = global_blocks(h, w);
    let mut values = vec![T::neg_infinity(); 9 * d];
    let mut argmax = vec![0usize; 9 * d];
    for (b, blk) in blocks.iter().enumerate() {
        let (vals, idx) = (&mut values[b * d..(b + 1) * d], &mut argmax[b * d..(b + 1) * d]);
        for r in blk.row0..blk.row1 {
            for c in blk.col0..blk.col1 {
                for (k, &v) in map.pixel(r, c).iter().enumerate() {
                    if v > vals[k] {
                        vals[k] = v;
                        idx[k] = map.index(r, c, k);
                    }
                }
            }
        }
    }
    Ok((
        GlobalFeature { values, blocks },
        GlobalArgmax {
            map_dims: (h, w, d),
            argmax,
        },
    ))
}

/// Route `d_g` back to the cells that won each block max.
pub fn global_feature_backward<T: Scalar>(record: &GlobalArgmax, d_g: &[T]) -> Result<FeatureMap<T>> {
    let (h, w, d) = record.map_dims;
    if d_g.len() != 9 * d || record.argmax.len() != 9 * d {
        return Err(Error::State(format!(
            "global_feature_backward: gradient of length {} for a record of {} entries",
            d_g.len(),
            record.argmax.len()
        )));
    }
    let mut out = FeatureMap::zeros(h, w, d);
    for (&i, &g) in record.argmax.iter().zip(d_g) {
        out.data_mut()[i] += g;
    }
    Ok(out)
}

/// Oriented band-pass bank and pooling grid of the topic descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopicConfig {
    pub scales: usize,
    pub orientations: usize,
    /// Pooling grid side; the descriptor has `grid²` cells per filter.
    pub grid: usize,
    /// Gaussian width of the finest scale, doubled per scale.
    pub base_sigma: f64,
}

impl Default for TopicConfig {
    fn default() -> Self {
        TopicConfig {
            scales: 2,
            orientations: 4,
            grid: 4,
            base_sigma: 1.0,
        }
    }
}

impl TopicConfig {
    pub fn len(&self) -> usize {
        self.scales * self.orientations * self.grid * self.grid
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Odd-symmetric derivative-of-Gaussian kernels, `(radius, taps)` per
    /// scale and orientation, scale-major. `taps[(dy + r) * (2r + 1) + dx + r]`.
    pub fn filter_bank(&self) -> Vec<(usize, Vec<f64>)> {
        let mut bank = Vec::with_capacity(self.scales * self.orientations);
        for s in 0..self.scales {
            let sigma = self.base_sigma * (1u64 << s) as f64;
            let radius = (3.0 * sigma).ceil() as usize;
            let side = 2 * radius + 1;
            for o in 0..self.orientations {
                let theta = PI * o as f64 / self.orientations as f64;
                let (sn, cs) = theta.sin_cos();
                let mut taps = vec![0.0; side * side];
                for dy in 0..side {
                    for dx in 0..side {
                        let y = dy as f64 - radius as f64;
                        let x = dx as f64 - radius as f64;
                        let u = x * cs + y * sn;
                        taps[dy * side + dx] =
                            -u / (sigma * sigma) * (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
                    }
                }
                let positive: f64 = taps.iter().filter(|&&v| v > 0.0).sum();
                for t in taps.iter_mut() {
                    *t /= positive;
                }
                bank.push((radius, taps));
            }
        }
        bank
    }
}

/// Holistic image descriptor; a constant input for training.
#[derive(Clone, Debug, PartialEq)]
pub struct TopicFeature<T> {
    pub values: Vec<T>,
}

/// Grey conversion with 0.299/0.587/0.114 luma weights.
pub fn luma<T: Scalar>(image: &FeatureMap<T>) -> Result<Vec<f64>> {
    match image.channels() {
        1 => Ok(image.data().iter().map(|v| v.as_f64()).collect()),
        3 => Ok(image
            .data()
            .chunks_exact(3)
            .map(|p| 0.299 * p[0].as_f64() + 0.587 * p[1].as_f64() + 0.114 * p[2].as_f64())
            .collect()),
        c => Err(dim_err!("topic_feature: images must have 1 or 3 channels, got {c}")),
    }
}

/// Filter-energy descriptor: grey, zero-mean, oriented band-pass responses,
/// squared and averaged over a `grid × grid` partition.
///
/// Each kernel is odd-symmetric, so a response is a sum of `k · (I(p) − I(−p))`
/// pairs with edge replication; constant images give exactly zero.
pub fn topic_feature<T: Scalar>(image: &FeatureMap<T>, config: &TopicConfig) -> Result<TopicFeature<T>> {
    let grey = luma(image)?;
    let (h, w) = (image.height(), image.width());
    if config.grid == 0 || config.grid > h || config.grid > w {
        return Err(dim_err!(
            "topic_feature: grid {} does not fit a {h}x{w} image",
            config.grid
        ));
    }
    let mean = grey.iter().sum::<f64>() / grey.len() as f64;
    let centred: Vec<f64> = grey.iter().map(|v| v - mean).collect();
    let at = |r: isize, c: isize| {
        let r = r.clamp(0, h as isize - 1) as usize;
        let c = c.clamp(0, w as isize - 1) as usize;
        centred[r * w + c]
    };
    let rows = partition(h, config.grid);
    let cols = partition(w, config.grid);
    let mut values = Vec::with_capacity(config.len());
    for (radius, taps) in config.filter_bank() {
        let side = 2 * radius + 1;
        let half = taps.len() / 2;
        let mut energy = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                // pair tap i with its point reflection taps.len() - 1 - i
                for (i, &k) in taps.iter().enumerate().take(half) {
                    let dy = (i / side) as isize - radius as isize;
                    let dx = (i % side) as isize - radius as isize;
                    let (r, c) = (r as isize, c as isize);
                    acc += k * (at(r + dy, c + dx) - at(r - dy, c - dx));
                }
                energy[r * w + c] = acc * acc;
            }
        }
        for gr in 0..config.grid {
            for gc in 0..config.grid {
                let mut s = 0.0;
                for r in rows[gr]..rows[gr + 1] {
                    for c in cols[gc]..cols[gc + 1] {
                        s += energy[r * w + c];
                    }
                }
                let n = (rows[gr + 1] - rows[gr]) * (cols[gc + 1] - cols[gc]);
                values.push(T::lit(s / n as f64));
            }
        }
    }
    Ok(TopicFeature { values })
}

/// Read a topic vector: UTF-8, one decimal scalar per line, no header.
pub fn load_topic_feature<T: Scalar>(path: &Path, expected_len: usize) -> Result<TopicFeature<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let v: f64 = line.trim().parse().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: format!("`{line}`: {e}"),
        })?;
        values.push(T::lit(v));
    }
    if values.len() != expected_len {
        return Err(Error::Format(format!(
            "{}: topic vector has {} entries, expected {expected_len}",
            path.display(),
            values.len()
        )));
    }
    Ok(TopicFeature { values })
}

pub fn save_topic_feature<T: Scalar>(path: &Path, topic: &TopicFeature<T>) -> Result<()> {
    let mut s = String::new();
    for v in &topic.values {
        writeln!(s, "{}", v.as_f64()).expect("string write");
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
