//! Merging the per-level class-score maps into one map.
//!
//! Attention mode scores every level at every position with a small two-layer
//! convolutional model over the concatenated level maps, softmax-normalises
//! the scores across levels and takes the weighted sum. Average and max
//! pooling across levels are the two baselines.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::params::{push_kernels, push_kernels_mut, push_vec, push_vec_mut, ParamMut, ParamRef, ParamSet};
use crate::tensor::{
    conv2d_backward, conv2d_cached, relu, relu_backward, softmax_in_place, ConvCache, ConvKernels,
    FeatureMap, Scalar,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    #[serde(alias = "att")]
    Attention,
    #[serde(alias = "avg")]
    Average,
    Max,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Average, FusionMode::Max, FusionMode::Attention];

    pub fn short_name(self) -> &'static str {
        match self {
            FusionMode::Attention => "att",
            FusionMode::Average => "avg",
            FusionMode::Max => "max",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" | "att" => Ok(FusionMode::Attention),
            "average" | "avg" => Ok(FusionMode::Average),
            "max" => Ok(FusionMode::Max),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

/// Two-layer attention model: 3×3 conv to `filters` channels, ReLU, 1×1 conv to `Q` scores.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub conv1: ConvKernels<T>,
    pub b1: Vec<T>,
    pub conv2: ConvKernels<T>,
    pub b2: Vec<T>,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn zeros(levels: usize, classes: usize, filters: usize) -> Self {
        AttentionParams {
            conv1: ConvKernels::zeros(3, 3, levels * classes, filters),
            b1: vec![T::zero(); filters],
            conv2: ConvKernels::zeros(1, 1, filters, levels),
            b2: vec![T::zero(); levels],
        }
    }

    pub fn levels(&self) -> usize {
        self.conv2.cout()
    }
}

impl<T: Scalar> ParamSet<T> for AttentionParams<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        push_kernels(out, prefix, "conv1", &self.conv1);
        push_vec(out, prefix, "b1", &self.b1);
        push_kernels(out, prefix, "conv2", &self.conv2);
        push_vec(out, prefix, "b2", &self.b2);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        push_kernels_mut(out, prefix, "conv1", &mut self.conv1);
        push_vec_mut(out, prefix, "b1", &mut self.b1);
        push_kernels_mut(out, prefix, "conv2", &mut self.conv2);
        push_vec_mut(out, prefix, "b2", &mut self.b2);
    }
}

#[derive(Clone, Debug)]
pub struct FusionOutput<T> {
    pub fused: FeatureMap<T>,
    /// Per-position level weights `H × W × Q` (attention and average modes).
    pub weights: Option<FeatureMap<T>>,
    /// Raw attention scores before the softmax (attention mode).
    pub scores: Option<FeatureMap<T>>,
    pub mode: FusionMode,
}

fn check_levels<T: Scalar>(levels: &[FeatureMap<T>]) -> Result<(usize, usize, usize)> {
    let first = levels.first().ok_or_else(|| dim_err!("fusion needs at least one level"))?;
    let dims = first.dims();
    for (q, l) in levels.iter().enumerate() {
        if l.dims() != dims {
            return Err(dim_err!(
                "fusion: level {q} is {:?}, level 0 is {:?}",
                l.dims(),
                dims
            ));
        }
    }
    Ok(dims)
}

/// `z(i, c) = Σ_q ω(i, q) f_q(i, c)`.
pub fn fuse_with_weights<T: Scalar>(
    levels: &[FeatureMap<T>],
    weights: &FeatureMap<T>,
) -> Result<FeatureMap<T>> {
    let (h, w, c) = check_levels(levels)?;
    weights.ensure_dims((h, w, levels.len()), "fusion weights")?;
    let mut z = FeatureMap::zeros(h, w, c);
    for r in 0..h {
        for col in 0..w {
            let om = weights.pixel(r, col);
            let out = z.pixel_mut(r, col);
            for (q, l) in levels.iter().enumerate() {
                crate::tensor::axpy(om[q], l.pixel(r, col), out);
            }
        }
    }
    Ok(z)
}

/// Intermediate values of [`fuse_attention`], consumed by the backward pass.
#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    levels: Vec<FeatureMap<T>>,
    weights: FeatureMap<T>,
    conv1: ConvCache<T>,
    hidden_pre: FeatureMap<T>,
    conv2: ConvCache<T>,
}

pub fn fuse_attention<T: Scalar>(
    levels: &[FeatureMap<T>],
    params: &AttentionParams<T>,
) -> Result<(FusionOutput<T>, AttentionCache<T>)> {
    let (h, w, c) = check_levels(levels)?;
    let q = levels.len();
    if params.levels() != q || params.conv1.cin() != q * c {
        return Err(dim_err!(
            "attention model built for {} levels / {} inputs, got {q} levels of {c} classes",
            params.levels(),
            params.conv1.cin()
        ));
    }
    let concat = FeatureMap::concat_channels(levels)?;
    let (hidden_pre, conv1) = conv2d_cached(&concat, &params.conv1, &params.b1, 1)?;
    let hidden = relu(&hidden_pre);
    let (scores, conv2) = conv2d_cached(&hidden, &params.conv2, &params.b2, 0)?;
    let mut weights = scores.clone();
    for px in weights.data_mut().chunks_exact_mut(q) {
        softmax_in_place(px);
    }
    let fused = fuse_with_weights(levels, &weights)?;
    debug_assert_eq!(fused.dims(), (h, w, c));
    Ok((
        FusionOutput {
            fused,
            weights: Some(weights.clone()),
            scores: Some(scores),
            mode: FusionMode::Attention,
        },
        AttentionCache {
            levels: levels.to_vec(),
            weights,
            conv1,
            hidden_pre,
            conv2,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct AttentionBackward<T> {
    pub d_levels: Vec<FeatureMap<T>>,
    pub grads: AttentionParams<T>,
}

pub fn fuse_attention_backward<T: Scalar>(
    cache: AttentionCache<T>,
    params: &AttentionParams<T>,
    d_z: &FeatureMap<T>,
) -> Result<AttentionBackward<T>> {
    let q = cache.levels.len();
    let (h, w, c) = cache.levels[0].dims();
    if d_z.dims() != (h, w, c) {
        return Err(Error::State(format!(
            "fuse_attention_backward: d_z {:?} does not match fused map {:?}",
            d_z.dims(),
            (h, w, c)
        )));
    }
    if params.levels() != q {
        return Err(Error::State(
            "fuse_attention_backward: attention parameters differ from forward".into(),
        ));
    }
    // direct path and d_omega
    let mut d_levels: Vec<FeatureMap<T>> = (0..q).map(|_| FeatureMap::zeros(h, w, c)).collect();
    let mut d_scores = FeatureMap::zeros(h, w, q);
    for r in 0..h {
        for col in 0..w {
            let g = d_z.pixel(r, col);
            let om = cache.weights.pixel(r, col);
            let mut d_om = vec![T::zero(); q];
            for (lq, level) in cache.levels.iter().enumerate() {
                d_om[lq] = crate::tensor::dot(g, level.pixel(r, col));
                crate::tensor::axpy(om[lq], g, d_levels[lq].pixel_mut(r, col));
            }
            let mean: T = om.iter().zip(&d_om).map(|(&a, &b)| a * b).sum();
            for (ds, (&o, &d)) in d_scores.pixel_mut(r, col).iter_mut().zip(om.iter().zip(&d_om)) {
                *ds = o * (d - mean);
            }
        }
    }
    let g2 = conv2d_backward(&cache.conv2, &params.conv2, &d_scores)?;
    let d_pre = relu_backward(&cache.hidden_pre, &g2.d_input)?;
    let g1 = conv2d_backward(&cache.conv1, &params.conv1, &d_pre)?;
    for (dl, part) in d_levels.iter_mut().zip(g1.d_input.split_channels(q)?) {
        dl.add_assign(&part)?;
    }
    Ok(AttentionBackward {
        d_levels,
        grads: AttentionParams {
            conv1: g1.d_kernels,
            b1: g1.d_bias,
            conv2: g2.d_kernels,
            b2: g2.d_bias,
        },
    })
}

/// Routing record of the pooling baselines.
#[derive(Clone, Debug)]
pub enum BaselineRecord {
    Average {
        levels: usize,
        dims: (usize, usize, usize),
    },
    Max {
        levels: usize,
        dims: (usize, usize, usize),
        /// Winning level per element of the fused map.
        argmax: Vec<usize>,
    },
}

pub fn fuse_average<T: Scalar>(levels: &[FeatureMap<T>]) -> Result<(FusionOutput<T>, BaselineRecord)> {
    let (h, w, c) = check_levels(levels)?;
    let q = levels.len();
    let weights = FeatureMap::filled(h, w, q, T::one() / T::lit(q as f64));
    let fused = fuse_with_weights(levels, &weights)?;
    Ok((
        FusionOutput {
            fused,
            weights: Some(weights),
            scores: None,
            mode: FusionMode::Average,
        },
        BaselineRecord::Average {
            levels: q,
            dims: (h, w, c),
        },
    ))
}

/// Elementwise max across levels; ties go to the lowest level index.
pub fn fuse_max<T: Scalar>(levels: &[FeatureMap<T>]) -> Result<(FusionOutput<T>, BaselineRecord)> {
    let (h, w, c) = check_levels(levels)?;
    let mut fused = levels[0].clone();
    let mut argmax = vec![0usize; h * w * c];
    for (q, l) in levels.iter().enumerate().skip(1) {
        for ((z, a), &v) in fused.data_mut().iter_mut().zip(argmax.iter_mut()).zip(l.data()) {
            if v > *z {
                *z = v;
                *a = q;
            }
        }
    }
    Ok((
        FusionOutput {
            fused,
            weights: None,
            scores: None,
            mode: FusionMode::Max,
        },
        BaselineRecord::Max {
            levels: levels.len(),
            dims: (h, w, c),
            argmax,
        },
    ))
}

pub fn fuse_baseline_backward<T: Scalar>(
    record: &BaselineRecord,
    d_z: &FeatureMap<T>,
) -> Result<Vec<FeatureMap<T>>> {
    let (levels, dims) = match record {
        BaselineRecord::Average { levels, dims } | BaselineRecord::Max { levels, dims, .. } => {
            (*levels, *dims)
        }
    };
    if d_z.dims() != dims {
        return Err(Error::State(format!(
            "fuse_baseline_backward: d_z {:?} does not match record {:?}",
            d_z.dims(),
            dims
        )));
    }
    let (h, w, c) = dims;
    match record {
        BaselineRecord::Average { .. } => {
            let s = T::one() / T::lit(levels as f64);
            Ok((0..levels).map(|_| d_z.map(|g| g * s)).collect())
        }
        BaselineRecord::Max { argmax, .. } => {
            let mut out: Vec<FeatureMap<T>> = (0..levels).map(|_| FeatureMap::zeros(h, w, c)).collect();
            for (i, (&q, &g)) in argmax.iter().zip(d_z.data()).enumerate() {
                out[q].data_mut()[i] = g;
            }
            Ok(out)
        }
    }
}
