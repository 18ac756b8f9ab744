//! Small convolutional feature extractor with several tap points.
//!
//! Each stage is a 3×3 convolution, ReLU and (optionally) a 2×2 max pool.
//! The outputs of the tapped stages feed one recurrent layer each, from
//! fine/spatial to coarse/semantic.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::params::{join, push_kernels, push_kernels_mut, push_vec, push_vec_mut, ParamMut, ParamRef, ParamSet};
use crate::tensor::{
    conv2d_backward, conv2d_cached, maxpool2d, maxpool2d_backward, relu, relu_backward, ConvCache,
    ConvKernels, FeatureMap, PoolIndices, Scalar,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub filters: usize,
    #[serde(default = "default_pool")]
    pub pool: bool,
}

fn default_pool() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub stages: Vec<StageConfig>,
    /// 1-based stage numbers whose outputs are tapped, strictly increasing.
    pub taps: Vec<usize>,
}

impl Default for BackboneConfig {
    /// Three pooled stages of 8/16/32 filters tapped at strides 2, 4 and 8.
    fn default() -> Self {
        BackboneConfig {
            stages: [8, 16, 32]
                .into_iter()
                .map(|filters| StageConfig { filters, pool: true })
                .collect(),
            taps: vec![1, 2, 3],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.taps.is_empty() {
            return Err(Error::Config("backbone needs at least one tap".into()));
        }
        if self.taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "backbone taps must be strictly increasing, got {:?}",
                self.taps
            )));
        }
        if self.taps[0] == 0 || *self.taps.last().unwrap() > self.stages.len() {
            return Err(Error::Config(format!(
                "backbone taps {:?} out of range for {} stages",
                self.taps,
                self.stages.len()
            )));
        }
        if self.stages.iter().any(|s| s.filters == 0) {
            return Err(Error::Config("backbone stage with zero filters".into()));
        }
        Ok(())
    }

    /// Stages actually evaluated (up to the last tap).
    pub fn active_stages(&self) -> usize {
        self.taps.last().copied().unwrap_or(0)
    }

    /// Spatial downsampling factor after stage `stage` (1-based).
    pub fn stride_after(&self, stage: usize) -> usize {
        1 << self.stages[..stage].iter().filter(|s| s.pool).count()
    }

    /// Required divisor of the image dimensions.
    pub fn required_divisor(&self) -> usize {
        self.stride_after(self.active_stages())
    }

    /// Channel count of each tapped map.
    pub fn tap_channels(&self) -> Vec<usize> {
        self.taps.iter().map(|&t| self.stages[t - 1].filters).collect()
    }

    /// Spatial size of each tapped map for an image of `h × w`.
    pub fn tap_dims(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        self.taps
            .iter()
            .map(|&t| {
                let s = self.stride_after(t);
                (h / s, w / s)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageParams<T> {
    pub kernels: ConvKernels<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<T> {
    pub stages: Vec<StageParams<T>>,
}

impl<T: Scalar> BackboneParams<T> {
    pub fn zeros(config: &BackboneConfig, image_channels: usize) -> Self {
        let mut cin = image_channels;
        let stages = config
            .stages
            .iter()
            .take(config.active_stages())
            .map(|s| {
                let p = StageParams {
                    kernels: ConvKernels::zeros(3, 3, cin, s.filters),
                    bias: vec![T::zero(); s.filters],
                };
                cin = s.filters;
                p
            })
            .collect();
        BackboneParams { stages }
    }
}

impl<T: Scalar> ParamSet<T> for BackboneParams<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        for (i, s) in self.stages.iter().enumerate() {
            let p = join(prefix, &format!("stage{}", i + 1));
            push_kernels(out, &p, "kernels", &s.kernels);
            push_vec(out, &p, "bias", &s.bias);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            let p = join(prefix, &format!("stage{}", i + 1));
            push_kernels_mut(out, &p, "kernels", &mut s.kernels);
            push_vec_mut(out, &p, "bias", &mut s.bias);
        }
    }
}

#[derive(Clone, Debug)]
struct StageCache<T> {
    conv: ConvCache<T>,
    pre: FeatureMap<T>,
    pool: Option<PoolIndices>,
}

/// Forward state for [`backbone_backward`].
#[derive(Clone, Debug)]
pub struct BackboneCache<T> {
    taps: Vec<usize>,
    stages: Vec<StageCache<T>>,
}

pub fn backbone_forward<T: Scalar>(
    image: &FeatureMap<T>,
    config: &BackboneConfig,
    params: &BackboneParams<T>,
) -> Result<(Vec<FeatureMap<T>>, BackboneCache<T>)> {
    config.validate()?;
    let div = config.required_divisor();
    let (h, w) = (image.height(), image.width());
    if h % div != 0 || w % div != 0 {
        let ph = h.div_ceil(div) * div;
        let pw = w.div_ceil(div) * div;
        return Err(dim_err!(
            "image {h}x{w} is not divisible by {div}; pad it to {ph}x{pw}"
        ));
    }
    for (q, (th, tw)) in config.tap_dims(h, w).into_iter().enumerate() {
        if th < 3 || tw < 3 {
            return Err(dim_err!(
                "tap {} would be {th}x{tw}; every tapped map must be at least 3x3",
                q + 1
            ));
        }
    }
    let active = config.active_stages();
    if params.stages.len() != active {
        return Err(dim_err!(
            "backbone has {} parameter stages, config needs {active}",
            params.stages.len()
        ));
    }
    let mut x = image.clone();
    let mut taps = Vec::with_capacity(config.taps.len());
    let mut stages = Vec::with_capacity(active);
    for (i, (sc, sp)) in config.stages.iter().zip(&params.stages).enumerate() {
        let (pre, conv) = conv2d_cached(&x, &sp.kernels, &sp.bias, 1)?;
        let act = relu(&pre);
        let (out, pool) = if sc.pool {
            let (o, idx) = maxpool2d(&act)?;
            (o, Some(idx))
        } else {
            (act, None)
        };
        stages.push(StageCache { conv, pre, pool });
        if config.taps.contains(&(i + 1)) {
            taps.push(out.clone());
        }
        x = out;
    }
    Ok((
        taps,
        BackboneCache {
            taps: config.taps.clone(),
            stages,
        },
    ))
}

/// Reverse-mode pass; gradients arriving at several taps are summed into the
/// shared earlier stages.
pub fn backbone_backward<T: Scalar>(
    cache: BackboneCache<T>,
    params: &BackboneParams<T>,
    d_taps: &[FeatureMap<T>],
) -> Result<(BackboneParams<T>, FeatureMap<T>)> {
    if d_taps.len() != cache.taps.len() || params.stages.len() != cache.stages.len() {
        return Err(Error::State(format!(
            "backbone_backward: {} tap gradients / {} stages for a cache of {} taps / {} stages",
            d_taps.len(),
            params.stages.len(),
            cache.taps.len(),
            cache.stages.len()
        )));
    }
    let mut grads: Vec<StageParams<T>> = Vec::with_capacity(cache.stages.len());
    let mut d: Option<FeatureMap<T>> = None;
    for (i, st) in cache.stages.iter().enumerate().rev() {
        if let Some(q) = cache.taps.iter().position(|&t| t == i + 1) {
            d = Some(match d {
                Some(mut acc) => {
                    acc.add_assign(&d_taps[q])
                        .map_err(|e| Error::State(e.to_string()))?;
                    acc
                }
                None => d_taps[q].clone(),
            });
        }
        let d_out = d.take().expect("last stage is always tapped");
        let d_act = match &st.pool {
            Some(idx) => maxpool2d_backward(idx, &d_out)?,
            None => d_out,
        };
        let d_pre = relu_backward(&st.pre, &d_act)?;
        let g = conv2d_backward(&st.conv, &params.stages[i].kernels, &d_pre)?;
        grads.push(StageParams {
            kernels: g.d_kernels,
            bias: g.d_bias,
        });
        d = Some(g.d_input);
    }
    grads.reverse();
    Ok((
        BackboneParams { stages: grads },
        d.expect("at least one stage"),
    ))
}
