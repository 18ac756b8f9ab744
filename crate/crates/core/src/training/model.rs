//! End-to-end model: backbone, one contextual recurrent layer per tap,
//! upsampling, fusion and softmax.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{backbone_backward, backbone_forward, BackboneCache, BackboneParams};
use crate::context::{global_feature, global_feature_backward, topic_feature, GlobalArgmax};
use crate::crnn::{crnn_backward, crnn_forward, CrnnCache, CrnnDims, CrnnParams};
use crate::error::{dim_err, Error, Result};
use crate::fusion::{
    fuse_attention, fuse_attention_backward, fuse_average, fuse_baseline_backward, fuse_max,
    AttentionCache, AttentionParams, BaselineRecord, FusionMode, FusionOutput,
};
use crate::graph::{build_dag_plans, DagPlan};
use crate::par;
use crate::params::{join, ParamMut, ParamRef, ParamSet};
use crate::tensor::{bilinear_upsample, bilinear_upsample_backward, softmax_channels, FeatureMap, Scalar};

use super::config::ModelConfig;

/// Label value excluded from the loss and from every metric.
pub const IGNORE_LABEL: u8 = 255;

/// Everything needed to rebuild a parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub classes: usize,
    pub image_channels: usize,
    pub model: ModelConfig,
}

impl Architecture {
    pub fn new(classes: usize, image_channels: usize, model: ModelConfig) -> Result<Self> {
        let a = Architecture {
            classes,
            image_channels,
            model,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(2..=255).contains(&self.classes) {
            return Err(Error::Config(format!(
                "class count {} outside 2..=255",
                self.classes
            )));
        }
        if self.image_channels != 1 && self.image_channels != 3 {
            return Err(Error::Config(format!(
                "images must have 1 or 3 channels, got {}",
                self.image_channels
            )));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.model.backbone.taps.len()
    }

    pub fn crnn_dims(&self) -> Vec<CrnnDims> {
        let topic = self.model.topic.len();
        self.model
            .backbone
            .tap_channels()
            .into_iter()
            .zip(self.model.hidden_dims())
            .map(|(c, h)| CrnnDims::new(c, self.classes, topic).with_hidden(h))
            .collect()
    }
}

/// All trainable tensors of the model. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub arch: Architecture,
    pub backbone: BackboneParams<T>,
    pub levels: Vec<CrnnParams<T>>,
    /// Present only in attention mode.
    pub attention: Option<AttentionParams<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let levels = arch.crnn_dims().into_iter().map(CrnnParams::zeros).collect();
        let attention = (arch.model.fusion == FusionMode::Attention).then(|| {
            AttentionParams::zeros(arch.levels(), arch.classes, arch.model.attention_filters)
        });
        Ok(ModelParams {
            arch: arch.clone(),
            backbone: BackboneParams::zeros(&arch.model.backbone, arch.image_channels),
            levels,
            attention,
        })
    }

    /// Zero the recurrent, global and topic matrices of every level.
    pub fn zero_context_paths(&mut self) {
        for l in &mut self.levels {
            l.zero_context_paths();
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(&self.arch).expect("validated architecture");
        for (d, s) in out.params_mut().into_iter().zip(self.params()) {
            for (a, &b) in d.data.iter_mut().zip(s.data) {
                *a = U::lit(b.as_f64());
            }
        }
        out
    }
}

impl<T: Scalar> ParamSet<T> for ModelParams<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.backbone.visit(&join(prefix, "backbone"), out);
        for (q, l) in self.levels.iter().enumerate() {
            l.visit(&join(prefix, &format!("level{}", q + 1)), out);
        }
        if let Some(a) = &self.attention {
            a.visit(&join(prefix, "attention"), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.backbone.visit_mut(&join(prefix, "backbone"), out);
        for (q, l) in self.levels.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("level{}", q + 1)), out);
        }
        if let Some(a) = &mut self.attention {
            a.visit_mut(&join(prefix, "attention"), out);
        }
    }
}

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Glorot-uniform bound of a named tensor; `None` for bias vectors.
///
/// Matrices and kernels use their own fan-in and fan-out, except inside a
/// recurrent layer: `U`, every `W`, `G` and `T` feed one hidden
/// pre-activation, so their fan-in is the width of that whole concatenated
/// input, and the readouts `V` of the four DAGs are summed into one score.
pub fn init_bound(arch: &Architecture, name: &str, shape: &[usize]) -> Option<f64> {
    if shape.len() < 2 {
        return None;
    }
    if let Some(rest) = name.strip_prefix("level") {
        let q: usize = rest.split('.').next()?.parse().ok()?;
        let d = *arch.crnn_dims().get(q.checked_sub(1)?)?;
        let leaf = name.rsplit('.').next()?;
        let (fi, fo) = if leaf == "v" {
            (4 * d.hidden_dim, d.classes)
        } else {
            (d.input_dim + 3 * d.hidden_dim + d.global_dim + d.topic_dim, d.hidden_dim)
        };
        return Some(glorot(fi, fo));
    }
    match *shape {
        [rows, cols] => Some(glorot(cols, rows)),
        [kh, kw, cin, cout] => Some(glorot(kh * kw * cin, kh * kw * cout)),
        _ => None,
    }
}

/// Glorot-uniform weights, zero biases, from a seeded ChaCha stream.
pub fn init_params<T: Scalar>(arch: &Architecture, seed: u64) -> Result<ModelParams<T>> {
    let mut params = ModelParams::zeros(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in params.params_mut() {
        if let Some(bound) = init_bound(arch, &p.name, &p.shape) {
            let dist = Uniform::new_inclusive(-bound, bound);
            for v in p.data.iter_mut() {
                *v = T::lit(dist.sample(&mut rng));
            }
        }
    }
    if arch.model.ablate_context {
        params.zero_context_paths();
    }
    Ok(params)
}

/// DAG plans for every level at one image size.
#[derive(Clone, Debug)]
pub struct LevelPlans {
    pub height: usize,
    pub width: usize,
    pub plans: Vec<[DagPlan; 4]>,
}

impl LevelPlans {
    pub fn build(arch: &Architecture, height: usize, width: usize) -> Result<Self> {
        let plans = arch
            .model
            .backbone
            .tap_dims(height, width)
            .into_iter()
            .map(|(h, w)| build_dag_plans(h, w))
            .collect::<Result<_>>()?;
        Ok(LevelPlans {
            height,
            width,
            plans,
        })
    }
}

/// An image with its labels and precomputed topic descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared<T> {
    pub id: String,
    pub image: FeatureMap<T>,
    /// Row-major `height × width`.
    pub labels: Vec<u8>,
    pub topic: Vec<T>,
}

impl<T: Scalar> Prepared<T> {
    pub fn new(id: impl Into<String>, image: FeatureMap<T>, labels: Vec<u8>, arch: &Architecture) -> Result<Self> {
        if labels.len() != image.height() * image.width() {
            return Err(dim_err!(
                "label map has {} entries for a {}x{} image",
                labels.len(),
                image.height(),
                image.width()
            ));
        }
        if image.channels() != arch.image_channels {
            return Err(dim_err!(
                "image has {} channels, model expects {}",
                image.channels(),
                arch.image_channels
            ));
        }
        let topic = topic_feature(&image, &arch.model.topic)?.values;
        Ok(Prepared {
            id: id.into(),
            image,
            labels,
            topic,
        })
    }
}

struct LevelCache<T> {
    crnn: CrnnCache<T>,
    global: GlobalArgmax,
    dims: (usize, usize),
}

enum FusionCache<T> {
    Attention(AttentionCache<T>),
    Baseline(BaselineRecord),
}

/// Forward state consumed by [`backward`].
pub struct ModelCache<T> {
    backbone: BackboneCache<T>,
    levels: Vec<LevelCache<T>>,
    fusion: FusionCache<T>,
    image_dims: (usize, usize),
}

pub struct Forward<T> {
    /// Per-level class scores upsampled to image resolution.
    pub level_scores: Vec<FeatureMap<T>>,
    pub fusion: FusionOutput<T>,
    pub probs: FeatureMap<T>,
    pub cache: ModelCache<T>,
}

/// Backbone, per-level context and recurrence, upsampling, fusion, softmax.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    image: &FeatureMap<T>,
    topic: &[T],
    plans: &LevelPlans,
) -> Result<Forward<T>> {
    let (h, w) = (image.height(), image.width());
    if (plans.height, plans.width) != (h, w) || plans.plans.len() != params.levels.len() {
        return Err(dim_err!(
            "plans built for {}x{} with {} levels, image is {h}x{w} with {} levels",
            plans.height,
            plans.width,
            plans.plans.len(),
            params.levels.len()
        ));
    }
    let (taps, backbone) = backbone_forward(image, &params.arch.model.backbone, &params.backbone)?;
    let outs = par::map_owned(taps, |q, tap| -> Result<_> {
        let (g, arg) = global_feature(&tap)?;
        let (logits, crnn) = crnn_forward(&tap, &plans.plans[q], &params.levels[q], &g.values, topic)?;
        let up = bilinear_upsample(&logits, h, w)?;
        Ok((
            up,
            LevelCache {
                crnn,
                global: arg,
                dims: (tap.height(), tap.width()),
            },
        ))
    });
    let mut level_scores = Vec::with_capacity(outs.len());
    let mut levels = Vec::with_capacity(outs.len());
    for o in outs {
        let (up, cache) = o?;
        level_scores.push(up);
        levels.push(cache);
    }
    let (fusion, fcache) = match (params.arch.model.fusion, &params.attention) {
        (FusionMode::Attention, Some(att)) => {
            let (out, c) = fuse_attention(&level_scores, att)?;
            (out, FusionCache::Attention(c))
        }
        (FusionMode::Attention, None) => {
            return Err(Error::State("attention mode without attention parameters".into()))
        }
        (FusionMode::Average, _) => {
            let (out, r) = fuse_average(&level_scores)?;
            (out, FusionCache::Baseline(r))
        }
        (FusionMode::Max, _) => {
            let (out, r) = fuse_max(&level_scores)?;
            (out, FusionCache::Baseline(r))
        }
    };
    let probs = softmax_channels(&fusion.fused);
    Ok(Forward {
        level_scores,
        fusion,
        probs,
        cache: ModelCache {
            backbone,
            levels,
            fusion: fcache,
            image_dims: (h, w),
        },
    })
}

pub struct Gradients<T> {
    pub params: ModelParams<T>,
    pub d_image: FeatureMap<T>,
}

/// Reverse pass from the gradient with respect to the fused (pre-softmax) scores.
/// The topic descriptor is a constant input, so its gradient is dropped.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    cache: ModelCache<T>,
    plans: &LevelPlans,
    d_fused: &FeatureMap<T>,
) -> Result<Gradients<T>> {
    let (h, w) = cache.image_dims;
    if d_fused.dims() != (h, w, params.arch.classes) {
        return Err(Error::State(format!(
            "backward: gradient {:?} does not match fused map {:?}",
            d_fused.dims(),
            (h, w, params.arch.classes)
        )));
    }
    if cache.levels.len() != params.levels.len() || (plans.height, plans.width) != (h, w) {
        return Err(Error::State("backward: cache, plans and parameters disagree".into()));
    }
    let mut grads = ModelParams::zeros(&params.arch)?;
    let d_levels = match (cache.fusion, &params.attention) {
        (FusionCache::Attention(c), Some(att)) => {
            let b = fuse_attention_backward(c, att, d_fused)?;
            grads.attention = Some(b.grads);
            b.d_levels
        }
        (FusionCache::Attention(_), None) => {
            return Err(Error::State("backward: attention cache without parameters".into()))
        }
        (FusionCache::Baseline(r), _) => fuse_baseline_backward(&r, d_fused)?,
    };
    let work: Vec<_> = cache.levels.into_iter().zip(d_levels).collect();
    let outs = par::map_owned(work, |q, (lc, d_up)| -> Result<_> {
        let (lh, lw) = lc.dims;
        let d_logits = bilinear_upsample_backward(&d_up, lh, lw)?;
        let b = crnn_backward(lc.crnn, &plans.plans[q], &params.levels[q], &d_logits)?;
        let mut d_tap = b.d_input;
        d_tap.add_assign(&global_feature_backward(&lc.global, &b.d_g)?)?;
        Ok((b.grads, d_tap))
    });
    let mut d_taps = Vec::with_capacity(outs.len());
    for (q, o) in outs.into_iter().enumerate() {
        let (g, d_tap) = o?;
        grads.levels[q] = g;
        d_taps.push(d_tap);
    }
    let (bg, d_image) = backbone_backward(cache.backbone, &params.backbone, &d_taps)?;
    grads.backbone = bg;
    Ok(Gradients {
        params: grads,
        d_image,
    })
}

/// Per-pixel argmax; ties go to the lowest class index.
pub fn argmax_labels<T: Scalar>(probs: &FeatureMap<T>) -> Vec<u8> {
    probs
        .data()
        .chunks_exact(probs.channels())
        .map(|px| {
            let mut best = 0;
            for (k, &v) in px.iter().enumerate().skip(1) {
                if v > px[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}
