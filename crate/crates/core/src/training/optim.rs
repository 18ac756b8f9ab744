//! Stochastic gradient descent with momentum.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Scalar;

use super::config::OptimizerConfig;

#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub config: OptimizerConfig,
    /// One entry per scalar, in enumeration order.
    pub velocity: Vec<T>,
    /// 1-based epoch selecting the learning rate.
    pub epoch: usize,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new<P: ParamSet<T>>(config: OptimizerConfig, params: &P) -> Self {
        OptimizerState {
            config,
            velocity: vec![T::zero(); params.scalar_count()],
            epoch: 1,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate_at(self.epoch)
    }
}

/// `v ← μv − η∇`, `w ← w + v`, after optional global-norm clipping.
pub fn sgd_step<T: Scalar, P: ParamSet<T>>(
    params: &mut P,
    grads: &P,
    state: &mut OptimizerState<T>,
) -> Result<()> {
    let g = grads.params();
    if state.velocity.len() != grads.scalar_count() {
        return Err(Error::State(format!(
            "optimizer holds {} velocities for {} parameters",
            state.velocity.len(),
            grads.scalar_count()
        )));
    }
    let mut norm_sq = 0.0f64;
    for p in &g {
        if let Some(i) = p.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Training {
                param: p.name.clone(),
                msg: format!("non-finite gradient {} at index {i}", p.data[i]),
            });
        }
        norm_sq += p.data.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
    }
    let mut scale = 1.0;
    if let Some(c) = state.config.clip_norm {
        let norm = norm_sq.sqrt();
        if norm > c {
            scale = c / norm;
        }
    }
    let eta = T::lit(state.learning_rate() * scale);
    let mu = T::lit(state.config.momentum);
    let mut vel = state.velocity.iter_mut();
    for (w, gr) in params.params_mut().into_iter().zip(&g) {
        if w.data.len() != gr.data.len() {
            return Err(Error::State(format!("layout mismatch at `{}`", w.name)));
        }
        for (x, &d) in w.data.iter_mut().zip(gr.data) {
            let v = vel.next().expect("velocity length checked");
            *v = mu * *v - eta * d;
            *x += *v;
        }
    }
    Ok(())
}
