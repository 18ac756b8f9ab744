//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::par;
use crate::params::ParamSet;

use super::loss::{cross_entropy, NeumaierSum};
use super::model::{backward, forward, LevelPlans, ModelParams, Prepared};

pub const FD_STEP: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Which coordinates of each tensor to perturb.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    All,
    /// At most `per_tensor` distinct coordinates of each tensor, seeded.
    Random { per_tensor: usize, seed: u64 },
}

impl Selection {
    fn pick(&self, len: usize, tensor: usize) -> Vec<usize> {
        match *self {
            Selection::All => (0..len).collect(),
            Selection::Random { per_tensor, seed } => {
                if per_tensor >= len {
                    return (0..len).collect();
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (tensor as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                let mut idx = sample(&mut rng, len, per_tensor).into_vec();
                idx.sort_unstable();
                idx
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }

    /// Maximum error per family, where a family is a tensor name with its
    /// level, stage, DAG and slot numbers removed (`level2.dag1.w0` → `level.dag.w`).
    pub fn families(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for t in &self.tensors {
            let fam: String = t.name.chars().filter(|c| !c.is_ascii_digit()).collect();
            match out.iter_mut().find(|(f, _)| *f == fam) {
                Some((_, e)) => *e = e.max(t.max_rel_err),
                None => out.push((fam, t.max_rel_err)),
            }
        }
        out
    }
}

/// Check `analytic` (same layout as `params`) against central differences
/// of `loss`, perturbing one coordinate at a time.
pub fn check_params<P, F>(params: &P, analytic: &P, selection: Selection, loss: F) -> Result<Vec<TensorCheck>>
where
    P: ParamSet<f64> + Clone + Sync,
    F: Fn(&P) -> Result<f64> + Sync,
{
    check_params_with(params, analytic, selection, loss, |up, down| (up - down) / (2.0 * FD_STEP))
}

fn check_params_with<P, L, F, D>(
    params: &P,
    analytic: &P,
    selection: Selection,
    loss: F,
    difference: D,
) -> Result<Vec<TensorCheck>>
where
    P: ParamSet<f64> + Clone + Sync,
    L: Send,
    F: Fn(&P) -> Result<L> + Sync,
    D: Fn(L, L) -> f64 + Sync,
{
    let layout: Vec<(String, usize)> = params
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.data.len()))
        .collect();
    let grads = analytic.params();
    let mut out = Vec::with_capacity(layout.len());
    for (t, (name, len)) in layout.iter().enumerate() {
        let coords = selection.pick(*len, t);
        let numeric = par::map_slice(&coords, |&i| -> Result<f64> {
            let mut p = params.clone();
            let x = p.params()[t].data[i];
            p.params_mut()[t].data[i] = x + FD_STEP;
            let up = loss(&p)?;
            p.params_mut()[t].data[i] = x - FD_STEP;
            let down = loss(&p)?;
            Ok(difference(up, down))
        });
        out.push(summarize(name, &coords, grads[t].data, numeric)?);
    }
    Ok(out)
}

fn summarize(name: &str, coords: &[usize], analytic: &[f64], numeric: Vec<Result<f64>>) -> Result<TensorCheck> {
    let mut rep = TensorCheck {
        name: name.to_string(),
        checked: coords.len(),
        max_rel_err: 0.0,
        worst_index: coords.first().copied().unwrap_or(0),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    let mut first = true;
    for (&i, n) in coords.iter().zip(numeric) {
        let n = n?;
        let a = analytic[i];
        let e = relative_error(a, n);
        if first || e > rep.max_rel_err {
            first = false;
            rep.max_rel_err = e;
            rep.worst_index = i;
            rep.worst_analytic = a;
            rep.worst_numeric = n;
        }
    }
    Ok(rep)
}

/// Unnormalized loss of the full model on one sample, with its valid pixel count.
fn sample_loss(params: &ModelParams<f64>, sample: &Prepared<f64>, plans: &LevelPlans) -> Result<(NeumaierSum, usize)> {
    let f = forward(params, &sample.image, &sample.topic, plans)?;
    let r = cross_entropy(&f.probs, &sample.labels)?;
    Ok((r.total, r.valid))
}

/// Central difference of the mean loss, taken on the compensated sums.
fn central(up: (NeumaierSum, usize), down: (NeumaierSum, usize)) -> f64 {
    up.0.diff(&down.0) / up.1 as f64 / (2.0 * FD_STEP)
}

/// End-to-end check over every parameter tensor and, optionally, the input image.
pub fn grad_check(
    params: &ModelParams<f64>,
    sample: &Prepared<f64>,
    selection: Selection,
    include_input: bool,
) -> Result<GradCheckReport> {
    let plans = LevelPlans::build(&params.arch, sample.image.height(), sample.image.width())?;
    let f = forward(params, &sample.image, &sample.topic, &plans)?;
    let loss = cross_entropy(&f.probs, &sample.labels)?;
    let g = backward(params, f.cache, &plans, &loss.d_logits)?;
    let mut tensors = check_params_with(
        params,
        &g.params,
        selection,
        |p| sample_loss(p, sample, &plans),
        central,
    )?;
    if include_input {
        let n = sample.image.data().len();
        let coords = selection.pick(n, tensors.len());
        let numeric = par::map_slice(&coords, |&i| -> Result<f64> {
            let mut s = sample.clone();
            let x = s.image.data()[i];
            s.image.data_mut()[i] = x + FD_STEP;
            let up = sample_loss(params, &s, &plans)?;
            s.image.data_mut()[i] = x - FD_STEP;
            let down = sample_loss(params, &s, &plans)?;
            Ok(central(up, down))
        });
        tensors.push(summarize("input", &coords, g.d_image.data(), numeric)?);
    }
    Ok(GradCheckReport { tensors })
}
