//! Shared helpers for unit tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::FeatureMap;

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn rand_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap<f64> {
    FeatureMap::new(h, w, c, rand_vec(rng, h * w * c)).unwrap()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Max relative error between `analytic` and central differences of `f` at `x`.
pub fn fd_check(x: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut p = x.to_vec();
    for i in 0..x.len() {
        p[i] = x[i] + h;
        let up = f(&p);
        p[i] = x[i] - h;
        let down = f(&p);
        p[i] = x[i];
        let n = (up - down) / (2.0 * h);
        worst = worst.max(rel_err(analytic[i], n));
    }
    worst
}
