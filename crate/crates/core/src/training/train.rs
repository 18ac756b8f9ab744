//! Training loop and epoch log.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::params::ParamSet;
use crate::pipeline::metrics::Confusion;
use crate::tensor::Scalar;

use super::config::Config;
use super::loss::cross_entropy;
use super::model::{argmax_labels, backward, forward, LevelPlans, ModelParams, Prepared};
use super::optim::{sgd_step, OptimizerState};

/// One row of the epoch log. Loss and accuracies are measured on the
/// forward passes made while training through the epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub pixel_acc: f64,
    pub class_acc: f64,
    pub lr: f64,
}

/// DAG plans for every image size present in a sample set.
#[derive(Clone, Debug, Default)]
pub struct PlanCache {
    plans: BTreeMap<(usize, usize), LevelPlans>,
}

impl PlanCache {
    pub fn for_samples<T: Scalar>(params: &ModelParams<T>, samples: &[Prepared<T>]) -> Result<Self> {
        let mut plans = BTreeMap::new();
        for s in samples {
            let key = (s.image.height(), s.image.width());
            if !plans.contains_key(&key) {
                plans.insert(key, LevelPlans::build(&params.arch, key.0, key.1)?);
            }
        }
        Ok(PlanCache { plans })
    }

    pub fn get(&self, height: usize, width: usize) -> Result<&LevelPlans> {
        self.plans
            .get(&(height, width))
            .ok_or_else(|| Error::State(format!("no plans built for {height}x{width}")))
    }
}

/// Loss, parameter gradients and predicted labels for one sample.
pub struct SampleGradient<T> {
    pub loss: f64,
    pub grads: ModelParams<T>,
    pub predicted: Vec<u8>,
}

pub fn sample_gradient<T: Scalar>(
    params: &ModelParams<T>,
    sample: &Prepared<T>,
    plans: &LevelPlans,
) -> Result<SampleGradient<T>> {
    let f = forward(params, &sample.image, &sample.topic, plans)?;
    let predicted = argmax_labels(&f.probs);
    let loss = cross_entropy(&f.probs, &sample.labels)?;
    let g = backward(params, f.cache, plans, &loss.d_logits)?;
    Ok(SampleGradient {
        loss: loss.loss,
        grads: g.params,
        predicted,
    })
}

/// Mean gradient over a batch. Per-sample gradients are summed in order of
/// sample id, so the result does not depend on how the batch is arranged.
pub fn batch_gradient<T: Scalar>(
    params: &ModelParams<T>,
    samples: &[&Prepared<T>],
    plans: &PlanCache,
) -> Result<(ModelParams<T>, Vec<SampleGradient<T>>)> {
    let parts = par::map_slice(samples, |s| {
        sample_gradient(params, s, plans.get(s.image.height(), s.image.width())?)
    });
    let out = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let mut by_id: Vec<usize> = (0..samples.len()).collect();
    by_id.sort_by(|&a, &b| samples[a].id.cmp(&samples[b].id));
    let mut total = ModelParams::zeros(&params.arch)?;
    for i in by_id {
        total.accumulate(&out[i].grads);
    }
    total.scale(T::lit(1.0 / samples.len() as f64));
    Ok((total, out))
}

pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    pub log: Vec<EpochLog>,
}

/// Shuffled mini-batch SGD. `on_epoch` sees each log row and the parameters
/// at the end of that epoch; an error from it stops training.
pub fn train<T, F>(
    samples: &[Prepared<T>],
    config: &Config,
    mut params: ModelParams<T>,
    mut on_epoch: F,
) -> Result<TrainOutcome<T>>
where
    T: Scalar,
    F: FnMut(&EpochLog, &ModelParams<T>) -> Result<()>,
{
    if samples.is_empty() {
        return Err(Error::Degenerate("training set is empty".into()));
    }
    let plans = PlanCache::for_samples(&params, samples)?;
    let mut state = OptimizerState::new(config.optimizer.clone(), &params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let ablate = params.arch.model.ablate_context;
    let mut log = Vec::with_capacity(config.training.epochs);
    for epoch in 1..=config.training.epochs {
        state.epoch = epoch;
        let lr = state.learning_rate();
        order.shuffle(&mut rng);
        let mut confusion = Confusion::new(params.arch.classes);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.training.batch_size) {
            let refs: Vec<&Prepared<T>> = batch.iter().map(|&i| &samples[i]).collect();
            let (mut grads, parts) = batch_gradient(&params, &refs, &plans)?;
            for (s, p) in refs.iter().zip(&parts) {
                loss_sum += p.loss;
                confusion.add(&s.labels, &p.predicted)?;
            }
            if ablate {
                grads.zero_context_paths();
            }
            sgd_step(&mut params, &grads, &mut state)?;
        }
        let row = EpochLog {
            epoch,
            loss: loss_sum / samples.len() as f64,
            pixel_acc: confusion.pixel_accuracy(),
            class_acc: confusion.class_accuracy(),
            lr,
        };
        on_epoch(&row, &params)?;
        log.push(row);
    }
    Ok(TrainOutcome { params, log })
}

/// CSV writer for [`EpochLog`] rows, flushed after every row.
pub struct EpochLogWriter {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl EpochLogWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(EpochLogWriter {
            path: path.to_path_buf(),
            writer: csv::Writer::from_writer(file),
        })
    }

    pub fn write(&mut self, row: &EpochLog) -> Result<()> {
        let path = &self.path;
        self.writer
            .serialize(row)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        self.writer.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochLog>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::TopicConfig;
    use crate::fusion::FusionMode;
    use crate::tensor::FeatureMap;
    use crate::training::model::{init_params, Architecture};
    use rand::Rng;

    fn small_setup(fusion: FusionMode) -> (Config, Vec<Prepared<f64>>, ModelParams<f64>) {
        let mut cfg = Config::tiny();
        cfg.model.fusion = fusion;
        cfg.model.topic = TopicConfig { grid: 2, ..TopicConfig::default() };
        cfg.training.epochs = 3;
        cfg.optimizer.learning_rate = 0.01;
        let arch = Architecture::new(3, 1, cfg.model.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples = (0..3)
            .map(|i| {
                let img = FeatureMap::from_fn(16, 16, 1, |_, _, _| rng.gen_range(0.0..1.0));
                let labels = (0..256).map(|p| ((p / 16 + i) % 3) as u8).collect();
                Prepared::new(format!("s{i}"), img, labels, &arch).unwrap()
            })
            .collect();
        let params = init_params(&arch, 11).unwrap();
        (cfg, samples, params)
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let (mut cfg, samples, params) = small_setup(FusionMode::Average);
        cfg.optimizer.learning_rate = 0.0;
        let out = train(&samples, &cfg, params.clone(), |_, _| Ok(())).unwrap();
        assert_eq!(out.params, params);
        let losses: Vec<f64> = out.log.iter().map(|r| r.loss).collect();
        assert!(losses.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12), "{losses:?}");
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let (cfg, samples, params) = small_setup(FusionMode::Attention);
        let a = train(&samples, &cfg, params.clone(), |_, _| Ok(())).unwrap();
        let b = train(&samples, &cfg, params, |_, _| Ok(())).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn training_reduces_loss() {
        let (mut cfg, samples, params) = small_setup(FusionMode::Max);
        cfg.training.epochs = 8;
        let out = train(&samples, &cfg, params, |_, _| Ok(())).unwrap();
        assert!(out.log.last().unwrap().loss < out.log[0].loss, "{:?}", out.log);
        assert_eq!(out.log[0].lr, 0.01);
    }

    #[test]
    fn full_batch_gradient_ignores_sample_order() {
        let (_, samples, params) = small_setup(FusionMode::Attention);
        let plans = PlanCache::for_samples(&params, &samples).unwrap();
        let fwd: Vec<&Prepared<f64>> = samples.iter().collect();
        let rev: Vec<&Prepared<f64>> = samples.iter().rev().collect();
        let (a, _) = batch_gradient(&params, &fwd, &plans).unwrap();
        let (b, _) = batch_gradient(&params, &rev, &plans).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ablated_context_stays_zero() {
        let (mut cfg, samples, _) = small_setup(FusionMode::Average);
        cfg.model.ablate_context = true;
        let arch = Architecture::new(3, 1, cfg.model.clone()).unwrap();
        let params = init_params::<f64>(&arch, 3).unwrap();
        let samples: Vec<Prepared<f64>> = samples
            .into_iter()
            .map(|s| Prepared::new(s.id, s.image, s.labels, &arch).unwrap())
            .collect();
        let out = train(&samples, &cfg, params, |_, _| Ok(())).unwrap();
        for l in &out.params.levels {
            assert!(l.context.t.data().iter().all(|&v| v == 0.0));
            assert!(l.context.g.data().iter().all(|&v| v == 0.0));
            assert!(l.dags.iter().all(|d| d.w.iter().all(|m| m.data().iter().all(|&v| v == 0.0))));
        }
    }

    #[test]
    fn epoch_log_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let rows = vec![
            EpochLog { epoch: 1, loss: 1.25, pixel_acc: 0.5, class_acc: 0.25, lr: 1e-3 },
            EpochLog { epoch: 2, loss: 0.1 + 0.2, pixel_acc: 1.0, class_acc: 1.0, lr: 9e-4 },
        ];
        let mut w = EpochLogWriter::create(&path).unwrap();
        for r in &rows {
            w.write(r).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,loss,pixel_acc,class_acc,lr\n"));
        assert_eq!(read_epoch_log(&path).unwrap(), rows);
    }

    #[test]
    fn empty_dataset_rejected() {
        let (cfg, _, params) = small_setup(FusionMode::Average);
        assert!(train::<f64, _>(&[], &cfg, params, |_, _| Ok(())).is_err());
    }
}
