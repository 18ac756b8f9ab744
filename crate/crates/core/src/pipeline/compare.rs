//! Train the same model under each fusion mode and compare test metrics.

use std::fmt::Write as _;

use crate::error::Result;
use crate::fusion::FusionMode;
use crate::tensor::{Precision, Scalar};
use crate::training::{init_params, train, Architecture, Config, Prepared};

use super::dataset::LabeledSample;
use super::metrics::MetricsReport;
use super::predict::evaluate;

#[derive(Clone, Debug)]
pub struct FusionResult {
    pub mode: FusionMode,
    pub final_loss: f64,
    pub test: MetricsReport,
}

fn run<T: Scalar>(
    train_set: &[LabeledSample],
    test_set: &[LabeledSample],
    arch: &Architecture,
    config: &Config,
) -> Result<(f64, MetricsReport)> {
    let prep = |set: &[LabeledSample]| set.iter().map(|s| s.prepare::<T>(arch)).collect::<Result<Vec<_>>>();
    let (tr, te): (Vec<Prepared<T>>, Vec<Prepared<T>>) = (prep(train_set)?, prep(test_set)?);
    let params = init_params::<T>(arch, config.seed)?;
    let out = train(&tr, config, params, |_, _| Ok(()))?;
    let loss = out.log.last().map_or(f64::NAN, |r| r.loss);
    let (report, _) = evaluate(&out.params, &te)?;
    Ok((loss, report))
}

/// One training run per fusion mode from the same seed and data.
pub fn compare_fusion(
    train_set: &[LabeledSample],
    test_set: &[LabeledSample],
    classes: usize,
    config: &Config,
) -> Result<Vec<FusionResult>> {
    let channels = train_set.first().map_or(1, |s| s.image.channels());
    FusionMode::ALL
        .iter()
        .map(|&mode| {
            let mut cfg = config.clone();
            cfg.model.fusion = mode;
            let arch = Architecture::new(classes, channels, cfg.model.clone())?;
            let (final_loss, test) = match cfg.precision {
                Precision::Single => run::<f32>(train_set, test_set, &arch, &cfg)?,
                Precision::Double => run::<f64>(train_set, test_set, &arch, &cfg)?,
            };
            Ok(FusionResult { mode, final_loss, test })
        })
        .collect()
}

/// Plain-text table, one row per fusion mode.
pub fn format_table(results: &[FusionResult]) -> String {
    let mut s = String::new();
    writeln!(s, "{:<10} {:>10} {:>10} {:>10}", "fusion", "pixel_acc", "class_acc", "loss").unwrap();
    for r in results {
        writeln!(
            s,
            "{:<10} {:>9.2}% {:>9.2}% {:>10.4}",
            format!("ML-CRNN_{}", r.mode.short_name()),
            100.0 * r.test.pixel_accuracy,
            100.0 * r.test.class_accuracy,
            r.final_loss
        )
        .unwrap();
    }
    s
}
