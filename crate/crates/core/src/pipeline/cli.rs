//! Command line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::context::{load_topic_feature, save_topic_feature, TopicFeature};
use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Precision, Scalar};
use crate::training::checkpoint::read_params_file;
use crate::training::{
    grad_check, init_params, load_model, save_model, train, Architecture, Config, EpochLogWriter, ModelParams,
    Prepared, Selection, IGNORE_LABEL,
};

use super::compare::{compare_fusion, format_table};
use super::dataset::{load_dataset, read_image, save_dataset, DatasetManifest};
use super::predict::{evaluate, export_prediction, predict};
use super::synth::{generate_synthetic, SynthKind};

#[derive(Parser, Debug)]
#[command(name = "mlcrnn", version, about = "Multi-level contextual RNN scene labeling")]
struct Cli {
    /// Model and training configuration (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Report metrics of a trained model on a dataset.
    Eval(EvalArgs),
    /// Label images with a trained model.
    Predict(PredictArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
    /// Train average, max and attention fusion and compare them.
    FusionCompare(CompareArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// `longrange` or `multiscale`.
    kind: String,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset manifest.
    #[arg(long, value_name = "MANIFEST")]
    data: PathBuf,
    /// Start from these parameters instead of a fresh initialization.
    #[arg(long, value_name = "PARAMS")]
    init: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_name = "PARAMS")]
    model: PathBuf,
    #[arg(long, value_name = "MANIFEST")]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long, value_name = "PARAMS")]
    model: PathBuf,
    /// Images to label.
    #[arg(required = true)]
    images: Vec<PathBuf>,
    /// Precomputed topic vector, one value per line (single image only).
    #[arg(long, value_name = "PATH")]
    topic: Option<PathBuf>,
    /// Dataset manifest whose palette colours the exported label maps.
    #[arg(long, value_name = "MANIFEST")]
    palette: Option<PathBuf>,
    /// Also export per-level fusion weight maps.
    #[arg(long)]
    weights: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    size: usize,
    /// Check this many random coordinates per tensor instead of all of them.
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Training set manifest.
    #[arg(long, value_name = "MANIFEST")]
    data: PathBuf,
    /// Test set manifest (defaults to the training set).
    #[arg(long, value_name = "MANIFEST")]
    test: Option<PathBuf>,
}

/// Parse `argv` (including the program name) and run; returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn config(cli: &Cli, fallback: Config) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => fallback,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn dispatch(cli: Cli) -> Result<i32> {
    match &cli.command {
        Command::Synth(a) => synth(&cli, a),
        Command::Train(a) => train_cmd(&cli, a),
        Command::Eval(a) => eval_cmd(&cli, a),
        Command::Predict(a) => predict_cmd(&cli, a),
        Command::Gradcheck(a) => gradcheck_cmd(&cli, a),
        Command::FusionCompare(a) => compare_cmd(&cli, a),
    }
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<i32> {
    let kind: SynthKind = a.kind.parse()?;
    let seed = cli.seed.unwrap_or(0);
    let set = generate_synthetic(kind, a.count, a.size, seed)?;
    let dir = out_dir(cli)?;
    let manifest = save_dataset(&dir, set.classes, set.names, set.palette, &set.samples)?;
    println!("wrote {} samples to {}", set.samples.len(), manifest.display());
    Ok(0)
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<i32> {
    let cfg = config(cli, Config::default())?;
    let (manifest, samples) = load_dataset(&a.data)?;
    let channels = samples.first().map_or(1, |s| s.image.channels());
    let arch = Architecture::new(manifest.classes, channels, cfg.model.clone())?;
    let dir = out_dir(cli)?;
    let cfg_path = dir.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    match cfg.precision {
        Precision::Single => train_with::<f32>(&cfg, &arch, &samples, a.init.as_deref(), &dir),
        Precision::Double => train_with::<f64>(&cfg, &arch, &samples, a.init.as_deref(), &dir),
    }
}

fn train_with<T: Scalar>(
    cfg: &Config,
    arch: &Architecture,
    samples: &[super::dataset::LabeledSample],
    init: Option<&Path>,
    dir: &Path,
) -> Result<i32> {
    let prepared = samples.iter().map(|s| s.prepare::<T>(arch)).collect::<Result<Vec<_>>>()?;
    let params = match init {
        Some(p) => {
            let loaded: ModelParams<T> = load_model(p)?;
            if loaded.arch != *arch {
                return Err(Error::Config(format!(
                    "{}: architecture differs from the configuration",
                    p.display()
                )));
            }
            loaded
        }
        None => init_params::<T>(arch, cfg.seed)?,
    };
    let mut log = EpochLogWriter::create(&dir.join("epochs.csv"))?;
    let every = cfg.training.checkpoint_every;
    let out = train(&prepared, cfg, params, |row, p| {
        log.write(row)?;
        println!(
            "epoch {:>4}  loss {:.6}  pixel {:.4}  class {:.4}  lr {:.3e}",
            row.epoch, row.loss, row.pixel_acc, row.class_acc, row.lr
        );
        if every.is_some_and(|n| n > 0 && row.epoch % n == 0) {
            save_model(&dir.join(format!("epoch{:04}.params", row.epoch)), p)?;
        }
        Ok(())
    })?;
    let path = dir.join("model.params");
    save_model(&path, &out.params)?;
    println!("saved {}", path.display());
    Ok(0)
}

fn model_precision(path: &Path) -> Result<Precision> {
    Ok(read_params_file(path)?.0.precision)
}

fn eval_cmd(cli: &Cli, a: &EvalArgs) -> Result<i32> {
    match model_precision(&a.model)? {
        Precision::Single => eval_with::<f32>(cli, a),
        Precision::Double => eval_with::<f64>(cli, a),
    }
}

fn eval_with<T: Scalar>(cli: &Cli, a: &EvalArgs) -> Result<i32> {
    let params: ModelParams<T> = load_model(&a.model)?;
    let (manifest, samples) = load_dataset(&a.data)?;
    if manifest.classes != params.arch.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model has {}",
            manifest.classes, params.arch.classes
        )));
    }
    let prepared = samples.iter().map(|s| s.prepare::<T>(&params.arch)).collect::<Result<Vec<_>>>()?;
    let (report, _) = evaluate(&params, &prepared)?;
    println!("pixel accuracy {:.4}", report.pixel_accuracy);
    println!("class accuracy {:.4}", report.class_accuracy);
    for (k, acc) in report.per_class.iter().enumerate() {
        let name = manifest.names.get(k).cloned().unwrap_or_else(|| format!("class{k}"));
        match acc {
            Some(v) => println!("  {name:<16} {v:.4}"),
            None => println!("  {name:<16} -"),
        }
    }
    if cli.out.is_some() {
        let path = out_dir(cli)?.join("metrics.json");
        let json = serde_json::to_string_pretty(&report).expect("metrics serialize");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    Ok(0)
}

fn predict_cmd(cli: &Cli, a: &PredictArgs) -> Result<i32> {
    if a.topic.is_some() && a.images.len() != 1 {
        return Err(Error::Config("--topic applies to a single image".into()));
    }
    match model_precision(&a.model)? {
        Precision::Single => predict_with::<f32>(cli, a),
        Precision::Double => predict_with::<f64>(cli, a),
    }
}

fn predict_with<T: Scalar>(cli: &Cli, a: &PredictArgs) -> Result<i32> {
    let params: ModelParams<T> = load_model(&a.model)?;
    let palette = match &a.palette {
        Some(p) => DatasetManifest::load(p)?.palette,
        None => default_palette(params.arch.classes),
    };
    let mut samples = Vec::with_capacity(a.images.len());
    for path in &a.images {
        let image: FeatureMap<T> = read_image(path)?.cast();
        let id = path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
        let labels = vec![IGNORE_LABEL; image.height() * image.width()];
        let mut s = Prepared::new(id, image, labels, &params.arch)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(t) = &a.topic {
            s.topic = load_topic_feature::<T>(t, s.topic.len())?.values;
        }
        samples.push(s);
    }
    let dir = out_dir(cli)?;
    let preds = predict(&params, &samples)?;
    for (s, p) in samples.iter().zip(&preds) {
        let files = export_prediction(&dir, p, Some(&palette), a.weights)?;
        save_topic_feature(
            &dir.join(format!("{}_topic.txt", s.id)),
            &TopicFeature { values: s.topic.clone() },
        )?;
        println!("{} -> {}", s.id, files.labels.display());
    }
    Ok(0)
}

/// Black background followed by evenly spaced hues.
pub fn default_palette(classes: usize) -> Vec<[u8; 3]> {
    let mut out = vec![[0, 0, 0]];
    for k in 1..classes {
        let h = (k - 1) as f64 / (classes - 1) as f64 * 6.0;
        let x = 1.0 - (h % 2.0 - 1.0).abs();
        let (r, g, b) = match h as usize {
            0 => (1.0, x, 0.0),
            1 => (x, 1.0, 0.0),
            2 => (0.0, 1.0, x),
            3 => (0.0, x, 1.0),
            4 => (x, 0.0, 1.0),
            _ => (1.0, 0.0, x),
        };
        let q = |v: f64| (40.0 + 200.0 * v).round() as u8;
        out.push([q(r), q(g), q(b)]);
    }
    out
}

fn gradcheck_cmd(cli: &Cli, a: &GradcheckArgs) -> Result<i32> {
    let cfg = config(cli, Config::tiny())?;
    let arch = Architecture::new(a.classes, 1, cfg.model.clone())?;
    let params = init_params::<f64>(&arch, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let image = FeatureMap::from_fn(a.size, a.size, 1, |_, _, _| rng.gen_range(0.0..1.0));
    let labels = (0..a.size * a.size).map(|_| rng.gen_range(0..a.classes) as u8).collect();
    let sample = Prepared::new("gradcheck", image, labels, &arch)?;
    let selection = match a.sample {
        Some(n) => Selection::Random { per_tensor: n, seed: cfg.seed },
        None => Selection::All,
    };
    let report = grad_check(&params, &sample, selection, true)?;
    for (family, err) in report.families() {
        println!("{family:<28} {err:.3e}");
    }
    let max = report.max_rel_err();
    println!("max relative error {max:.3e} over {} coordinates", report.checked());
    if max <= a.tolerance {
        Ok(0)
    } else {
        eprintln!("error: max relative error {max:.3e} exceeds {:.1e}", a.tolerance);
        Ok(1)
    }
}

fn compare_cmd(cli: &Cli, a: &CompareArgs) -> Result<i32> {
    let cfg = config(cli, Config::default())?;
    let (manifest, train_set) = load_dataset(&a.data)?;
    let test_set = match &a.test {
        Some(p) => {
            let (m, s) = load_dataset(p)?;
            if m.classes != manifest.classes {
                return Err(Error::Config(format!(
                    "{}: {} classes, training set has {}",
                    p.display(),
                    m.classes,
                    manifest.classes
                )));
            }
            s
        }
        None => train_set.clone(),
    };
    let results = compare_fusion(&train_set, &test_set, manifest.classes, &cfg)?;
    let table = format_table(&results);
    print!("{table}");
    if cli.out.is_some() {
        let path = out_dir(cli)?.join("fusion.txt");
        std::fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    }
    Ok(0)
}
