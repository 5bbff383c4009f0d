//! Command-line front end for the echotrace toolkit: synthetic data,
//! training, prediction, ridge thinning, evaluation, accumulation rates and
//! SVG reports. Every flag can also be set through an `ECHOTRACE_*`
//! environment variable; all randomness flows from `--seed`.

mod svg;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use echotrace::data::{self, read_egm, write_egm, DatasetItem, LayerSet, ManifestEntry, Meta, SynthParams};
use echotrace::eval::{self, EvalReport};
use echotrace::model::{Model, ModelConfig, Variant};
use echotrace::postproc::{binarize, nms_vertical, NmsConfig};
use echotrace::train::{train_loop, Checkpoint, LossEntry, OptimizerKind, TrainConfig};
use echotrace::wavelet::{FilterBank, WaveletKind};
use echotrace::{accum, Grid64};

#[derive(Parser)]
#[command(name = "echotrace", version, about = "Trace snow accumulation layers in radar echograms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic echogram dataset with a manifest.
    Synth(SynthArgs),
    /// Train a model on a manifest; writes a checkpoint and a loss log.
    Train(TrainArgs),
    /// Run a checkpoint over a manifest, writing per-image probability maps.
    Predict(PredictArgs),
    /// Thin probability maps to one ridge pixel per column neighborhood.
    Nms(NmsArgs),
    /// Score predictions against ground truth: PR curve, ODS, OIS, AP.
    Eval(EvalArgs),
    /// Add layer-depth MAE at the ODS threshold to an evaluation report.
    Depth(DepthArgs),
    /// Convert traced layers into water-equivalent accumulation rates.
    Accum(AccumArgs),
    /// Render an SVG report: PR curve plus an annotated echogram panel.
    Report(ReportArgs),
    /// Chain predict, nms, eval and depth over one manifest.
    Pipeline(PipelineArgs),
    /// Wavelet utilities.
    #[command(subcommand)]
    Wavelet(WaveletCmd),
}

#[derive(Subcommand)]
enum WaveletCmd {
    /// Print a filter bank's decomposition/reconstruction taps as JSON.
    DumpFilters(DumpFiltersArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Mscnn,
    Wavenet,
    Skipwavenet,
}

impl From<ArchArg> for Variant {
    fn from(a: ArchArg) -> Variant {
        match a {
            ArchArg::Mscnn => Variant::Mscnn,
            ArchArg::Wavenet => Variant::Wavenet,
            ArchArg::Skipwavenet => Variant::Skipwavenet,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    PaperFaithful,
    DeskScale,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    SgdMomentum,
    Adam,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileModeArg {
    PiecewiseLinear,
    LinearFit,
}

fn parse_wavelet(s: &str) -> std::result::Result<WaveletKind, String> {
    WaveletKind::parse(s).map_err(|e| e.to_string())
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for images, layer CSVs, meta and the manifest.
    #[arg(long, env = "ECHOTRACE_OUT")]
    out: PathBuf,
    #[arg(long, default_value_t = 8, env = "ECHOTRACE_IMAGES")]
    images: usize,
    #[arg(long, default_value_t = 64, env = "ECHOTRACE_ROWS")]
    rows: usize,
    #[arg(long, default_value_t = 64, env = "ECHOTRACE_COLS")]
    cols: usize,
    /// Layers per echogram.
    #[arg(long, default_value_t = 5, env = "ECHOTRACE_LAYERS")]
    layers: usize,
    #[arg(long, default_value_t = 0, env = "ECHOTRACE_SEED")]
    seed: u64,
    /// Multiplicative speckle strength in [0, 1].
    #[arg(long, default_value_t = 0.3, env = "ECHOTRACE_SPECKLE")]
    speckle: f64,
    /// Std dev of the vertical blur, pixels.
    #[arg(long, default_value_t = 0.8, env = "ECHOTRACE_BLUR")]
    blur: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, env = "ECHOTRACE_MANIFEST")]
    manifest: PathBuf,
    /// Checkpoint output path.
    #[arg(long, env = "ECHOTRACE_OUT")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = ArchArg::Skipwavenet, env = "ECHOTRACE_ARCH")]
    arch: ArchArg,
    #[arg(long, value_parser = parse_wavelet, default_value = "dmey", env = "ECHOTRACE_WAVELET")]
    wavelet: WaveletKind,
    /// First-stage channel count; later stages scale it up.
    #[arg(long, default_value_t = 16, env = "ECHOTRACE_WIDTH")]
    width: usize,
    #[arg(long, value_enum, default_value_t = PresetArg::DeskScale, env = "ECHOTRACE_PRESET")]
    preset: PresetArg,
    #[arg(long, env = "ECHOTRACE_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long, value_enum, env = "ECHOTRACE_OPTIMIZER")]
    optimizer: Option<OptimizerArg>,
    #[arg(long, env = "ECHOTRACE_LR")]
    lr: Option<f64>,
    /// Momentum coefficient; doubles as Adam's beta1.
    #[arg(long, env = "ECHOTRACE_MOMENTUM")]
    momentum: Option<f64>,
    #[arg(long, env = "ECHOTRACE_WEIGHT_DECAY")]
    weight_decay: Option<f64>,
    #[arg(long, env = "ECHOTRACE_BATCH_SIZE")]
    batch_size: Option<usize>,
    /// Positive-class scale in the class-balanced loss.
    #[arg(long, env = "ECHOTRACE_LAMBDA")]
    lambda: Option<f64>,
    #[arg(long, env = "ECHOTRACE_SEED")]
    seed: Option<u64>,
    /// Expand the dataset five-fold with scaled and flipped copies.
    #[arg(long, env = "ECHOTRACE_AUGMENT")]
    augment: bool,
    /// Loss log JSON path; defaults to the checkpoint path with a .losses.json extension.
    #[arg(long, env = "ECHOTRACE_LOSS_LOG")]
    loss_log: Option<PathBuf>,
    /// Continue from the checkpoint at --out if it exists.
    #[arg(long, env = "ECHOTRACE_RESUME")]
    resume: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long, env = "ECHOTRACE_CHECKPOINT")]
    checkpoint: PathBuf,
    #[arg(long, env = "ECHOTRACE_MANIFEST")]
    manifest: PathBuf,
    /// Directory receiving pred_NNNN.egm probability maps.
    #[arg(long, env = "ECHOTRACE_OUT")]
    out: PathBuf,
    #[arg(long, default_value_t = 1, env = "ECHOTRACE_THREADS")]
    threads: usize,
}

#[derive(Args)]
struct NmsArgs {
    /// Directory of .egm probability maps.
    #[arg(long, env = "ECHOTRACE_PRED")]
    pred: PathBuf,
    #[arg(long, env = "ECHOTRACE_OUT")]
    out: PathBuf,
    /// Vertical suppression half-width, rows.
    #[arg(long, default_value_t = 1, env = "ECHOTRACE_RADIUS")]
    radius: usize,
    #[arg(long, default_value_t = 1, env = "ECHOTRACE_THREADS")]
    threads: usize,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of pred_NNNN.egm maps, one per manifest entry.
    #[arg(long, env = "ECHOTRACE_PRED")]
    pred: PathBuf,
    #[arg(long, env = "ECHOTRACE_MANIFEST")]
    manifest: PathBuf,
    /// Report JSON output path.
    #[arg(long, env = "ECHOTRACE_OUT")]
    out: PathBuf,
    /// Match tolerance in pixels; defaults to 0.75% of the image diagonal.
    #[arg(long, env = "ECHOTRACE_TOLERANCE")]
    tolerance: Option<f64>,
    #[arg(long, default_value_t = eval::DEFAULT_THRESHOLDS, env = "ECHOTRACE_THRESHOLDS")]
    thresholds: usize,
}

#[derive(Args)]
struct DepthArgs {
    /// Directory of pred_NNNN.egm maps, one per manifest entry.
    #[arg(long, env = "ECHOTRACE_PRED")]
    pred: PathBuf,
    #[arg(long, env = "ECHOTRACE_MANIFEST")]
    manifest: PathBuf,
    /// Existing evaluation report; MAE fields are merged into it in place.
    #[arg(long, env = "ECHOTRACE_REPORT")]
    report: PathBuf,
    /// Components smaller than this many pixels are discarded.
    #[arg(long, default_value_t = eval::DEFAULT_MIN_PIXELS, env = "ECHOTRACE_MIN_PIXELS")]
    min_pixels: usize,
    /// Directory receiving the traced layers as pred_NNNN.csv, one per image.
    #[arg(long, env = "ECHOTRACE_LAYERS_OUT")]
    layers_out: Option<PathBuf>,
}

#[derive(Args)]
struct AccumArgs {
    /// Traced layers CSV.
    #[arg(long, env = "ECHOTRACE_LAYERS")]
    layers: PathBuf,
    /// Density profile samples CSV (depth_m,density_kgm3).
    #[arg(long, env = "ECHOTRACE_DENSITY")]
    density: PathBuf,
    /// Echogram meta JSON; defaults apply when omitted.
    #[arg(long, env = "ECHOTRACE_META")]
    meta: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ProfileModeArg::PiecewiseLinear, env = "ECHOTRACE_MODE")]
    mode: ProfileModeArg,
    #[arg(long, default_value_t = 1.0, env = "ECHOTRACE_YEARS_PER_LAYER")]
    years_per_layer: f64,
    /// Layer-tracing MAE in pixels; propagates an uncertainty per rate.
    #[arg(long, env = "ECHOTRACE_MAE_PX")]
    mae_px: Option<f64>,
    #[arg(long, env = "ECHOTRACE_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Evaluation report JSON.
    #[arg(long, env = "ECHOTRACE_EVAL")]
    eval: PathBuf,
    /// Echogram to draw in the image panel.
    #[arg(long, env = "ECHOTRACE_IMAGE")]
    image: PathBuf,
    /// Ground-truth layers CSV.
    #[arg(long, env = "ECHOTRACE_GT")]
    gt: PathBuf,
    /// Predicted layers CSV (optional overlay).
    #[arg(long, env = "ECHOTRACE_PRED")]
    pred: Option<PathBuf>,
    #[arg(long, env = "ECHOTRACE_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long, env = "ECHOTRACE_CHECKPOINT")]
    checkpoint: PathBuf,
    #[arg(long, env = "ECHOTRACE_MANIFEST")]
    manifest: PathBuf,
    /// Directory receiving preds/, nms/ and report.json.
    #[arg(long, env = "ECHOTRACE_OUT")]
    out: PathBuf,
    #[arg(long, default_value_t = 1, env = "ECHOTRACE_RADIUS")]
    radius: usize,
    #[arg(long, env = "ECHOTRACE_TOLERANCE")]
    tolerance: Option<f64>,
    #[arg(long, default_value_t = eval::DEFAULT_THRESHOLDS, env = "ECHOTRACE_THRESHOLDS")]
    thresholds: usize,
    #[arg(long, default_value_t = eval::DEFAULT_MIN_PIXELS, env = "ECHOTRACE_MIN_PIXELS")]
    min_pixels: usize,
    #[arg(long, default_value_t = 1, env = "ECHOTRACE_THREADS")]
    threads: usize,
}

#[derive(Args)]
struct DumpFiltersArgs {
    #[arg(long, value_parser = parse_wavelet, env = "ECHOTRACE_WAVELET")]
    wavelet: WaveletKind,
    /// Output path; stdout when omitted.
    #[arg(long, env = "ECHOTRACE_OUT")]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Nms(a) => cmd_nms(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Depth(a) => cmd_depth(&a),
        Command::Accum(a) => cmd_accum(&a),
        Command::Report(a) => cmd_report(&a),
        Command::Pipeline(a) => cmd_pipeline(&a),
        Command::Wavelet(WaveletCmd::DumpFilters(a)) => cmd_dump_filters(&a),
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let meta = Meta::default();
    meta.write(a.out.join("meta.json"))?;
    let mut entries = Vec::with_capacity(a.images);
    for i in 0..a.images {
        let params = SynthParams {
            seed: per_image_seed(a.seed, i),
            rows: a.rows,
            cols: a.cols,
            layer_count: a.layers,
            speckle: a.speckle,
            blur_sigma: a.blur,
            ..SynthParams::default()
        };
        let (image, layers): (Grid64, LayerSet) = data::synthesize(&params)?;
        let image_name = format!("img_{i:04}.egm");
        let layers_name = format!("img_{i:04}.csv");
        write_egm(a.out.join(&image_name), &image)?;
        layers.write_csv(a.out.join(&layers_name))?;
        entries.push(ManifestEntry {
            image: image_name,
            layers: layers_name,
            meta: Some("meta.json".into()),
        });
    }
    data::write_manifest(a.out.join("manifest.json"), &entries)?;
    println!("wrote {} echograms under {}", a.images, a.out.display());
    Ok(())
}

/// Spreads one master seed over the dataset; the odd multiplier keeps the
/// per-image streams distinct for every index.
fn per_image_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let items = training_items(&a.manifest, a.augment)?;
    let loss_log = a
        .loss_log
        .clone()
        .unwrap_or_else(|| a.out.with_extension("losses.json"));
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }

    let mut log: Vec<LossEntry> = Vec::new();
    let ckpt = if a.resume && a.out.exists() {
        let mut mid: Checkpoint<f64> = Checkpoint::load(&a.out)?;
        if let Some(epochs) = a.epochs {
            mid.train.epochs = epochs;
        }
        let (model_cfg, train_cfg) = (mid.model.clone(), mid.train.clone());
        train_loop(&model_cfg, &train_cfg, &items, &a.out, Some(mid), |e| log.push(*e))?
    } else {
        let model_cfg = ModelConfig::new(a.arch.into(), a.wavelet, a.width);
        let train_cfg = resolve_train_config(a);
        train_cfg.validate()?;
        train_loop(&model_cfg, &train_cfg, &items, &a.out, None, |e| log.push(*e))?
    };
    write_json(&loss_log, &log)?;

    let last = log.last().map(|e| e.loss);
    match last {
        Some(loss) => println!(
            "trained to epoch {} ({} iterations), last loss {loss:.6}; checkpoint {}",
            ckpt.epoch,
            ckpt.iteration,
            a.out.display()
        ),
        None => println!("nothing to do; checkpoint {}", a.out.display()),
    }
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> TrainConfig {
    let mut cfg = match a.preset {
        PresetArg::PaperFaithful => TrainConfig::paper_faithful(),
        PresetArg::DeskScale => TrainConfig::desk_scale(),
    };
    if let Some(epochs) = a.epochs {
        cfg.epochs = epochs;
    }
    if let Some(opt) = a.optimizer {
        cfg.optimizer = match opt {
            OptimizerArg::SgdMomentum => OptimizerKind::SgdMomentum,
            OptimizerArg::Adam => OptimizerKind::Adam,
        };
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    if let Some(momentum) = a.momentum {
        cfg.momentum = momentum;
    }
    if let Some(wd) = a.weight_decay {
        cfg.weight_decay = wd;
    }
    if let Some(batch) = a.batch_size {
        cfg.batch_size = batch;
    }
    if let Some(lambda) = a.lambda {
        cfg.lambda = lambda;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg
}

fn training_items(manifest: &Path, augment: bool) -> Result<Vec<(Grid64, Grid64)>> {
    let dataset: Vec<DatasetItem<f64>> = data::load_dataset(manifest)?;
    if dataset.is_empty() {
        bail!("manifest {} lists no entries", manifest.display());
    }
    let mut items = Vec::new();
    for item in &dataset {
        if augment {
            for (image, layers) in data::augment(&item.image, &item.layers)? {
                let shape = image.shape();
                let labels = layers.rasterize(shape.rows, shape.cols)?;
                items.push((image, labels));
            }
        } else {
            let shape = item.image.shape();
            let labels = item.layers.rasterize(shape.rows, shape.cols)?;
            items.push((item.image.clone(), labels));
        }
    }
    Ok(items)
}

fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let ckpt: Checkpoint<f64> = Checkpoint::load(&a.checkpoint)?;
    let dataset: Vec<DatasetItem<f64>> = data::load_dataset(&a.manifest)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    predict_files(&ckpt, &dataset, &a.out, a.threads)?;
    println!("wrote {} prediction maps under {}", dataset.len(), a.out.display());
    Ok(())
}

fn predict_files(
    ckpt: &Checkpoint<f64>,
    dataset: &[DatasetItem<f64>],
    out: &Path,
    threads: usize,
) -> Result<()> {
    thread_pool(threads)?.install(|| {
        dataset
            .par_iter()
            .enumerate()
            .try_for_each(|(i, item)| -> Result<()> {
                let mut model = Model::build(&ckpt.model, item.image.shape())?;
                let fused = model.forward(&item.image, &ckpt.params)?.fuse_activation;
                write_egm(pred_path(out, i), &fused)?;
                Ok(())
            })
    })
}

fn cmd_nms(a: &NmsArgs) -> Result<()> {
    let files = egm_files(&a.pred)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    nms_files(&files, &a.out, a.radius, a.threads)?;
    println!("thinned {} maps into {}", files.len(), a.out.display());
    Ok(())
}

fn nms_files(files: &[PathBuf], out: &Path, radius: usize, threads: usize) -> Result<()> {
    let cfg = NmsConfig { radius };
    cfg.validate()?;
    thread_pool(threads)?.install(|| {
        files.par_iter().try_for_each(|file| -> Result<()> {
            let map: Grid64 = read_egm(file)?;
            let thinned = nms_vertical(&map, cfg)?;
            let name = file.file_name().context("input file without a name")?;
            write_egm(out.join(name), &thinned)?;
            Ok(())
        })
    })
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let dataset: Vec<DatasetItem<f64>> = data::load_dataset(&a.manifest)?;
    let report = eval_report(&dataset, &a.pred, a.tolerance, a.thresholds)?;
    write_json(&a.out, &report)?;
    println!(
        "ODS F {:.4} at t {:.3}; OIS {:.4}; AP {:.4}; report {}",
        report.ods.f,
        report.ods.threshold,
        report.ois,
        report.ap,
        a.out.display()
    );
    Ok(())
}

fn eval_report(
    dataset: &[DatasetItem<f64>],
    pred_dir: &Path,
    tolerance: Option<f64>,
    thresholds: usize,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        bail!("manifest lists no entries");
    }
    let mut pairs = Vec::with_capacity(dataset.len());
    for (i, item) in dataset.iter().enumerate() {
        let pred: Grid64 = read_egm(pred_path(pred_dir, i))?;
        let shape = item.image.shape();
        if pred.shape() != shape {
            bail!(
                "{} is {}x{} but the echogram is {}x{}",
                pred_path(pred_dir, i).display(),
                pred.shape().rows,
                pred.shape().cols,
                shape.rows,
                shape.cols
            );
        }
        let gt = item.layers.rasterize(shape.rows, shape.cols)?;
        pairs.push((pred, gt));
    }
    let first = dataset[0].image.shape();
    let tol = tolerance.unwrap_or_else(|| eval::default_tolerance(first.rows, first.cols));
    let det = eval::evaluate_detections(&pairs, thresholds, tol)?;
    Ok(EvalReport::from_detections(det))
}

fn cmd_depth(a: &DepthArgs) -> Result<()> {
    let dataset: Vec<DatasetItem<f64>> = data::load_dataset(&a.manifest)?;
    let mut report: EvalReport = read_json(&a.report)?;
    merge_depth(&mut report, &dataset, &a.pred, a.min_pixels, a.layers_out.as_deref())?;
    write_json(&a.report, &report)?;
    match report.mae_overall {
        Some(mae) => println!(
            "layer MAE {mae:.3} px at t {:.3}, coverage {:.3}; merged into {}",
            report.ods.threshold,
            report.coverage.unwrap_or(0.0),
            a.report.display()
        ),
        None => println!(
            "no layer pairs shared columns; coverage {:.3}; merged into {}",
            report.coverage.unwrap_or(0.0),
            a.report.display()
        ),
    }
    Ok(())
}

/// Extracts layers from every prediction binarized at the report's ODS
/// threshold and merges the depth-error summary into the report. When
/// `layers_out` is given, the traced layers are also saved as CSVs.
fn merge_depth(
    report: &mut EvalReport,
    dataset: &[DatasetItem<f64>],
    pred_dir: &Path,
    min_pixels: usize,
    layers_out: Option<&Path>,
) -> Result<()> {
    if let Some(dir) = layers_out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let threshold = report.ods.threshold;
    let mut per_image = Vec::with_capacity(dataset.len());
    for (i, item) in dataset.iter().enumerate() {
        let pred: Grid64 = read_egm(pred_path(pred_dir, i))?;
        let mask = binarize(&pred, threshold);
        let traced = eval::mask_to_layers(&mask, min_pixels);
        if let Some(dir) = layers_out {
            traced.write_csv(dir.join(format!("pred_{i:04}.csv")))?;
        }
        per_image.push(eval::layer_mae(&traced, &item.layers, item.image.shape().cols));
    }
    let summary = eval::summarize_layer_mae(&per_image);
    report.merge_depth(&summary);
    Ok(())
}

fn cmd_accum(a: &AccumArgs) -> Result<()> {
    let layers = LayerSet::read_csv(&a.layers)?;
    let samples = accum::read_density_csv(&a.density)?;
    let mode = match a.mode {
        ProfileModeArg::PiecewiseLinear => accum::ProfileMode::PiecewiseLinear,
        ProfileModeArg::LinearFit => accum::ProfileMode::LinearFit,
    };
    let profile = accum::fit_density_profile(&samples, mode)?;
    let meta = match &a.meta {
        Some(path) => Meta::read(path)?,
        None => Meta::default(),
    };
    let report = accum::water_equivalent_rates(
        &layers,
        &profile,
        meta.meters_per_row,
        a.years_per_layer,
        a.mae_px,
    )?;
    write_json(&a.out, &report)?;
    println!(
        "{} layers, rates written to {}",
        report.layers.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let report: EvalReport = read_json(&a.eval)?;
    let image: Grid64 = read_egm(&a.image)?;
    let gt = LayerSet::read_csv(&a.gt)?;
    let pred = match &a.pred {
        Some(path) => Some(LayerSet::read_csv(path)?),
        None => None,
    };
    let svg = svg::render_report(&report, &image, &gt, pred.as_ref());
    fs::write(&a.out, svg).with_context(|| format!("writing {}", a.out.display()))?;
    println!("report rendered to {}", a.out.display());
    Ok(())
}

fn cmd_pipeline(a: &PipelineArgs) -> Result<()> {
    let ckpt: Checkpoint<f64> = Checkpoint::load(&a.checkpoint)?;
    let dataset: Vec<DatasetItem<f64>> = data::load_dataset(&a.manifest)?;
    let preds_dir = a.out.join("preds");
    let nms_dir = a.out.join("nms");
    fs::create_dir_all(&preds_dir).with_context(|| format!("creating {}", preds_dir.display()))?;
    fs::create_dir_all(&nms_dir).with_context(|| format!("creating {}", nms_dir.display()))?;

    predict_files(&ckpt, &dataset, &preds_dir, a.threads)?;
    let files = egm_files(&preds_dir)?;
    nms_files(&files, &nms_dir, a.radius, a.threads)?;
    let mut report = eval_report(&dataset, &nms_dir, a.tolerance, a.thresholds)?;
    let layers_dir = a.out.join("layers");
    merge_depth(&mut report, &dataset, &nms_dir, a.min_pixels, Some(&layers_dir))?;
    let report_path = a.out.join("report.json");
    write_json(&report_path, &report)?;

    println!(
        "ODS F {:.4} at t {:.3}; OIS {:.4}; AP {:.4}; layer MAE {} px; report {}",
        report.ods.f,
        report.ods.threshold,
        report.ois,
        report.ap,
        report
            .mae_overall
            .map_or_else(|| "n/a".into(), |m| format!("{m:.3}")),
        report_path.display()
    );
    Ok(())
}

fn cmd_dump_filters(a: &DumpFiltersArgs) -> Result<()> {
    #[derive(Serialize)]
    struct Taps {
        name: String,
        dec_lo: Vec<f64>,
        dec_hi: Vec<f64>,
        rec_lo: Vec<f64>,
        rec_hi: Vec<f64>,
    }
    let bank = FilterBank::new(a.wavelet);
    let taps = Taps {
        name: a.wavelet.name(),
        dec_lo: bank.dec_lo,
        dec_hi: bank.dec_hi,
        rec_lo: bank.rec_lo,
        rec_hi: bank.rec_hi,
    };
    match &a.out {
        Some(path) => write_json(path, &taps)?,
        None => {
            let mut text = serde_json::to_string_pretty(&taps)?;
            text.push('\n');
            // Tolerate a closed pipe (e.g. `... | head`) instead of panicking.
            use std::io::Write as _;
            if let Err(e) = std::io::stdout().write_all(text.as_bytes()) {
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return Err(e).context("writing to stdout");
                }
            }
        }
    }
    Ok(())
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .context("building the worker pool")
}

fn pred_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("pred_{index:04}.egm"))
}

/// All .egm files directly inside `dir`, sorted by name for stable ordering.
fn egm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries =
        fs::read_dir(dir).with_context(|| format!("reading directory {}", dir.display()))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "egm"))
        .collect();
    if files.is_empty() {
        bail!("no .egm files in {}", dir.display());
    }
    files.sort();
    Ok(files)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
