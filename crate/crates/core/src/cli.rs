//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::backbone::{build_model, count_params, ModelParams, Role, Segmenter};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::image::{
    build_xylab, draw_overlay, load_dataset, load_image, save_dataset, save_gray_png, save_label_pgm16,
    save_mask_png, save_png, BinaryMask, ImageError, Overlay,
};
use crate::metrics::MetricReport;
use crate::prompting::AblationVariant;
use crate::superpixel;
use crate::train::{self, SynthConfig};

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "PROMPTPIX_THREADS";

#[derive(Debug, Parser)]
#[command(name = "promptpix", version, about = "Prompt-tuned frozen transformer segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Soft-SLIC superpixels of one image.
    Superpixel(SuperpixelArgs),
    /// Train the tunable parameters on a dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Predict one image.
    Infer(InferArgs),
    /// Write a synthetic blob dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct SuperpixelArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub m: usize,
    #[arg(long, default_value_t = superpixel::DEFAULT_ITERS)]
    pub iters: usize,
    #[arg(long, default_value_t = superpixel::DEFAULT_TEMP)]
    pub temp: f64,
    #[arg(long, default_value_t = 1.0)]
    pub pos_scale: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat JSON config; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out set scored after training.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train every ablation variant into its own subdirectory.
    #[arg(long)]
    pub sweep: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Architecture override; must match the checkpoint tensors.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write an all-background sample instead of blobs.
    #[arg(long)]
    pub background: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit code for an error: 2 for usage and configuration problems,
/// 1 for I/O and runtime failures.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::InvalidCount { .. } | Error::Incompatible(_) => 2,
        _ => 1,
    }
}

/// Parses `args` and runs the command, printing errors to stderr.
pub fn run_from<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Superpixel(a) => cmd_superpixel(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Infer(a) => cmd_infer(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

/// Creates a fresh run directory; an existing path is an error.
fn create_out(path: &Path) -> Result<()> {
    if path.exists() {
        return Err(Error::config("out", format!("{} already exists", path.display())));
    }
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            RunConfig::from_json(&text)
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: serde_json::Value,
    seed: u64,
    checkpoint: Option<String>,
    reports: Vec<String>,
    timings_seconds: serde_json::Map<String, serde_json::Value>,
}

fn write_manifest(dir: &Path, manifest: &Manifest<'_>) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).expect("serializable");
    write(&dir.join("manifest.json"), text)
}

fn config_value(cfg: &RunConfig) -> serde_json::Value {
    serde_json::from_str(&cfg.to_json()).expect("valid json")
}

pub fn cmd_superpixel(a: &SuperpixelArgs) -> Result<()> {
    let img = load_image(&a.image)?;
    if a.iters == 0 {
        return Err(Error::config("iters", "must be at least 1"));
    }
    if !(a.temp > 0.0 && a.temp.is_finite()) {
        return Err(Error::config("temp", "must be positive"));
    }
    let feats = build_xylab(&img, a.pos_scale).map_err(|e| match e {
        ImageError::Dimensions(reason) => Error::config("pos_scale", reason),
        other => other.into(),
    })?;
    let (assoc, centers) = superpixel::iterate(&feats, a.m, a.iters, a.temp)?;
    let labels = superpixel::hard_assign(&feats, &centers).labels;
    create_out(&a.out)?;
    save_label_pgm16(img.height, img.width, &labels, a.out.join("labels.pgm"))?;
    save_png(&draw_overlay(&img, Overlay::Labels(&labels))?, a.out.join("overlay.png"))?;
    let mut used: Vec<usize> = labels.clone();
    used.sort_unstable();
    used.dedup();
    let diag = json!({
        "m": a.m,
        "iters": a.iters,
        "temp": a.temp,
        "max_column_sum_error": assoc.column_sum_error(),
        "labels_used": used.len(),
    });
    write(&a.out.join("diagnostics.json"), serde_json::to_string_pretty(&diag).expect("json"))
}

fn train_one(
    cfg: &RunConfig,
    data: &[crate::image::Sample],
    eval_data: Option<&[crate::image::Sample]>,
    out: &Path,
) -> Result<MetricReport> {
    let started = Instant::now();
    create_out(out)?;
    write(&out.join("config.json"), cfg.to_json())?;
    let model = Segmenter::new(cfg.backbone.clone())?;
    let mut params = build_model(&cfg.backbone)?;
    let report = train::train(&model, &mut params, data, &cfg.train, |epoch, loss| {
        eprintln!("epoch {:>3}  loss {loss:.6}", epoch + 1);
    })?;
    let train_secs = started.elapsed().as_secs_f64();
    checkpoint::save(out.join("checkpoint.bin"), cfg, &params)?;
    write(&out.join("loss.csv"), train::loss_csv(&report.epoch_losses))?;
    let mut reports = vec!["loss.csv".to_string()];
    let mut timings = serde_json::Map::new();
    timings.insert("train".into(), json!(train_secs));
    let mut summary = MetricReport::default();
    if let Some(eval) = eval_data {
        let t = Instant::now();
        let per_sample = with_eval_threads(|| train::evaluate_dataset(&model, &params, eval))??;
        summary = MetricReport::mean(&per_sample);
        let names: Vec<String> = eval.iter().map(|s| s.name.clone()).collect();
        write(&out.join("metrics.csv"), train::metrics_csv(&names, &per_sample))?;
        write(&out.join("metrics.json"), metrics_json(&names, &per_sample))?;
        reports.extend(["metrics.csv".to_string(), "metrics.json".to_string()]);
        timings.insert("eval".into(), json!(t.elapsed().as_secs_f64()));
    }
    write_manifest(
        out,
        &Manifest {
            command: "train",
            config: config_value(cfg),
            seed: cfg.backbone.seed,
            checkpoint: Some("checkpoint.bin".into()),
            reports,
            timings_seconds: timings,
        },
    )?;
    Ok(summary)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = read_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg = cfg.with_seed(seed);
    }
    let data = load_dataset(&a.data)?;
    if data.is_empty() {
        return Err(Error::Training(format!("no samples in {}", a.data.display())));
    }
    let eval = a.eval_data.as_ref().map(load_dataset).transpose()?;
    if !a.sweep {
        train_one(&cfg, &data, eval.as_deref(), &a.out)?;
        return Ok(());
    }
    create_out(&a.out)?;
    let mut rows = Vec::new();
    for variant in AblationVariant::ALL {
        let mut v = cfg.clone();
        v.backbone.ablation_variant = variant;
        eprintln!("variant {variant}");
        let summary = train_one(&v, &data, eval.as_deref(), &a.out.join(variant.name()))?;
        let params = build_model(&v.backbone)?;
        let tunable = count_params(&params, &params.names(Role::Tunable));
        rows.push((variant, tunable, summary));
    }
    let mut csv = format!("variant,tunable_params,{}\n", MetricReport::FIELDS.join(","));
    for (v, n, r) in &rows {
        let vals: Vec<String> = r.values().iter().map(|x| format!("{x:.6}")).collect();
        csv.push_str(&format!("{v},{n},{}\n", vals.join(",")));
    }
    write(&a.out.join("ablation.csv"), csv)
}

fn metrics_json(names: &[String], reports: &[MetricReport]) -> String {
    let samples: Vec<_> = names
        .iter()
        .zip(reports)
        .map(|(n, r)| json!({"sample": n, "metrics": r}))
        .collect();
    let value = json!({"summary": MetricReport::mean(reports), "samples": samples});
    serde_json::to_string_pretty(&value).expect("json")
}

/// Runs `f` on a pool capped by [`THREADS_ENV`] when it is set.
fn with_eval_threads<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(f());
    };
    let threads: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(THREADS_ENV, format!("expected a positive integer, got `{raw}`")))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Training(e.to_string()))?;
    Ok(pool.install(f))
}

fn load_model(checkpoint_path: &Path, config: Option<&Path>) -> Result<(RunConfig, ModelParams)> {
    let (mut cfg, params) = checkpoint::load(checkpoint_path)?;
    if let Some(path) = config {
        cfg = read_config(Some(path))?;
        checkpoint::check_compatible(&cfg, &params)?;
    }
    Ok((cfg, params))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let started = Instant::now();
    let (cfg, params) = load_model(&a.checkpoint, a.config.as_deref())?;
    let data = load_dataset(&a.data)?;
    let model = Segmenter::new(cfg.backbone.clone())?;
    let per_sample = with_eval_threads(|| train::evaluate_dataset(&model, &params, &data))??;
    create_out(&a.out)?;
    let names: Vec<String> = data.iter().map(|s| s.name.clone()).collect();
    write(&a.out.join("metrics.csv"), train::metrics_csv(&names, &per_sample))?;
    write(&a.out.join("metrics.json"), metrics_json(&names, &per_sample))?;
    let mut timings = serde_json::Map::new();
    timings.insert("eval".into(), json!(started.elapsed().as_secs_f64()));
    write_manifest(
        &a.out,
        &Manifest {
            command: "eval",
            config: config_value(&cfg),
            seed: cfg.backbone.seed,
            checkpoint: Some(a.checkpoint.display().to_string()),
            reports: vec!["metrics.csv".into(), "metrics.json".into()],
            timings_seconds: timings,
        },
    )
}

pub fn cmd_infer(a: &InferArgs) -> Result<()> {
    let (cfg, params) = load_model(&a.checkpoint, a.config.as_deref())?;
    let img = load_image(&a.image)?;
    let model = Segmenter::new(cfg.backbone.clone())?;
    let prob = model.predict(&params, &img)?;
    create_out(&a.out)?;
    let gray: Vec<u8> = prob.iter().map(|&p| (p * 255.0).round() as u8).collect();
    save_gray_png(img.height, img.width, &gray, a.out.join("prob.png"))?;
    let bits = prob.iter().map(|&p| u8::from(p >= crate::metrics::THRESHOLD)).collect();
    let mask = BinaryMask::new(img.height, img.width, bits)?;
    save_mask_png(&mask, a.out.join("mask.png"))?;
    save_png(&draw_overlay(&img, Overlay::Mask(&mask))?, a.out.join("overlay.png"))?;
    let summary = json!({
        "foreground_fraction": mask.foreground_fraction(),
        "mean_probability": prob.iter().sum::<f64>() / prob.len() as f64,
    });
    write(&a.out.join("summary.json"), serde_json::to_string_pretty(&summary).expect("json"))
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        height: a.height,
        width: a.width,
        ..Default::default()
    };
    let samples = if a.background {
        if a.height == 0 || a.width == 0 {
            return Err(Error::config("size", "height and width must be positive"));
        }
        vec![train::synth_background(&cfg, a.seed)]
    } else {
        train::synth_dataset(a.n, &cfg, a.seed)?
    };
    create_out(&a.out)?;
    save_dataset(&a.out, &samples)?;
    Ok(())
}
