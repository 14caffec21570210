//! The `efh` command line: `detect`, `train` and `bench`.
//!
//! Every input is read and validated before any output file is written, so
//! a failed invocation (exit 2) leaves no partial results behind.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::backbone::Image;
use crate::bench::{emit_report, run_bench, BenchInput, ReportFormat, DEFAULT_ITERS, DEFAULT_WARMUP};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Detector;
use crate::textenc::LanguageCache;
use crate::training::tasks::FALLBACK_PROMPT;
use crate::training::trainer::{data_threads, evaluate, synthetic_examples, Example, Trainer};

/// Canvas side of generated training scenes.
pub const SYNTHETIC_CANVAS: usize = 64;

#[derive(Debug, Parser)]
#[command(name = "efh", version, about = "Open-vocabulary detection with an efficient fusion head")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Detect labelled objects in one or more images.
    Detect(DetectArgs),
    /// Train a detector and write a checkpoint.
    Train(TrainArgs),
    /// Time the four inference stages.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// JSON model config; defaults are used when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to load; a freshly initialized model is used when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Image file (binary PPM or TNSR); repeatable.
    #[arg(long)]
    pub image: Vec<PathBuf>,
    /// Directory of images, read in name order.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Comma-separated label names.
    #[arg(long)]
    pub labels: String,
    #[arg(long, default_value = FALLBACK_PROMPT)]
    pub prompt: String,
    #[arg(long, value_enum, default_value = "on")]
    pub cache: Switch,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub input: InputArgs,
    /// Output directory, one `<image stem>.json` per image; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Starting checkpoint; training starts from initialization when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `synthetic` or a JSON-lines sample file.
    #[arg(long, default_value = "synthetic")]
    pub dataset: String,
    /// Number of generated scenes for the synthetic dataset.
    #[arg(long, default_value_t = 100)]
    pub scenes: usize,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics log (JSON lines); stdout when absent.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Append a final AP@0.5 evaluation on the training data.
    #[arg(long)]
    pub eval: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value_t = DEFAULT_ITERS)]
    pub iters: usize,
    #[arg(long, default_value_t = DEFAULT_WARMUP)]
    pub warmup: usize,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "json")]
    pub format: String,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("efh: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Detect(a) => detect(a),
        Command::Train(a) => train(a),
        Command::Bench(a) => bench(a),
    }
}

fn load_model(args: &ModelArgs) -> Result<Detector<f32>> {
    let cfg = match &args.config {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::default(),
    };
    let mut model = Detector::new(cfg)?;
    if let Some(p) = &args.checkpoint {
        model.load_checkpoint(p)?;
    }
    Ok(model)
}

fn parse_labels(s: &str) -> Result<Vec<String>> {
    let labels: Vec<String> = s.split(',').map(|l| l.trim().to_string()).collect();
    if labels.iter().any(|l| l.is_empty()) {
        return Err(Error::arg(format!("label list `{s}` is empty or has an empty entry")));
    }
    Ok(labels)
}

fn is_image_file(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "tnsr"))
}

fn load_images(input: &InputArgs) -> Result<Vec<(PathBuf, Image<f32>)>> {
    let mut paths = input.image.clone();
    if let Some(dir) = &input.images {
        let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        found.sort();
        if found.is_empty() {
            return Err(Error::arg(format!("no .ppm or .tnsr images in {}", dir.display())));
        }
        paths.extend(found);
    }
    if paths.is_empty() {
        return Err(Error::arg("no input images; pass --image or --images"));
    }
    paths
        .into_iter()
        .map(|p| Image::load(&p).map(|img| (p, img)))
        .collect()
}

fn validate_prompt(prompt: &str) -> Result<()> {
    if prompt.trim().is_empty() {
        return Err(Error::arg("prompt is empty"));
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn detect(a: DetectArgs) -> Result<()> {
    let labels = parse_labels(&a.input.labels)?;
    validate_prompt(&a.input.prompt)?;
    let model = load_model(&a.model)?;
    let images = load_images(&a.input)?;
    let cache = match a.input.cache {
        Switch::On => Some(LanguageCache::new(labels.len() + 1)?),
        Switch::Off => None,
    };
    let mut outputs = Vec::with_capacity(images.len());
    for (path, image) in &images {
        let id = path.display().to_string();
        let set = model.detect(image, &id, &labels, &a.input.prompt, cache.as_ref())?;
        outputs.push((path, set.to_json()));
    }
    match &a.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            for (path, json) in outputs {
                let stem = path.file_stem().map_or("image".into(), |s| s.to_string_lossy());
                write_file(&dir.join(format!("{stem}.json")), &json)?;
            }
        }
        None => {
            let mut out = std::io::stdout().lock();
            for (_, json) in outputs {
                out.write_all(json.as_bytes()).map_err(|e| Error::io("<stdout>", e))?;
            }
        }
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let data: Vec<Example<f32>> = if a.dataset == "synthetic" {
        let seeds: Vec<u64> = (0..a.scenes as u64).map(|i| cfg.seed.wrapping_mul(1_000_003).wrapping_add(i)).collect();
        synthetic_examples(&seeds, SYNTHETIC_CANVAS, cfg.max_text_len - 1, data_threads())?
    } else {
        Example::load_jsonl(&a.dataset)?
    };
    if data.is_empty() {
        return Err(Error::arg("dataset is empty"));
    }
    let mut model = Detector::<f32>::new(cfg)?;
    if let Some(p) = &a.checkpoint {
        model.load_checkpoint(p)?;
    }
    let mut metrics: Box<dyn Write> = match &a.metrics {
        Some(p) => Box::new(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => Box::new(std::io::stdout()),
    };
    let metrics_path = a.metrics.clone().unwrap_or_else(|| "<stdout>".into());
    let log_every = model.cfg.train.log_every.max(1);
    let mut trainer = Trainer::new(model, a.steps);
    let mut log_err = None;
    let outcome = trainer.run(&data, |r| {
        if (r.step + 1) % log_every == 0 || r.step + 1 == a.steps {
            let line = serde_json::to_string(r).expect("step records serialize");
            if let Err(e) = writeln!(metrics, "{line}") {
                log_err.get_or_insert(e);
            }
        }
    });
    // The trainer never applies an update from a diverged step, so the
    // parameters it holds are the last good ones.
    trainer.model.save_checkpoint(&a.out)?;
    outcome?;
    if let Some(e) = log_err {
        return Err(Error::io(&metrics_path, e));
    }
    if a.eval {
        let report = evaluate(&trainer.model, &data, 0.5)?;
        let line = json!({"step": trainer.step_index(), "ap@0.5": report.mean, "per_label": report.per_label});
        writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
    }
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))
}

fn bench(a: BenchArgs) -> Result<()> {
    let labels = parse_labels(&a.input.labels)?;
    validate_prompt(&a.input.prompt)?;
    let format: ReportFormat = a.format.parse()?;
    let model = load_model(&a.model)?;
    let images = load_images(&a.input)?;
    let input = BenchInput {
        images: images.into_iter().map(|(p, i)| (p.display().to_string(), i)).collect(),
        labels,
        prompt: a.input.prompt.clone(),
    };
    let timings = run_bench(&model, &input, a.input.cache == Switch::On, a.warmup, a.iters)?;
    match &a.out {
        Some(p) => emit_report(&timings, format, p),
        None => {
            let text = match format {
                ReportFormat::Json => timings.to_json()?,
                ReportFormat::Csv => timings.to_csv(),
            };
            print!("{text}");
            Ok(())
        }
    }
}
