//! Command-line front end: `gen`, `train`, `detect` and `eval`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::assembler::{self, detect, DetectionResult, Detection, EpochLog, PreparedSample, TrainSample};
use crate::config::{RunConfig, KEYS};
use crate::error::{Result, RtnError};
use crate::evalbench::{compute_prf, match_detections};
use crate::geom::BBox;
use crate::gridmath::Grid;
use crate::model::RtnModel;
use crate::synthcorpus::{self, load_manifest, pgm, CorpusManifest};

#[derive(Debug, Parser)]
#[command(name = "rtn", version, about = "Vertical-proposal text detector: corpus generation, training, detection, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus of PGM images plus manifest.json
    Gen(GenArgs),
    /// Train stage one, stage two or both and write an RTNM model
    Train(TrainArgs),
    /// Detect text lines and write JSON (and optionally SVG)
    Detect(DetectArgs),
    /// Score detections against a manifest
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Number of images
    #[arg(long)]
    pub count: usize,
    /// Corpus seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (created if missing)
    #[arg(long)]
    pub out: PathBuf,
    /// key=value settings file (generator keys: noise, words_min, words_max)
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus manifest
    #[arg(long)]
    pub corpus: PathBuf,
    /// Which stage to run; stage 2 reads stage-one weights from --model
    #[arg(long, value_enum, default_value = "both")]
    pub stage: Stage,
    /// Epochs per stage [default: stage1_epochs / stage2_epochs from config, 20 / 10]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Model file to write (and, for stage 2, to read)
    #[arg(long)]
    pub model: PathBuf,
    /// key=value settings file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training seed [default: `seed` from config, 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Model file
    #[arg(long)]
    pub model: PathBuf,
    /// Single PGM image
    #[arg(long, conflicts_with = "corpus", required_unless_present = "corpus")]
    pub image: Option<PathBuf>,
    /// Run over every image of a manifest
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Text score threshold [default: `score_threshold` from config, 0.7]
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Detections output file
    #[arg(long)]
    pub json: PathBuf,
    /// SVG output: a file with --image, a directory with --corpus
    #[arg(long)]
    pub svg: Option<PathBuf>,
    /// Skip the x/w regression head (raw connected lines)
    #[arg(long)]
    pub no_regression: bool,
    /// key=value settings file
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Detections file written by `detect`
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth manifest
    #[arg(long)]
    pub gt: PathBuf,
    /// Match IoU threshold [default: `eval_iou` from config, 0.5]
    #[arg(long)]
    pub iou: Option<f64>,
    /// key=value settings file
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// One image's detections as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub path: String,
    pub detections: Vec<Detection>,
}

/// Failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<RtnError> for CliError {
    fn from(e: RtnError) -> Self {
        let code = match e {
            RtnError::Io { .. } | RtnError::Input(_) | RtnError::Ingestion { .. } | RtnError::ModelFormat(_) => 2,
            _ => 3,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn semantic(message: String) -> CliError {
    CliError { code: 3, message }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

pub fn config_help() -> String {
    let defaults = RunConfig::default();
    let mut s = String::from("Configuration keys (key=value, # comments):\n");
    for (k, d) in KEYS {
        let v = defaults.get(k).unwrap_or_default();
        let _ = writeln!(s, "  {k:<24} {d} [default: {v}]");
    }
    s
}

pub fn cmd_gen(args: &GenArgs) -> std::result::Result<(), CliError> {
    let cfg = load_config(args.config.as_deref())?;
    let manifest = synthcorpus::generate_corpus(&args.out, args.count, args.seed, &cfg.scene)?;
    println!("wrote {} images to {}", manifest.entries.len(), args.out.display());
    Ok(())
}

fn print_epoch(log: EpochLog) {
    println!("epoch {} loss {:.6}", log.epoch + 1, log.loss);
}

pub fn cmd_train(args: &TrainArgs) -> std::result::Result<(), CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(n) = args.epochs {
        cfg.train.stage1.epochs = n;
        cfg.train.stage2.epochs = n;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    let base = match args.stage {
        Stage::Two => {
            if !args.model.is_file() {
                return Err(semantic(format!(
                    "stage 2 needs stage-one weights, but {} does not exist",
                    args.model.display()
                )));
            }
            Some(RtnModel::load(&args.model, cfg.model.anchors.clone())?)
        }
        _ => None,
    };
    let samples = TrainSample::load_manifest(&args.corpus)?;
    if samples.is_empty() {
        return Err(semantic(format!("corpus {} has no entries", args.corpus.display())));
    }
    let data: Vec<PreparedSample> = crate::par::map(&samples, |s| {
        assembler::prepare_sample(s, &cfg.model.anchors, cfg.train.limits)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut model = match base {
        Some(m) => m,
        None => RtnModel::init(cfg.model.clone(), cfg.train.seed)?,
    };
    let mut log = |l: EpochLog| print_epoch(l);
    if matches!(args.stage, Stage::One | Stage::Both) {
        println!("stage 1");
        assembler::stage_one(&mut model, &data, &cfg.train, &mut log)?;
    }
    if matches!(args.stage, Stage::Two | Stage::Both) {
        println!("stage 2");
        assembler::stage_two(&mut model, &data, &cfg.train, &mut log)?;
    }
    model.save(&args.model)?;
    println!("saved {}", args.model.display());
    Ok(())
}

/// SVG with dashed thresholded proposals and one solid rectangle per final
/// detection, all in original image pixels.
pub fn render_svg(extent: (usize, usize), result: &DetectionResult) -> String {
    let (h, w) = extent;
    let mut s = format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    let rect = |s: &mut String, b: &BBox, style: &str| {
        let _ = writeln!(
            s,
            "  <rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" {style}/>",
            b.x0,
            b.y0,
            b.width(),
            b.height()
        );
    };
    let inv = 1.0 / result.factor;
    for p in &result.proposals {
        rect(&mut s, &p.bbox().scale(inv), "fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1\" stroke-dasharray=\"3,2\"");
    }
    for d in &result.detections {
        rect(&mut s, &d.bbox, "fill=\"none\" stroke=\"#d62728\" stroke-width=\"2\"");
    }
    s.push_str("</svg>\n");
    s
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| RtnError::io(path, e))
}

pub fn cmd_detect(args: &DetectArgs) -> std::result::Result<(), CliError> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(t) = args.threshold {
        cfg.detect.score_threshold = t;
    }
    if args.no_regression {
        cfg.detect.regression = false;
    }
    if !args.model.is_file() {
        return Err(CliError {
            code: 2,
            message: format!("model file {} not found", args.model.display()),
        });
    }
    let model = RtnModel::load(&args.model, cfg.model.anchors.clone())?;
    // (record path, image file, svg target)
    let jobs: Vec<(String, PathBuf, Option<PathBuf>)> = match (&args.image, &args.corpus) {
        (Some(img), _) => vec![(img.display().to_string(), img.clone(), args.svg.clone())],
        (None, Some(manifest_path)) => {
            let manifest = load_manifest(manifest_path)?;
            if let Some(dir) = &args.svg {
                fs::create_dir_all(dir).map_err(|e| RtnError::io(dir, e))?;
            }
            manifest
                .entries
                .iter()
                .map(|e| {
                    let svg = args.svg.as_ref().map(|d| d.join(Path::new(&e.path).with_extension("svg").file_name().unwrap_or_default()));
                    (e.path.clone(), CorpusManifest::image_path(manifest_path, e), svg)
                })
                .collect()
        }
        (None, None) => return Err(semantic("either --image or --corpus is required".into())),
    };
    let results = crate::par::map(&jobs, |(path, file, svg)| -> Result<DetectionRecord> {
        let image: Grid = pgm::read_grid(file)?;
        let result = detect(&image, &model, &cfg.detect)?;
        if let Some(svg) = svg {
            let (_, _, h, w) = image.dims4()?;
            write_file(svg, &render_svg((h, w), &result))?;
        }
        Ok(DetectionRecord {
            path: path.clone(),
            detections: result.detections,
        })
    });
    let records: Vec<DetectionRecord> = results.into_iter().collect::<Result<_>>()?;
    let total: usize = records.iter().map(|r| r.detections.len()).sum();
    let mut text = serde_json::to_string_pretty(&records).map_err(|e| RtnError::Input(e.to_string()))?;
    text.push('\n');
    write_file(&args.json, &text)?;
    println!("{} detections in {} images", total, records.len());
    Ok(())
}

pub fn load_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| RtnError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| RtnError::Input(format!("{}: malformed detections: {e}", path.display())))
}

pub fn cmd_eval(args: &EvalArgs) -> std::result::Result<(), CliError> {
    let cfg = load_config(args.config.as_deref())?;
    let iou = args.iou.unwrap_or(cfg.eval_iou);
    let preds = load_detections(&args.pred)?;
    let manifest = load_manifest(&args.gt)?;
    let gt_paths: HashSet<&str> = manifest.entries.iter().map(|e| e.path.as_str()).collect();
    let pred_paths: HashSet<&str> = preds.iter().map(|r| r.path.as_str()).collect();
    if let Some(missing) = manifest.entries.iter().find(|e| !pred_paths.contains(e.path.as_str())) {
        return Err(semantic(format!("image set mismatch: `{}` has no detection record", missing.path)));
    }
    if let Some(extra) = preds.iter().find(|r| !gt_paths.contains(r.path.as_str())) {
        return Err(semantic(format!("image set mismatch: `{}` is not in the ground truth", extra.path)));
    }
    let per_image: Vec<_> = manifest
        .entries
        .iter()
        .map(|e| {
            let dets = &preds.iter().find(|r| r.path == e.path).expect("checked above").detections;
            let gts: Vec<BBox> = e.annotations().iter().map(|w| w.bbox()).collect();
            match_detections(dets, &gts, iou)
        })
        .collect();
    print!("{}", compute_prf(&per_image).to_text());
    Ok(())
}

/// Runs the parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}
