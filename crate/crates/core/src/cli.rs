//! Command-line front end: `gen`, `train`, `predict`, `eval`, `render`.
//!
//! Every output is a pure function of the flags and input files, and is
//! written through a temporary file that is renamed into place.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use thiserror::Error;

use crate::layoutmodel::{
    evaluate_losses, load_checkpoint, rasterize_mask, save_checkpoint, train, Architecture, Checkpoint, Mode,
    ModelError, TrainConfig,
};
use crate::metrics::{evaluate, MetricError, DEFAULT_TAUS};
use crate::scenegraph::{Dataset, SceneError};
use crate::synthdata::{generate_dataset, EdgeBudget, GenError, GeneratorConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Data { path: PathBuf, source: SceneError },
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Parser)]
#[command(
    name = "vrlayout",
    version,
    about = "Scene-graph to layout: generate, train, predict, evaluate, render"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with consistent ground-truth boxes.
    Gen(GenArgs),
    /// Train a layout model and write a checkpoint.
    Train(TrainArgs),
    /// Write a copy of a dataset whose boxes are the model's refined boxes.
    Predict(PredictArgs),
    /// Compare predicted boxes against ground truth.
    Eval(EvalArgs),
    /// Draw one scene's boxes as a PPM image.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 300)]
    pub scenes: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub min_entities: usize,
    #[arg(long, default_value_t = 5)]
    pub max_entities: usize,
    #[arg(long, default_value_t = 10)]
    pub categories: usize,
    #[arg(long, default_value_t = 0.1)]
    pub min_side: f64,
    #[arg(long, default_value_t = 0.5)]
    pub max_side: f64,
    /// Edges per scene, or "all" for one edge per entity pair.
    #[arg(long, default_value = "4", value_parser = parse_budget)]
    pub edges: EdgeBudget,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out dataset; its RS is recorded after every epoch.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_rel: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_box: f64,
    #[arg(long, default_value = "full")]
    pub mode: Mode,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = Architecture::default().gcn_layers)]
    pub gcn_layers: usize,
    #[arg(long, default_value_t = Architecture::default().gcn_hidden)]
    pub gcn_hidden: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write the per-epoch loss history (JSON).
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the mode stored in the checkpoint.
    #[arg(long)]
    pub mode: Option<Mode>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,0.7,0.9", value_parser = parse_tau)]
    pub tau: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub scene: usize,
    #[arg(long, default_value_t = 256, value_parser = clap::value_parser!(u32).range(1..=16384))]
    pub size: u32,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_budget(s: &str) -> Result<EdgeBudget, String> {
    if s == "all" {
        return Ok(EdgeBudget::AllConsistent);
    }
    s.parse()
        .map(EdgeBudget::Count)
        .map_err(|_| format!("expected an edge count or \"all\", got {s:?}"))
}

fn parse_tau(s: &str) -> Result<f64, String> {
    match s.trim().parse::<f64>() {
        Ok(t) if t > 0.0 && t <= 1.0 => Ok(t),
        _ => Err(format!("threshold must be a number in (0, 1], got {s:?}")),
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "output path has no file name"))?;
    let mut tmp_name = OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })
}

fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_owned(),
        source,
    })?;
    Dataset::from_json(&text).map_err(|source| CliError::Data {
        path: path.to_owned(),
        source,
    })
}

fn cmd_gen(a: &GenArgs) -> Result<(), CliError> {
    let config = GeneratorConfig {
        num_scenes: a.scenes,
        min_entities: a.min_entities,
        max_entities: a.max_entities,
        num_categories: a.categories,
        seed: a.seed,
        min_box_side: a.min_side,
        max_box_side: a.max_side,
        edges_per_scene: a.edges,
    };
    let data = generate_dataset(&config)?;
    write_file(&a.out, data.to_json().as_bytes())?;
    let edges: usize = data.scenes.iter().map(|s| s.graph.edges.len()).sum();
    println!(
        "wrote {} scenes, {} edges to {}",
        data.scenes.len(),
        edges,
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let data = read_dataset(&a.data)?;
    let val = a.val.as_deref().map(read_dataset).transpose()?;
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        lr: a.lr,
        seed: a.seed,
        lambda_rel: a.lambda_rel,
        lambda_box: a.lambda_box,
        mode: a.mode,
        arch: Architecture {
            gcn_layers: a.gcn_layers,
            gcn_hidden: a.gcn_hidden,
            ..Architecture::default()
        },
    };
    config.validate()?;
    let (params, history) = train(&data, val.as_ref(), &config)?;
    let checkpoint = Checkpoint::new(data.vocab.clone(), config, params)?;
    save_checkpoint(&a.out, &checkpoint).map_err(|source| CliError::Io {
        path: a.out.clone(),
        source,
    })?;
    if let Some(path) = &a.history {
        let doc = json!({ "mode": config.mode, "epochs": history });
        let text = serde_json::to_string_pretty(&doc).expect("history serializes") + "\n";
        write_file(path, text.as_bytes())?;
    }
    if !data.scenes.is_empty() {
        let fin = evaluate_losses(&checkpoint.params, &data, &config)?;
        println!(
            "trained {} epochs ({}): rel_loss {:.6}, box_loss {:.6}",
            config.epochs, config.mode, fin.rel_loss, fin.box_loss
        );
    }
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> Result<(), CliError> {
    let checkpoint = load_checkpoint(&a.ckpt)?;
    let data = read_dataset(&a.data)?;
    let mut model = checkpoint.model()?;
    if let Some(mode) = a.mode {
        model.mode = mode;
    }
    let pred = model.predict(&data)?;
    write_file(&a.out, pred.to_json().as_bytes())?;
    println!("wrote {} predicted scenes to {}", pred.scenes.len(), a.out.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let pred = read_dataset(&a.pred)?;
    let gt = read_dataset(&a.gt)?;
    if pred.vocab != gt.vocab {
        return Err(CliError::Other(
            "prediction and ground truth use different vocabularies".into(),
        ));
    }
    let taus = if a.tau.is_empty() {
        DEFAULT_TAUS.to_vec()
    } else {
        a.tau.clone()
    };
    let report = evaluate(&pred, &gt, &taus)?;
    let text = report.to_json() + "\n";
    print!("{text}");
    if let Some(path) = &a.out {
        write_file(path, text.as_bytes())?;
    }
    Ok(())
}

/// RGB of category `index`: HSV with hue `(47·index) mod 360`, s 0.8, v 0.9.
pub fn category_color(index: usize) -> [u8; 3] {
    let h = ((index as u64 * 47) % 360) as f64;
    let (s, v) = (0.8, 0.9);
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r, g, b].map(|u| ((u + m) * 255.0).round_ties_even() as u8)
}

/// P6 image of one scene: white background, each entity's box filled with
/// its category color at 50% opacity, drawn in entity order.
pub fn render_scene(data: &Dataset, scene: usize, size: usize) -> Result<Vec<u8>, CliError> {
    let s = data.scenes.get(scene).ok_or_else(|| {
        CliError::Other(format!(
            "scene index {scene} out of range ({} scenes)",
            data.scenes.len()
        ))
    })?;
    let boxes = s
        .gt_boxes
        .as_ref()
        .ok_or_else(|| CliError::Other(format!("scene {scene} has no boxes to render")))?;
    let mut canvas = vec![255.0f64; size * size * 3];
    for (b, &cat) in boxes.iter().zip(&s.graph.entities) {
        let color = category_color(cat).map(f64::from);
        let mask = rasterize_mask(b, size);
        for (i, _) in mask.cells.iter().enumerate().filter(|(_, on)| **on) {
            for (ch, col) in canvas[3 * i..3 * i + 3].iter_mut().zip(color) {
                *ch = 0.5 * col + 0.5 * *ch;
            }
        }
    }
    let mut out = format!("P6\n{size} {size}\n255\n").into_bytes();
    out.extend(canvas.iter().map(|v| v.round_ties_even() as u8));
    Ok(out)
}

fn cmd_render(a: &RenderArgs) -> Result<(), CliError> {
    let data = read_dataset(&a.data)?;
    let image = render_scene(&data, a.scene, a.size as usize)?;
    write_file(&a.out, &image)?;
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Render(a) => cmd_render(a),
    }
}

/// Parses `args` and runs the command; returns the process exit code
/// (0 success, 1 runtime error, 2 usage error).
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
