//! `sasp` command-line tool.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 data-format error,
//! 4 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use sasp::config::RunConfig;
use sasp::dtoc::{dtoc_convergence, dtoc_forward, ConvergenceEntry, InterpGrid};
use sasp::embed::{project_seg, similarity, PatchGeometry, SegEmbedding, SimilarityMap, TokenGrid};
use sasp::io::{self, GrayImage};
use sasp::metrics::{evaluate, grid_search_threshold, IoUReport, PixelScores};
use sasp::select::{select_points, PointLabel};
use sasp::train::{train_toy, TrainTrace};
use sasp::{fixtures, plot, Exec, SaspError};

#[derive(Debug, Parser)]
#[command(name = "sasp", version, about = "Similarity maps as point prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Inputs {
    /// Embedding dump (SASPEMB1).
    #[arg(long)]
    emb: PathBuf,
    /// Optional projection weights (SASPMLP1) applied to the seg embedding.
    #[arg(long)]
    mlp: Option<PathBuf>,
}

/// Flags mirror the config-file keys; flags win over `--config` values.
#[derive(Debug, Args, Default)]
struct RunFlags {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    max_points: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    include_neutral: Option<bool>,
    #[arg(long)]
    stride: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    sigma_mask: Option<f64>,
    #[arg(long)]
    lambda_txt: Option<f64>,
    #[arg(long)]
    lambda_mask: Option<f64>,
    #[arg(long)]
    lambda_bce: Option<f64>,
    #[arg(long)]
    lambda_dice: Option<f64>,
    #[arg(long)]
    threshold_step: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    activation: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Similarity map as JSON plus a PGM heatmap.
    Simmap {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Select labelled points, optionally interpolated to continuous coordinates.
    Points {
        #[command(flatten)]
        inputs: Inputs,
        /// Replace the patch centres with interpolated coordinates.
        #[arg(long)]
        dtoc: bool,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Per-image optimal binarization threshold against a ground-truth mask.
    Sweep {
        #[command(flatten)]
        inputs: Inputs,
        /// Ground-truth mask (PGM, 0/255).
        #[arg(long)]
        gt: PathBuf,
        #[command(flatten)]
        run: RunFlags,
    },
    /// gIoU and cIoU over prediction/ground-truth directories paired by file name.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Toy gradient-descent run on the offset-blob scene.
    Train {
        #[command(flatten)]
        run: RunFlags,
    },
    /// Interpolated coordinates at a sequence of grid strides.
    Convergence {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_delimiter = ',', default_value = "8,4,2,1")]
        strides: Vec<f64>,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Render a training trace as a PPM loss curve.
    Plot {
        #[arg(long)]
        trace: PathBuf,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Write the bundled example inputs.
    Fixture {
        #[command(flatten)]
        run: RunFlags,
    },
}

/// An error plus the process exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, message: impl std::fmt::Display + Send + Sync + 'static) -> Self {
        Self {
            code,
            error: anyhow!("{message}"),
        }
    }
}

fn exit_code(e: &SaspError) -> u8 {
    match e {
        SaspError::InvalidArgument(_) => 2,
        SaspError::Format { .. } | SaspError::Shape { .. } | SaspError::Index { .. } | SaspError::Io(_) => 3,
        SaspError::NonFinite(_) | SaspError::Divergence { .. } | SaspError::MissingTape => 4,
    }
}

impl From<SaspError> for Failure {
    fn from(e: SaspError) -> Self {
        Self {
            code: exit_code(&e),
            error: e.into(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Attach an exit code to any error convertible into `anyhow::Error`.
trait ExitWith<T> {
    fn exit_with(self, code: u8) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> ExitWith<T> for std::result::Result<T, E> {
    fn exit_with(self, code: u8) -> CliResult<T> {
        self.map_err(|e| Failure { code, error: e.into() })
    }
}

fn resolve(run: &RunFlags) -> CliResult<RunConfig> {
    let file = match &run.config {
        Some(p) => RunConfig::load(p)
            .with_context(|| format!("config {}", p.display()))
            .exit_with(2)?,
        None => RunConfig::default(),
    };
    let flags = RunConfig {
        epsilon: run.epsilon,
        max_points: run.max_points,
        include_neutral: run.include_neutral,
        stride: run.stride,
        tau: run.tau,
        sigma_mask: run.sigma_mask,
        lambda_txt: run.lambda_txt,
        lambda_mask: run.lambda_mask,
        lambda_bce: run.lambda_bce,
        lambda_dice: run.lambda_dice,
        threshold_step: run.threshold_step,
        out_dir: run.out_dir.clone(),
        seed: run.seed,
        steps: run.steps,
        lr: run.lr,
        activation: run.activation.as_deref().map(str::parse).transpose().exit_with(2)?,
    };
    let cfg = file.merge(&flags);
    cfg.validate().exit_with(2)?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> CliResult<PathBuf> {
    let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .exit_with(2)?;
    Ok(dir)
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes)
        .with_context(|| format!("cannot write {}", path.display()))
        .exit_with(2)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("artifacts serialize");
    text.push('\n');
    write(path, text.as_bytes())
}

fn read_input<T>(path: &Path, f: impl FnOnce(&Path) -> sasp::Result<T>) -> CliResult<T> {
    f(path).map_err(|e| Failure {
        code: exit_code(&e),
        error: anyhow::Error::new(e).context(path.display().to_string()),
    })
}

struct Loaded {
    grid: TokenGrid,
    map: SimilarityMap,
}

fn load(inputs: &Inputs, cfg: &RunConfig) -> CliResult<Loaded> {
    let dump = read_input(&inputs.emb, io::read_embedding)?;
    let seg = match &inputs.mlp {
        Some(p) => {
            let mlp = read_input(p, |p| io::read_mlp(p, cfg.activation.unwrap_or_default()))?;
            project_seg(&dump.seg_raw, &mlp)?
        }
        None => SegEmbedding::unprojected(dump.seg_raw)?,
    };
    let map = similarity(&dump.grid, &seg)?;
    Ok(Loaded { grid: dump.grid, map })
}

#[derive(Serialize)]
struct SimmapArtifact<'a> {
    geometry: PatchGeometry,
    #[serde(flatten)]
    map: &'a SimilarityMap,
}

fn cmd_simmap(inputs: &Inputs, run: &RunFlags) -> CliResult<()> {
    let cfg = resolve(run)?;
    let data = load(inputs, &cfg)?;
    let dir = out_dir(&cfg)?;
    let geometry = data.grid.geometry();
    write_json(
        &dir.join("simmap.json"),
        &SimmapArtifact {
            geometry,
            map: &data.map,
        },
    )?;
    let img = plot::heatmap(&data.map, &geometry)?;
    write(&dir.join("simmap.pgm"), &io::encode_pgm(&img))
}

fn cmd_points(inputs: &Inputs, dtoc: bool, run: &RunFlags) -> CliResult<()> {
    let cfg = resolve(run)?;
    let data = load(inputs, &cfg)?;
    let dir = out_dir(&cfg)?;
    let mut pts = select_points(&data.map, &data.grid, &cfg.selection())?;
    if pts.is_empty() {
        println!("no points selected");
    } else if dtoc {
        let g = data.grid.geometry();
        let grid = InterpGrid::new(g.img_w, g.img_h, cfg.stride_or_default())?;
        let mut opts = cfg.dtoc_options();
        opts.record_tape = false;
        pts = dtoc_forward(&pts, &data.map, &grid, &opts)?.to_point_set(&pts);
    }
    let mut text = pts.to_json();
    text.push('\n');
    write(&dir.join("points.json"), text.as_bytes())
}

fn cmd_sweep(inputs: &Inputs, gt: &Path, run: &RunFlags) -> CliResult<()> {
    let cfg = resolve(run)?;
    let data = load(inputs, &cfg)?;
    let dir = out_dir(&cfg)?;
    let gt = read_input(gt, io::read_mask)?;
    let scores = PixelScores::from_map(&data.map, &data.grid.geometry())?;
    let sweep = grid_search_threshold(&scores, &gt, cfg.threshold_step_or_default())?;
    println!("best threshold {} (cIoU {})", sweep.best_t, sweep.best_ciou);
    write_json(&dir.join("sweep.json"), &sweep)
}

fn list_files(dir: &Path) -> CliResult<Vec<String>> {
    let entries = fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))
        .exit_with(2)?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.exit_with(2)?;
        if entry.file_type().map(|t| t.is_file()).unwrap_or(false) {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

#[derive(Serialize)]
struct EvalArtifact {
    images: Vec<String>,
    #[serde(flatten)]
    report: IoUReport,
}

fn cmd_eval(pred: &Path, gt: &Path, run: &RunFlags) -> CliResult<()> {
    let cfg = resolve(run)?;
    let pred_names = list_files(pred)?;
    let gt_names = list_files(gt)?;
    if pred_names.is_empty() && gt_names.is_empty() {
        return Err(Failure::new(2, "both mask directories are empty"));
    }
    let unpaired: Vec<&String> = pred_names
        .iter()
        .filter(|n| !gt_names.contains(n))
        .chain(gt_names.iter().filter(|n| !pred_names.contains(n)))
        .collect();
    if !unpaired.is_empty() {
        let names: Vec<&str> = unpaired.iter().map(|s| s.as_str()).collect();
        return Err(Failure::new(3, format!("unpaired mask files: {}", names.join(", "))));
    }
    let mut pairs = Vec::with_capacity(pred_names.len());
    for name in &pred_names {
        let p = read_input(&pred.join(name), io::read_mask)?;
        let g = read_input(&gt.join(name), io::read_mask)?;
        if !p.same_shape(g.width(), g.height()) {
            return Err(Failure::new(3, format!("{name}: prediction and ground truth differ in size")));
        }
        pairs.push((p, g));
    }
    let report = evaluate(&pairs, Exec::default())?;
    println!("gIoU {} cIoU {}", report.giou, report.ciou);
    let dir = out_dir(&cfg)?;
    write_json(
        &dir.join("eval.json"),
        &EvalArtifact {
            images: pred_names,
            report,
        },
    )
}

fn cmd_train(run: &RunFlags) -> CliResult<()> {
    let cfg = resolve(run)?;
    let mut scene = fixtures::offset_blob(cfg.seed.unwrap_or(0));
    if let Some(s) = cfg.sigma_mask {
        scene.decoder.sigma_mask = s;
    }
    let train_cfg = cfg.train_config(fixtures::offset_blob_config());
    let trace = train_toy(&scene, &train_cfg)?;
    let (first, last) = (trace.initial(), trace.last());
    println!(
        "loss {:.6} -> {:.6}, positive points in mask {:.3}",
        first.total, last.total, last.in_mask_fraction
    );
    let dir = out_dir(&cfg)?;
    write_json(&dir.join("trace.json"), &trace)?;
    write(&dir.join("loss.ppm"), &io::encode_ppm(&plot::loss_curve(&trace)))
}

fn cmd_plot(trace: &Path, run: &RunFlags) -> CliResult<()> {
    let cfg = resolve(run)?;
    let text = read_input(trace, |p| Ok(fs::read_to_string(p)?))?;
    let trace: TrainTrace = serde_json::from_str(&text)
        .with_context(|| trace.display().to_string())
        .exit_with(3)?;
    if trace.entries.is_empty() {
        return Err(Failure::new(3, "trace has no entries"));
    }
    let dir = out_dir(&cfg)?;
    write(&dir.join("loss.ppm"), &io::encode_ppm(&plot::loss_curve(&trace)))
}

#[derive(Serialize)]
struct ConvergenceArtifact {
    labels: Vec<PointLabel>,
    token_index: Vec<usize>,
    selected: Vec<[f64; 2]>,
    entries: Vec<ConvergenceEntry>,
}

fn cmd_convergence(inputs: &Inputs, strides: &[f64], run: &RunFlags) -> CliResult<()> {
    let cfg = resolve(run)?;
    let data = load(inputs, &cfg)?;
    let pts = select_points(&data.map, &data.grid, &cfg.selection())?;
    let g = data.grid.geometry();
    let entries = dtoc_convergence(&pts, &data.map, g.img_w, g.img_h, strides, &cfg.dtoc_options())?;
    let dir = out_dir(&cfg)?;
    write_json(
        &dir.join("convergence.json"),
        &ConvergenceArtifact {
            labels: pts.labels.clone(),
            token_index: pts.token_index.clone(),
            selected: pts.points.clone(),
            entries,
        },
    )
}

fn cmd_fixture(run: &RunFlags) -> CliResult<()> {
    let cfg = resolve(run)?;
    let dir = out_dir(&cfg)?;
    let scenes = [
        ("peak_2x2.emb", fixtures::peak_2x2()),
        ("constant.emb", fixtures::constant_map()),
        ("one_hot.emb", fixtures::one_hot()),
        ("two_hot.emb", fixtures::two_hot()),
    ];
    for (name, (grid, seg)) in &scenes {
        write(&dir.join(name), &io::encode_embedding(grid, &seg.raw))?;
    }
    let blob = fixtures::offset_blob(cfg.seed.unwrap_or(0));
    write(&dir.join("blob.emb"), &io::encode_embedding(&blob.grid, &blob.seg.raw))?;
    write(&dir.join("blob_gt.pgm"), &io::encode_pgm(&GrayImage::from_mask(&blob.target)))?;
    for sub in ["pred", "gt"] {
        fs::create_dir_all(dir.join("metrics").join(sub)).exit_with(2)?;
    }
    for (name, pred, gt) in fixtures::metrics_set() {
        write(&dir.join("metrics/pred").join(&name), &io::encode_pgm(&GrayImage::from_mask(&pred)))?;
        write(&dir.join("metrics/gt").join(&name), &io::encode_pgm(&GrayImage::from_mask(&gt)))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Simmap { inputs, run } => cmd_simmap(inputs, run),
        Command::Points { inputs, dtoc, run } => cmd_points(inputs, *dtoc, run),
        Command::Sweep { inputs, gt, run } => cmd_sweep(inputs, gt, run),
        Command::Eval { pred, gt, run } => cmd_eval(pred, gt, run),
        Command::Train { run } => cmd_train(run),
        Command::Convergence { inputs, strides, run } => cmd_convergence(inputs, strides, run),
        Command::Plot { trace, run } => cmd_plot(trace, run),
        Command::Fixture { run } => cmd_fixture(run),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
