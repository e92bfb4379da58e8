//! `ufe`: file-in/file-out operator surface. Subcommands generate the
//! synthetic dataset, train, evaluate checkpoints, predict masks for single
//! frames, and visualize optical flow.
//!
//! Exit codes: 0 success, 2 usage, 3 input validation, 4 runtime abort.
//! Every command validates its inputs before writing anything.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ufe_core::dataset::{self, DatasetConfig};
use ufe_core::flow::{farneback_flow, write_flow_png, FarnebackParams};
use ufe_core::metrics::{self, EvalOptions};
use ufe_core::model;
use ufe_core::tensor::Tensor;
use ufe_core::trainer::{self, TrainConfig, TrainError, TrainMode};

#[derive(Debug)]
enum CliError {
    /// Bad inputs or state detected before any writes; exit 3.
    Validation(String),
    /// Failure after work started; exit 4.
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

fn validation(e: impl fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

type Result<T> = std::result::Result<T, CliError>;

/// Union config for all commands. Unknown keys are rejected; every field
/// has a default, so `{}` and a missing --config both mean "defaults".
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    /// Dataset generation seed; training has its own under `train.seed`.
    seed: u64,
    dataset: DatasetConfig,
    train: TrainConfig,
}

#[derive(Parser)]
#[command(name = "ufe", version, about = "Sounding-object segmentation on synthetic clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset plus PNG previews.
    GenData {
        /// JSON run config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's dataset seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train on a generated dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which unlabeled-frame cues to use; overrides the config.
        #[arg(long, value_parser = ["full", "nf-only", "df-only", "baseline"])]
        mode: Option<String>,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on one dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = ["train", "val", "test"])]
        split: String,
    },
    /// Render optical flow between two frames as a color-wheel PNG.
    FlowViz {
        #[arg(long)]
        frame_a: PathBuf,
        #[arg(long)]
        frame_b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict the sounding-object mask for one frame.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        frame: PathBuf,
        /// Raw-rate neighbor frame for motion; omitted -> zero flow.
        #[arg(long)]
        neighbor: Option<PathBuf>,
        /// JSON array holding the audio embedding.
        #[arg(long)]
        audio: PathBuf,
        /// Binary mask PNG path; the probability map lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(4)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    ufe_core::init_thread_pool(thread_cap()?);
    match cmd {
        Command::GenData {
            config,
            out,
            seed,
            force,
        } => cmd_gen_data(config.as_deref(), &out, seed, force),
        Command::Train {
            config,
            data,
            out,
            mode,
            force,
        } => cmd_train(config.as_deref(), &data, &out, mode.as_deref(), force),
        Command::Eval {
            checkpoint,
            data,
            split,
        } => cmd_eval(&checkpoint, &data, &split),
        Command::FlowViz {
            frame_a,
            frame_b,
            out,
        } => cmd_flow_viz(&frame_a, &frame_b, &out),
        Command::Predict {
            checkpoint,
            frame,
            neighbor,
            audio,
            out,
        } => cmd_predict(&checkpoint, &frame, neighbor.as_deref(), &audio, &out),
    }
}

fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("UFE_THREADS") {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Validation(format!(
                "UFE_THREADS must be a positive integer, got {s:?}"
            ))),
        },
        Err(_) => Ok(None),
    }
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("bad config {}: {e}", path.display())))
}

/// Creates the output directory, refusing a non-empty one without --force.
fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let occupied = std::fs::read_dir(out).map_err(runtime)?.next().is_some();
        if occupied && !force {
            return Err(CliError::Validation(format!(
                "output directory {} is not empty; pass --force to write anyway",
                out.display()
            )));
        }
    }
    std::fs::create_dir_all(out).map_err(runtime)?;
    Ok(())
}

/// Guards an output directory against concurrent commands for the process
/// lifetime of one command.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Validation(format!(
                    "{} exists: another command is using this directory (delete it if stale)",
                    path.display()
                )))
            }
            Err(e) => Err(runtime(e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Echoes the resolved config so the run directory is self-describing and
/// re-feedable.
fn write_config_echo(out: &Path, cfg: &RunConfig) -> Result<()> {
    let json = serde_json::to_string_pretty(cfg).map_err(runtime)?;
    std::fs::write(out.join("config.json"), json).map_err(runtime)?;
    Ok(())
}

fn cmd_gen_data(config: Option<&Path>, out: &Path, seed: Option<u64>, force: bool) -> Result<()> {
    let mut cfg = load_run_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.dataset.validate().map_err(validation)?;
    prepare_out_dir(out, force)?;
    let _lock = DirLock::acquire(out)?;

    let data = dataset::generate_dataset(cfg.seed, &cfg.dataset).map_err(runtime)?;
    dataset::write_dataset(&data, out).map_err(runtime)?;
    let previews = out.join("previews");
    for clip in data.train.iter().take(3) {
        dataset::export_clip_pngs(clip, &previews).map_err(runtime)?;
    }
    write_config_echo(out, &cfg)?;
    println!(
        "wrote {} train / {} val / {} test clips to {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(
    config: Option<&Path>,
    data_dir: &Path,
    out: &Path,
    mode: Option<&str>,
    force: bool,
) -> Result<()> {
    let mut cfg = load_run_config(config)?;
    if let Some(m) = mode {
        cfg.train.mode = TrainMode::from_str(m).map_err(validation)?;
    }
    cfg.train.validate().map_err(validation)?;
    let data = dataset::read_dataset(data_dir)
        .map_err(|e| CliError::Validation(format!("cannot load dataset {}: {e}", data_dir.display())))?;
    prepare_out_dir(out, force)?;
    let _lock = DirLock::acquire(out)?;
    write_config_echo(out, &cfg)?;

    let outcome = trainer::train(&cfg.train, &data, out, None).map_err(|e| match e {
        TrainError::Config(_) => validation(e),
        other => runtime(other),
    })?;
    println!(
        "{} run finished at iteration {}: val mIoU {:.4}, F-score {:.4}",
        cfg.train.mode,
        outcome.state.iteration,
        outcome.final_report.miou,
        outcome.final_report.fscore
    );
    println!("final checkpoint: {}", outcome.final_checkpoint.display());
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data_dir: &Path, split: &str) -> Result<()> {
    let (state, tcfg) = trainer::load_checkpoint_any(checkpoint).map_err(validation)?;
    let data = dataset::read_dataset(data_dir)
        .map_err(|e| CliError::Validation(format!("cannot load dataset {}: {e}", data_dir.display())))?;
    let clips = match split {
        "train" => &data.train,
        "val" => &data.val,
        "test" => &data.test,
        other => {
            return Err(CliError::Validation(format!(
                "unknown split {other:?}; valid splits: train, val, test"
            )))
        }
    };
    let opts = EvalOptions {
        flow: tcfg.flow_source(),
        ..EvalOptions::default()
    };
    let report = metrics::evaluate(&state.params, clips, &opts).map_err(validation)?;
    let json = report.to_json();
    println!("{json}");
    let out_path = checkpoint.with_extension(format!("eval-{split}.json"));
    std::fs::write(&out_path, &json).map_err(runtime)?;
    eprintln!("report written to {}", out_path.display());
    Ok(())
}

fn cmd_flow_viz(frame_a: &Path, frame_b: &Path, out: &Path) -> Result<()> {
    let a = read_image_tensor(frame_a)?;
    let b = read_image_tensor(frame_b)?;
    if a.shape() != b.shape() {
        return Err(CliError::Validation(format!(
            "frame sizes differ: {:?} vs {:?}",
            &a.shape()[1..],
            &b.shape()[1..]
        )));
    }
    let field = farneback_flow(&a, &b, &FarnebackParams::default()).map_err(validation)?;
    write_flow_png(&field, out).map_err(runtime)?;
    let max_magnitude = field
        .dx
        .iter()
        .zip(&field.dy)
        .map(|(&x, &y)| (x * x + y * y).sqrt())
        .fold(0.0f32, f32::max);
    let stats = serde_json::json!({
        "mean_magnitude": field.mean_magnitude(),
        "max_magnitude": max_magnitude,
    });
    let stats_path = out.with_extension("json");
    std::fs::write(&stats_path, serde_json::to_string_pretty(&stats).map_err(runtime)?)
        .map_err(runtime)?;
    println!(
        "mean |flow| {:.3} px, max {:.3} px -> {} + {}",
        field.mean_magnitude(),
        max_magnitude,
        out.display(),
        stats_path.display()
    );
    Ok(())
}

fn cmd_predict(
    checkpoint: &Path,
    frame: &Path,
    neighbor: Option<&Path>,
    audio: &Path,
    out: &Path,
) -> Result<()> {
    let (state, tcfg) = trainer::load_checkpoint_any(checkpoint).map_err(validation)?;
    let img = read_image_tensor(frame)?;
    let s = img.shape().to_vec();
    let audio_text = std::fs::read_to_string(audio)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", audio.display())))?;
    let audio_vec: Vec<f32> = serde_json::from_str(&audio_text)
        .map_err(|e| CliError::Validation(format!("bad audio JSON {}: {e}", audio.display())))?;
    let audio_t = Tensor::new(vec![audio_vec.len()], audio_vec).map_err(validation)?;

    let flow_t = match neighbor {
        Some(nb_path) => {
            let nb = read_image_tensor(nb_path)?;
            if nb.shape() != s.as_slice() {
                return Err(CliError::Validation(format!(
                    "neighbor size {:?} does not match frame {:?}",
                    &nb.shape()[1..],
                    &s[1..]
                )));
            }
            farneback_flow(&img, &nb, &tcfg.flow)
                .map_err(validation)?
                .to_tensor()
        }
        None => {
            eprintln!("warning: no neighbor frame given; predicting with zero flow");
            Tensor::zeros(&[2, s[1], s[2]])
        }
    };

    let prob = model::predict(&state.params, &img, &flow_t, &audio_t).map_err(validation)?;
    let (h, w) = (prob.shape()[0], prob.shape()[1]);
    let mask_pixels: Vec<u8> = prob
        .data()
        .iter()
        .map(|&p| if p >= 0.5 { 255u8 } else { 0 })
        .collect();
    let prob_pixels: Vec<u8> = prob
        .data()
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let stem = out
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| CliError::Validation(format!("bad output path {}", out.display())))?;
    let prob_path = out.with_file_name(format!("{stem}-prob.png"));

    image::GrayImage::from_raw(w as u32, h as u32, mask_pixels)
        .expect("mask buffer size")
        .save(out)
        .map_err(runtime)?;
    image::GrayImage::from_raw(w as u32, h as u32, prob_pixels)
        .expect("prob buffer size")
        .save(&prob_path)
        .map_err(runtime)?;
    let fg = prob.data().iter().filter(|&&p| p >= 0.5).count();
    println!(
        "mask {} ({:.1}% foreground), probability map {}",
        out.display(),
        100.0 * fg as f64 / (h * w) as f64,
        prob_path.display()
    );
    Ok(())
}

/// Loads a PNG as a [3,H,W] tensor in [0,1].
fn read_image_tensor(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * h * w + y * w + x] = p.0[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).map_err(validation)
}
