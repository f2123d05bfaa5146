//! `lidarsynth` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 malformed input, 3 numeric
//! failure.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use lidarsynth::config::{parse_grid, RunConfig};
use lidarsynth::dataset::{load_dataset, map_tensor, raster_tensor, tensor_cube, write_dataset};
use lidarsynth::geometry::{derasterize, rasterize, read_point_cloud, write_point_cloud, GridSpec, PolarRaster};
use lidarsynth::io::{gray_levels, load_checkpoint, load_tensor, save_checkpoint, save_tensor, write_pgm};
use lidarsynth::model::Model;
use lidarsynth::radar::preprocess;
use lidarsynth::synth::SceneProfile;
use lidarsynth::train::{evaluate, history_text, split, train, TrainConfig};
use lidarsynth::Error;

#[derive(Parser)]
#[command(name = "lidarsynth", version, about = "Synthesize LiDAR range images from camera and radar")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        num: usize,
        /// A profile name, or `mixed` for an even split over all four.
        #[arg(long, default_value = "mixed")]
        profile: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image, radar and grid sizes.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Turn a radar cube into range-angle and range-velocity maps.
    PreprocessRadar {
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        out_ra: PathBuf,
        #[arg(long)]
        out_rv: PathBuf,
    },
    /// Bin an LSPC point cloud into a range raster.
    Rasterize {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn a range raster back into an LSPC point cloud.
    Derasterize {
        #[arg(long)]
        raster: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; also writes `<out>.final` and `history.txt` beside it.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ablation: Option<Ablation>,
    },
    /// Score a checkpoint on the test split of a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Use this configuration instead of the one stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Accept a checkpoint whose model differs from `--config`.
        #[arg(long)]
        force: bool,
        /// A no-fusion checkpoint whose score fills `ablation_no_fusion`.
        #[arg(long)]
        ablation_ckpt: Option<PathBuf>,
    },
    /// Write a raster as a binary PGM image.
    Render {
        #[arg(long)]
        raster: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    NoFusion,
}

/// Bad flags or flag values.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Numeric(_) => 3,
                _ => 2,
            };
        }
    }
    2
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("LIDARSYNTH_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Usage(format!("LIDARSYNTH_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("starting worker pool")?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match init_threads().and_then(|_| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { out, num, profile, seed, config } => synth(&out, num, &profile, seed, config.as_deref()),
        Command::PreprocessRadar { cube, out_ra, out_rv } => {
            let t = load_tensor(&cube).with_context(|| format!("reading {}", cube.display()))?;
            let cube = tensor_cube(&t)?;
            let (ra, rv) = preprocess(&cube);
            save_tensor(&out_ra, &map_tensor(&ra))?;
            save_tensor(&out_rv, &map_tensor(&rv))?;
            Ok(())
        }
        Command::Rasterize { points, grid, out } => {
            let grid = load_grid(&grid)?;
            let file = File::open(&points).with_context(|| format!("opening {}", points.display()))?;
            let cloud = read_point_cloud(BufReader::new(file)).with_context(|| format!("reading {}", points.display()))?;
            let r = rasterize(&cloud, &grid);
            if r.dropped > 0 {
                eprintln!("{} of {} points fell outside the grid", r.dropped, cloud.len());
            }
            save_tensor(&out, &raster_tensor(&r.raster))?;
            Ok(())
        }
        Command::Derasterize { raster, grid, out } => {
            let grid = load_grid(&grid)?;
            let raster = load_raster(&raster, grid)?;
            let mut w = BufWriter::new(File::create(&out)?);
            write_point_cloud(&mut w, &derasterize(&raster))?;
            w.flush()?;
            Ok(())
        }
        Command::Train { data, config, out, ablation } => train_cmd(&data, &config, &out, ablation),
        Command::Eval { data, ckpt, report, config, force, ablation_ckpt } => {
            eval_cmd(&data, &ckpt, &report, config.as_deref(), force, ablation_ckpt.as_deref())
        }
        Command::Render { raster, out } => {
            let t = load_tensor(&raster).with_context(|| format!("reading {}", raster.display()))?;
            let [rows, cols] = t.shape()[..] else {
                return Err(Error::Format(format!("raster must be rank 2, got {:?}", t.shape())).into());
            };
            let mut w = BufWriter::new(File::create(&out)?);
            write_pgm(&mut w, cols, rows, &gray_levels(t.data(), cols))?;
            w.flush()?;
            Ok(())
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("config {}", path.display()))
}

fn load_grid(path: &Path) -> Result<GridSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_grid(&text).with_context(|| format!("grid {}", path.display()))
}

fn load_raster(path: &Path, grid: GridSpec) -> Result<PolarRaster> {
    let t = load_tensor(path).with_context(|| format!("reading {}", path.display()))?;
    if t.shape() != [grid.n_rows(), grid.n_cols()] {
        return Err(Error::Format(format!(
            "{}: raster is {:?}, grid is {} x {}",
            path.display(),
            t.shape(),
            grid.n_rows(),
            grid.n_cols()
        ))
        .into());
    }
    PolarRaster::from_data(grid, t.into_data())
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())).into())
}

fn synth(out: &Path, num: usize, profile: &str, seed: u64, config: Option<&Path>) -> Result<()> {
    let cfg = match config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let profiles = if profile == "mixed" {
        SceneProfile::builtin()
    } else {
        let names: Vec<String> = SceneProfile::builtin().into_iter().map(|p| p.name).collect();
        vec![SceneProfile::named(profile)
            .ok_or_else(|| Usage(format!("unknown profile {profile:?}; expected mixed or one of {}", names.join(", "))))?]
    };
    let scenarios = write_dataset(out, num, &profiles, seed, &cfg.synth_config())?;
    eprintln!("wrote {} samples to {}", scenarios.len(), out.display());
    Ok(())
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().map_or_else(|| PathBuf::from(name), |d| d.join(name))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train_cmd(data: &Path, config: &Path, out: &Path, ablation: Option<Ablation>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(Ablation::NoFusion) = ablation {
        cfg.model.fusion.bypass = true;
    }
    let samples = load_dataset(data, &cfg.model).with_context(|| format!("loading {}", data.display()))?;
    let n = samples.len();
    let parts = split(samples, |s| &s.scenario, &cfg.train.split)?;
    eprintln!("{n} samples: {} train, {} val, {} test", parts.train.len(), parts.val.len(), parts.test.len());
    let outcome = train(&parts.train, &parts.val, &cfg.model, &cfg.train)?;
    let text = cfg.to_text();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(out, &text, outcome.best_model.params(), false)
        .with_context(|| format!("writing {}", out.display()))?;
    save_checkpoint(with_suffix(out, ".final"), &text, outcome.final_model.params(), true)?;
    fs::write(sibling(out, "history.txt"), history_text(&outcome.history))?;
    if let Some(last) = outcome.history.last() {
        eprintln!(
            "epoch {}: train {:.4}, best validation at epoch {}",
            last.epoch, last.train_mmse, outcome.best_epoch
        );
    }
    Ok(())
}

/// The checkpoint's model, under `config` when given.
fn load_model(ckpt: &Path, config: Option<&RunConfig>, force: bool) -> Result<(Model, RunConfig)> {
    let (text, store) = load_checkpoint(ckpt).with_context(|| format!("reading {}", ckpt.display()))?;
    let stored = RunConfig::parse(&text).with_context(|| format!("config stored in {}", ckpt.display()))?;
    let cfg = match config {
        Some(c) if c.model_text() != stored.model_text() && !force => {
            return Err(Error::Config(format!(
                "{} was trained with a different model configuration (pass --force to load anyway)",
                ckpt.display()
            ))
            .into());
        }
        Some(c) => c.clone(),
        None => stored,
    };
    let model = Model::from_parts(cfg.model.clone(), store).with_context(|| format!("loading {}", ckpt.display()))?;
    Ok((model, cfg))
}

fn eval_cmd(
    data: &Path,
    ckpt: &Path,
    report: &Path,
    config: Option<&Path>,
    force: bool,
    ablation_ckpt: Option<&Path>,
) -> Result<()> {
    let user = config.map(load_config).transpose()?;
    let (model, cfg) = load_model(ckpt, user.as_ref(), force)?;
    let samples = load_dataset(data, &cfg.model).with_context(|| format!("loading {}", data.display()))?;
    let test = split(samples, |s| &s.scenario, &cfg.train.split)?.test;
    let mut rep = evaluate(&model, &test, &cfg.train)?;
    if let Some(path) = ablation_ckpt {
        let (ablated, acfg) = load_model(path, None, false)?;
        if acfg.model.grid != cfg.model.grid {
            return Err(Error::Config(format!("{} predicts on a different grid", path.display())).into());
        }
        // Same loss band as the main model; output scaling follows the ablated run.
        let tcfg = TrainConfig { normalize_range: acfg.train.normalize_range, ..cfg.train.clone() };
        rep.ablation_no_fusion = Some(evaluate(&ablated, &test, &tcfg)?.overall);
    }
    fs::write(report, rep.to_text()).with_context(|| format!("writing {}", report.display()))?;
    Ok(())
}
