use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;
use splatsr::densify::{collect_candidates, upsample_depth_guided, VoteGrid};
use splatsr::io::{atomic_write, load_checkpoint, read_image, save_checkpoint, write_image, write_map};
use splatsr::losses::ssim;
use splatsr::metrics::psnr;
use splatsr::raster::render_error_map;
use splatsr::synth::{synth_to_disk, PseudoMode};
use splatsr::train::{evaluate, log_to_csv, train_coarse, train_fine, TrainResult};
use splatsr::{Error, SceneDataset, Stage, SynthSceneSpec, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "splatsr", version, about = "Coarse-to-fine Gaussian splatting super-resolution on the CPU")]
struct Cli {
    /// JSON config with optional "synth" and "train" sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of both sections.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for rendering (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override a config key, e.g. `--set train.fine_iters=200`. The value is
    /// parsed as JSON, falling back to a plain string.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    overrides: Vec<String>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        pseudo: Option<Pseudo>,
    },
    /// Fit the coarse model to the low-resolution views.
    TrainCoarse {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training log (CSV).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Refine a coarse checkpoint against high-resolution pseudo-labels.
    TrainFine {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        coarse: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Render one camera of a checkpoint.
    Render(RenderArgs),
    /// Compare two images, or evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Dump densification candidates and voxel votes as JSON lines.
    DensifyDebug {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Views to use (default: all training views).
        #[arg(long)]
        camera: Vec<u32>,
        /// Output file (default: standard output).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Joint-bilateral upsampling of a depth map guided by an HR image.
    UpsampleDepth {
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        guide: PathBuf,
        #[arg(long)]
        factor: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        sigma_spatial: f64,
        #[arg(long, default_value_t = 0.1)]
        sigma_range: f64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Pseudo {
    Oracle,
    Bicubic,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Resolution {
    Lr,
    Hr,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    camera: u32,
    /// Camera file (JSON list).
    #[arg(long, default_value = "cameras.json")]
    cameras: PathBuf,
    /// Render at this multiple of the camera resolution.
    #[arg(long, default_value_t = 1)]
    scale: u32,
    /// Colour output; `.ppm`, `.sgsm` or PNG.
    #[arg(long, default_value = "render.png")]
    out: PathBuf,
    /// Depth map (SGSM); default `<out stem>.depth.sgsm`.
    #[arg(long)]
    depth: Option<PathBuf>,
    /// Uncertainty map (SGSM); default `<out stem>.uncertainty.sgsm`.
    #[arg(long)]
    uncertainty: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, requires = "reference", conflicts_with = "checkpoint")]
    pred: Option<PathBuf>,
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    #[arg(long, requires = "data")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Evaluate the training views instead of the held-out ones.
    #[arg(long)]
    train_split: bool,
    /// Default: LR for coarse checkpoints, HR for fine ones.
    #[arg(long, value_enum)]
    resolution: Option<Resolution>,
}

#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Config {
    synth: SynthSceneSpec,
    train: TrainConfig,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_data_error() { 2 } else { 3 };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    let config = load_config(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    match cli.command {
        Command::Synth { out, pseudo } => {
            let mut spec = config.synth;
            if let Some(p) = pseudo {
                spec.pseudo = match p {
                    Pseudo::Oracle => PseudoMode::Oracle,
                    Pseudo::Bicubic => PseudoMode::Bicubic,
                };
            }
            let scene = synth_to_disk(&spec, &out)?;
            println!(
                "wrote {} views ({} train, {} test) and {} points to {}",
                scene.dataset.cameras.len(),
                scene.dataset.train.len(),
                scene.dataset.test.len(),
                scene.dataset.points.len(),
                out.display()
            );
        }
        Command::TrainCoarse { data, out, log } => {
            let ds = SceneDataset::load(&data)?;
            let result = finish_training(train_coarse(&ds, &config.train), &out)?;
            write_log(log.as_deref(), &result)?;
            report_training(&result, &ds, &config.train, false)?;
        }
        Command::TrainFine { data, coarse, out, log } => {
            let ds = SceneDataset::load(&data)?;
            let ck = load_checkpoint(&coarse)?;
            let result = finish_training(train_fine(&ck.model, &ds, &config.train), &out)?;
            write_log(log.as_deref(), &result)?;
            report_training(&result, &ds, &config.train, true)?;
        }
        Command::Render(args) => render(&args, &config.train)?,
        Command::Eval(args) => eval(&args, &config.train)?,
        Command::DensifyDebug {
            checkpoint,
            data,
            camera,
            out,
        } => densify_debug(&checkpoint, &data, &camera, out.as_deref(), &config.train)?,
        Command::UpsampleDepth {
            depth,
            guide,
            factor,
            out,
            sigma_spatial,
            sigma_range,
        } => {
            let lr = read_image(&depth)?;
            let hr = read_image(&guide)?;
            let up = upsample_depth_guided(&lr, &hr, factor, sigma_spatial, sigma_range)?;
            write_map(&out, &up)?;
        }
    }
    Ok(())
}

/// Defaults, then the config file, then `--set` overrides, then `--seed`.
fn load_config(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Config, Failure> {
    let mut value = serde_json::to_value(Config::default()).expect("default config serializes");
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| Failure {
            code: 2,
            message: format!("{}: {e}", p.display()),
        })?;
        let file: Value = serde_json::from_str(&text).map_err(|e| Failure {
            code: 2,
            message: format!("{}: {e}", p.display()),
        })?;
        merge(&mut value, file, "").map_err(|m| Failure {
            code: 2,
            message: format!("{}: {m}", p.display()),
        })?;
    }
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| usage(format!("--set expects PATH=VALUE, got {o:?}")))?;
        let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let slot = key
            .split('.')
            .try_fold(&mut value, |node, part| node.get_mut(part))
            .ok_or_else(|| usage(format!("unknown config key {key:?}")))?;
        *slot = v;
    }
    let mut config: Config = serde_json::from_value(value).map_err(|e| usage(format!("invalid config: {e}")))?;
    if let Some(s) = seed {
        config.synth.seed = s;
        config.train.seed = s;
    }
    Ok(config)
}

/// Deep-merges `src` into `dst`, rejecting keys `dst` does not have.
fn merge(dst: &mut Value, src: Value, at: &str) -> Result<(), String> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                let slot = d.get_mut(&k).ok_or_else(|| format!("unknown config key {path:?}"))?;
                merge(slot, v, &path)?;
            }
            Ok(())
        }
        (d, s) => {
            *d = s;
            Ok(())
        }
    }
}

/// Saves the final checkpoint, or the last good one on divergence.
fn finish_training(result: splatsr::Result<TrainResult>, out: &Path) -> Result<TrainResult, Failure> {
    match result {
        Ok(r) => {
            save_checkpoint(out, &r.checkpoint)?;
            Ok(r)
        }
        Err(Error::Diverged {
            iteration,
            reason,
            last_good,
        }) => {
            let path = out.with_extension("last_good");
            save_checkpoint(&path, &last_good)?;
            Err(Failure {
                code: 3,
                message: format!(
                    "training diverged at iteration {iteration}: {reason}; saved iteration {} to {}",
                    last_good.iteration,
                    path.display()
                ),
            })
        }
        Err(e) => Err(e.into()),
    }
}

fn write_log(path: Option<&Path>, result: &TrainResult) -> Result<(), Failure> {
    if let Some(p) = path {
        atomic_write(p, log_to_csv(&result.log).as_bytes())?;
    }
    Ok(())
}

fn report_training(result: &TrainResult, ds: &SceneDataset, cfg: &TrainConfig, hr: bool) -> Result<(), Failure> {
    let model = &result.checkpoint.model;
    let last = result.log.last();
    let mut line = format!(
        "iterations={} anchors={} loss={:?}",
        result.checkpoint.iteration,
        model.anchors.len(),
        last.map_or(f64::NAN, |r| r.loss)
    );
    let targets = if hr { &ds.hr_gt } else { &ds.lr_images };
    if ds.test.iter().any(|id| targets.contains_key(id)) {
        let r = evaluate(model, ds, &ds.test, targets, hr, &cfg.render)?;
        line += &format!(" test_psnr={:?} test_ssim={:?}", r.psnr, r.ssim);
    }
    println!("{line}");
    Ok(())
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "render".into());
    out.with_file_name(format!("{stem}.{suffix}.sgsm"))
}

fn render(args: &RenderArgs, cfg: &TrainConfig) -> Result<(), Failure> {
    if args.scale == 0 {
        return Err(usage("--scale must be positive"));
    }
    let ck = load_checkpoint(&args.checkpoint)?;
    let cams = splatsr::io::load_cameras(&args.cameras)?;
    let cam = cams
        .iter()
        .find(|c| c.id == args.camera)
        .ok_or_else(|| Failure::from(Error::InvalidInput(format!("no camera with id {}", args.camera))))?
        .scaled(args.scale);
    let frame = ck.model.render(&cam, None, &cfg.render)?;
    let mut color = frame.output.color;
    color.clamp01();
    write_image(&args.out, &color)?;
    let depth = args.depth.clone().unwrap_or_else(|| sibling(&args.out, "depth"));
    let unc = args.uncertainty.clone().unwrap_or_else(|| sibling(&args.out, "uncertainty"));
    write_map(&depth, &frame.output.depth)?;
    write_map(&unc, &frame.output.uncertainty)?;
    println!("wrote {}x{} render to {}", cam.width, cam.height, args.out.display());
    Ok(())
}

fn eval(args: &EvalArgs, cfg: &TrainConfig) -> Result<(), Failure> {
    let (p, s) = match (&args.pred, &args.reference, &args.checkpoint, &args.data) {
        (Some(pred), Some(reference), None, _) => {
            let a = read_image(pred)?;
            let b = read_image(reference)?;
            (psnr(&a, &b)?, ssim(&a, &b)?)
        }
        (None, None, Some(ck), Some(data)) => {
            let ck = load_checkpoint(ck)?;
            let ds = SceneDataset::load(data)?;
            let hr = match args.resolution {
                Some(Resolution::Hr) => true,
                Some(Resolution::Lr) => false,
                None => ck.stage == Stage::Fine,
            };
            let ids = if args.train_split { &ds.train } else { &ds.test };
            let targets = if hr { &ds.hr_gt } else { &ds.lr_images };
            let r = evaluate(&ck.model, &ds, ids, targets, hr, &cfg.render)?;
            (r.psnr, r.ssim)
        }
        _ => return Err(usage("eval needs either --pred and --ref, or --checkpoint and --data")),
    };
    println!("psnr={p:?} ssim={s:?}");
    Ok(())
}

fn densify_debug(checkpoint: &Path, data: &Path, cameras: &[u32], out: Option<&Path>, cfg: &TrainConfig) -> Result<(), Failure> {
    let ck = load_checkpoint(checkpoint)?;
    let ds = SceneDataset::load(data)?;
    let ids: Vec<u32> = if cameras.is_empty() { ds.train.clone() } else { cameras.to_vec() };
    let mut lines = Vec::new();
    let mut all = Vec::new();
    for id in ids {
        let target = match (ds.hr_pseudo.get(&id), ds.lr_images.get(&id)) {
            (Some(p), _) => p.clone(),
            (None, Some(lr)) if cfg.pseudo_fallback => lr.bicubic_upsample(ds.upscale_factor as usize),
            _ => return Err(Error::MissingPseudoLabels(id).into()),
        };
        let target = &target;
        let cam = ds.hr_camera(id)?;
        let frame = ck.model.render(&cam, None, &cfg.render)?;
        let err = render_error_map(&frame.output.color, target)?;
        let depth = match ds.hr_depth.get(&id) {
            Some(d) => d.clone(),
            None => frame.output.metric_depth(),
        };
        let cands = collect_candidates(&err, &depth, &cam, &cfg.densify)?;
        for c in &cands {
            lines.push(serde_json::json!({"x": c.x[0], "y": c.x[1], "z": c.x[2], "view": c.view, "err": c.err}).to_string());
        }
        all.extend(cands);
    }
    let grid = VoteGrid::from_candidates(&all, cfg.densify.base_voxel, cfg.densify.levels);
    for (l, level) in grid.levels.iter().enumerate() {
        for (key, votes) in level {
            lines.push(
                serde_json::json!({"i": key[0], "j": key[1], "k": key[2], "l": l, "count": votes.count, "views": votes.views.len()})
                    .to_string(),
            );
        }
    }
    let mut text = lines.join("\n");
    text.push('\n');
    match out {
        Some(p) => atomic_write(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}
