use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ctsr::checkpoint::sha256_hex;
use ctsr::config::RunConfig;
use ctsr::data::{load_volume, normalize, Modality, PatchSampler, RealVolume};
use ctsr::eval::{eval_report, score_pairs};
use ctsr::grid::{bicubic_upsample, nn_upsample_g, Grid2D, ScaleFactor};
use ctsr::infer::{montage, sr_volume, Blend};
use ctsr::model::{HR_PATCH, LR_PATCH};
use ctsr::phantom::{generate_phantom, split_unpaired};
use ctsr::train::{fit, history_csv, load_generator, BaselineMode, FitOptions, HISTORY_FILE};
use ctsr::{Error, ErrorCategory, Result};

const MANIFEST_FILE: &str = "manifest.json";

#[derive(Parser, Debug)]
#[command(name = "ctsr", version, about = "Unpaired 8x CT super-resolution")]
struct Cli {
    /// Seed for every random stage; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic high/low-resolution volume pair.
    Phantom(PhantomArgs),
    /// Train the four networks.
    Train(TrainArgs),
    /// Super-resolve a clinical volume slice by slice.
    Infer(InferArgs),
    /// Score a super-resolved volume against the true high-resolution one.
    Eval(EvalArgs),
    /// Render a labeled comparison panel for one slice.
    Montage(MontageArgs),
}

#[derive(Args, Debug)]
struct PhantomArgs {
    /// `slices,rows,cols` of the high-resolution volume.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_enum)]
    baseline_mode: Option<BaselineArg>,
    #[arg(long)]
    max_steps_per_epoch: Option<usize>,
    /// Continue from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum BaselineArg {
    Modified,
    OriginalCyclegan,
    None,
}

impl From<BaselineArg> for BaselineMode {
    fn from(b: BaselineArg) -> Self {
        match b {
            BaselineArg::Modified => BaselineMode::Modified,
            BaselineArg::OriginalCyclegan => BaselineMode::OriginalCyclegan,
            BaselineArg::None => BaselineMode::None,
        }
    }
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum BlendArg {
    WeightedCosine,
    Uniform,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Training checkpoint or standalone generator file.
    #[arg(long)]
    model: PathBuf,
    /// Clinical volume header.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long, value_enum)]
    blend: Option<BlendArg>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Low-resolution input, enables the interpolation baselines.
    #[arg(long)]
    lr: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MontageArgs {
    /// Clinical volume header.
    #[arg(long)]
    lr: PathBuf,
    /// Super-resolved volume from the proposed model.
    #[arg(long)]
    sr: PathBuf,
    /// Super-resolved volume from the baseline model.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    slice: usize,
    #[arg(long, default_value = "montage.png")]
    output: String,
}

fn read_volume(path: &Path) -> Result<RealVolume> {
    normalize(&load_volume(path)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

struct Outcome {
    outputs: Vec<PathBuf>,
    summary: serde_json::Value,
}

fn run_phantom(cfg: &RunConfig, args: &PhantomArgs, out: &Path) -> Result<Outcome> {
    let mut spec = cfg.phantom.clone();
    if let Some(d) = &args.dims {
        spec.dims_hr = d[..]
            .try_into()
            .map_err(|_| Error::InvalidParameter(format!("--dims takes 3 values, got {}", d.len())))?;
    }
    let p = generate_phantom(&spec)?;
    let hr = out.join("phantom_hr.mhd");
    let lr = out.join("phantom_lr.mhd");
    p.hr.save(&hr, Modality::Micro)?;
    p.lr.save(&lr, Modality::Clinical)?;
    Ok(Outcome {
        outputs: vec![hr, lr],
        summary: json!({ "phantom": spec }),
    })
}

fn sample_source(path: &Path, patch: usize, n: usize, threshold: f64, seed: u64) -> Result<Vec<Grid2D>> {
    let v = read_volume(path)?;
    PatchSampler::new(patch, threshold, seed)?.sample(&v, n)
}

fn run_train(cfg: &mut RunConfig, args: &TrainArgs, out: &Path) -> Result<Outcome> {
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = args.baseline_mode {
        cfg.train.baseline_mode = b.into();
    }
    if args.max_steps_per_epoch.is_some() {
        cfg.fit.max_steps_per_epoch = args.max_steps_per_epoch;
    }
    cfg.validate()?;
    let (clinical, micro, pairs) = match &cfg.data {
        Some(d) => {
            let seed = cfg.train.seed;
            let c = sample_source(&d.clinical, LR_PATCH, d.n_patches, d.foreground_threshold, seed)?;
            let m = sample_source(&d.micro, HR_PATCH, d.n_patches, d.foreground_threshold, seed.wrapping_add(1))?;
            (c, m, Vec::new())
        }
        None => {
            let p = generate_phantom(&cfg.phantom)?;
            let s = split_unpaired(&p, cfg.phantom.seed, &cfg.split)?;
            (s.train_lr, s.train_hr, s.test_pairs)
        }
    };
    let started = Instant::now();
    let r = fit(
        &cfg.train,
        &clinical,
        &micro,
        &FitOptions {
            out_dir: Some(out.to_path_buf()),
            resume: args.resume.clone(),
            stop_after: None,
            max_steps_per_epoch: cfg.fit.max_steps_per_epoch,
        },
    )?;
    let seconds = started.elapsed().as_secs_f64();
    let g1 = out.join("g1.model");
    r.state.g1.save(&g1)?;
    let mut outputs = r.checkpoints.clone();
    outputs.extend([out.join(HISTORY_FILE), g1]);
    if r.checkpoints.is_empty() {
        write_text(&out.join(HISTORY_FILE), &history_csv(&r.history)?)?;
    }
    let mut summary = json!({
        "train_config_hash": cfg.train.hash(),
        "steps": r.history.len(),
        "seconds": seconds,
        "all_finite": r.history.iter().all(|h| h.report.all_finite()),
    });
    if !pairs.is_empty() {
        let scores = score_pairs(&r.state.g1, &pairs)?;
        let p = out.join("test_scores.json");
        write_text(&p, &serde_json::to_string_pretty(&scores).map_err(|e| Error::Report(e.to_string()))?)?;
        outputs.push(p);
        summary["test_scores"] = json!(scores);
    }
    Ok(Outcome { outputs, summary })
}

fn run_infer(cfg: &RunConfig, args: &InferArgs, out: &Path) -> Result<Outcome> {
    let mut tiles = cfg.tiles;
    if let Some(s) = args.stride {
        tiles.stride = s;
    }
    if let Some(b) = args.blend {
        tiles.blend = match b {
            BlendArg::WeightedCosine => Blend::WeightedCosine,
            BlendArg::Uniform => Blend::Uniform,
        };
    }
    tiles.validate()?;
    let g1 = load_generator(&args.model)?;
    let v = read_volume(&args.input)?;
    let (_, files) = sr_volume(&v, &g1, &tiles, Some(out))?;
    let files = files.expect("output directory was given");
    let mut outputs = vec![files.volume_header];
    outputs.extend(files.slice_pngs);
    Ok(Outcome {
        outputs,
        summary: json!({ "tiles": tiles, "model_sha256": sha256_hex(&std::fs::read(&args.model).map_err(|e| Error::io(&args.model, e))?) }),
    })
}

fn run_eval(args: &EvalArgs, out: &Path) -> Result<Outcome> {
    let pred = read_volume(&args.pred)?;
    let truth = read_volume(&args.truth)?;
    let lr = args.lr.as_deref().map(|p| read_volume(p)).transpose()?;
    let report = eval_report(&pred, &truth, lr.as_ref())?;
    report.save(out, "eval")?;
    for a in &report.aggregate {
        println!("{}\tpsnr {}\tssim {:.6}\tmse {:e}", a.method, a.psnr, a.ssim, a.mse);
    }
    Ok(Outcome {
        outputs: vec![out.join("eval.csv"), out.join("eval.json")],
        summary: json!({ "aggregate": report.aggregate }),
    })
}

fn run_montage(args: &MontageArgs, out: &Path) -> Result<Outcome> {
    let lr = read_volume(&args.lr)?.slice(args.slice)?;
    let sr = read_volume(&args.sr)?.slice(args.slice)?;
    let baseline = args
        .baseline
        .as_deref()
        .map(|p| read_volume(p).and_then(|v| v.slice(args.slice)))
        .transpose()?;
    let path = out.join(&args.output);
    montage(
        &nn_upsample_g(&lr, ScaleFactor::SR),
        &sr,
        &bicubic_upsample(&lr, ScaleFactor::SR),
        baseline.as_ref(),
        &path,
    )?;
    Ok(Outcome {
        outputs: vec![path],
        summary: json!({ "slice": args.slice, "panels": if baseline.is_some() { 4 } else { 3 } }),
    })
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Phantom(_) => "phantom",
        Command::Train(_) => "train",
        Command::Infer(_) => "infer",
        Command::Eval(_) => "eval",
        Command::Montage(_) => "montage",
    }
}

fn execute(cli: &Cli, cfg: &mut RunConfig) -> Result<Outcome> {
    let out = &cli.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    match &cli.command {
        Command::Phantom(a) => run_phantom(cfg, a, out),
        Command::Train(a) => run_train(cfg, a, out),
        Command::Infer(a) => run_infer(cfg, a, out),
        Command::Eval(a) => run_eval(a, out),
        Command::Montage(a) => run_montage(a, out),
    }
}

fn exit_code(c: ErrorCategory) -> u8 {
    match c {
        ErrorCategory::Input => 2,
        ErrorCategory::Io => 3,
        ErrorCategory::Numeric => 4,
    }
}

fn write_manifest(cli: &Cli, cfg: &RunConfig, result: &Result<Outcome>) -> Result<()> {
    let cfg_json = serde_json::to_string(cfg).map_err(|e| Error::Report(e.to_string()))?;
    let mut m = json!({
        "command": command_name(&cli.command),
        "argv": std::env::args().collect::<Vec<_>>(),
        "seed": cfg.train.seed,
        "config": cfg,
        "config_hash": sha256_hex(cfg_json.as_bytes()),
        "versions": {
            "ctsr": env!("CARGO_PKG_VERSION"),
            "checkpoint_format": ctsr::checkpoint::VERSION,
        },
    });
    match result {
        Ok(o) => {
            m["status"] = json!("ok");
            m["outputs"] = json!(o.outputs);
            m["summary"] = o.summary.clone();
        }
        Err(e) => {
            m["status"] = json!("error");
            m["error"] = json!({ "category": e.category().as_str(), "message": e.to_string() });
        }
    }
    let path = cli.out_dir.join(MANIFEST_FILE);
    std::fs::create_dir_all(&cli.out_dir).map_err(|e| Error::io(&cli.out_dir, e))?;
    write_text(&path, &serde_json::to_string_pretty(&m).map_err(|e| Error::Report(e.to_string()))?)
}

fn report_error(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    eprintln!("{}", json!({ "error": { "category": e.category().as_str(), "message": e.to_string() } }));
    ExitCode::from(exit_code(e.category()))
}

fn main() -> ExitCode {
    ctsr::alloc::retain_freed_memory();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            if code != 0 {
                eprintln!("{}", json!({ "error": { "category": "input", "message": e.kind().to_string() } }));
            }
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp_millis()
        .init();
    let mut cfg = match &cli.config {
        Some(p) => match RunConfig::load(p) {
            Ok(c) => c,
            Err(e) => return report_error(&e),
        },
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    let result = execute(&cli, &mut cfg);
    if let Err(e) = write_manifest(&cli, &cfg, &result) {
        log::warn!("could not write manifest: {e}");
    }
    match result {
        Ok(o) => {
            for p in &o.outputs {
                log::info!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => report_error(&e),
    }
}
