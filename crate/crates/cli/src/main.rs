//! Single entry point wiring the whole pipeline: phantom generation, DRR
//! dataset creation, training, fine-tuning, orbit rendering, evaluation,
//! and the loss-weight ablation driver.
//!
//! Every artifact-producing subcommand writes a `run_manifest.json` next
//! to its outputs holding the resolved configuration and FNV-1a hashes of
//! its inputs, so a run can be reproduced from the manifest alone.
//! Identical commands with identical seeds produce identical outputs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result, bail};
use clap::{Args, Parser, Subcommand, ValueEnum};

use radfield::drr::{self, DrrConfig, Polarity};
use radfield::io::hash_file;
use radfield::metrics::{self, KidOpts};
use radfield::objective::{FeatureExtractor, FxSpec, make_feature_extractor};
use radfield::phantom::{self, PhantomKind, PhantomParams};
use radfield::plot::line_plot;
use radfield::trainloop::{self, FinetuneConfig, LambdaMode, RunCheckpoint, TrainConfig, ablate};

#[derive(Parser)]
#[command(
    name = "radfield",
    version,
    about = "CT-projection synthesis from single radiographs with an adversarially trained,\nuncertainty-weighted conditional radiance field",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a procedural attenuation volume
    Phantom(PhantomArgs),
    /// Project a volume into a radiograph dataset
    Drr(DrrArgs),
    /// Adversarially train the radiance field on a dataset
    Train(TrainArgs),
    /// Fine-tune a checkpoint against a single view
    Finetune(FinetuneArgs),
    /// Render the full orbit from a checkpoint
    Render(RenderArgs),
    /// Score a rendered stack against a reference stack
    Eval(EvalArgs),
    /// Run the loss-weight grid (three fixed rows + learned weights)
    Ablate(AblateArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// cube | ellipsoids | knee_toy
    #[arg(long)]
    kind: String,
    /// Voxels per side
    #[arg(long)]
    size: usize,
    /// Shape-placement seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Extra shape parameters, repeatable: --param mu=0.02
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params: Vec<String>,
    /// Output volume file; defaults under the output root
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DrrArgs {
    /// Input volume file
    #[arg(long)]
    volume: PathBuf,
    /// Views around the orbit
    #[arg(long, default_value_t = 72)]
    views: usize,
    /// Angular spacing in degrees
    #[arg(long = "step-deg", default_value_t = 5.0)]
    step_deg: f64,
    /// Square image side in pixels
    #[arg(long, default_value_t = 128)]
    res: usize,
    /// Quadrature steps per ray
    #[arg(long, default_value_t = 512)]
    steps: usize,
    /// Panel half-width in mm; defaults to the smallest covering panel
    #[arg(long)]
    fov: Option<f64>,
    /// Pixel convention: bright or dark attenuating structures
    #[arg(long, value_enum, default_value_t = PolarityArg::Bright)]
    polarity: PolarityArg,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Accepted for interface uniformity; projection is deterministic
    #[arg(long, default_value_t = 0)]
    #[allow(dead_code)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolarityArg {
    /// film convention, attenuating structures bright
    Bright,
    /// detector convention
    Dark,
}

impl From<PolarityArg> for Polarity {
    fn from(p: PolarityArg) -> Self {
        match p {
            PolarityArg::Bright => Polarity::Bright,
            PolarityArg::Dark => Polarity::Dark,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// dataset.json of a DRR dataset
    #[arg(long)]
    data: PathBuf,
    /// Base config JSON (full TrainConfig document; unknown keys rejected)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Optimizer steps
    #[arg(long)]
    steps: Option<usize>,
    /// Master seed; all per-step randomness derives from it
    #[arg(long)]
    seed: Option<u64>,
    /// Loss-weight mode: uncertainty | fixed
    #[arg(long)]
    mode: Option<String>,
    /// Reconstruction-loss weight in fixed mode
    #[arg(long)]
    lambda1: Option<f64>,
    /// MSE weight in fixed mode
    #[arg(long)]
    lambda2: Option<f64>,
    /// Patch side in pixels (multiple of 4)
    #[arg(long)]
    k: Option<usize>,
    /// Generator step size
    #[arg(long = "lr-g")]
    lr_g: Option<f64>,
    /// Discriminator step size
    #[arg(long = "lr-d")]
    lr_d: Option<f64>,
    /// Step size of the learned log-variances
    #[arg(long = "lr-u")]
    lr_u: Option<f64>,
    /// R1 gradient-penalty coefficient
    #[arg(long = "r1-gamma")]
    r1_gamma: Option<f64>,
    /// Seed of the frozen feature extractor
    #[arg(long = "fx-seed")]
    fx_seed: Option<u64>,
    /// Hidden width of the radiance field
    #[arg(long = "field-width")]
    field_width: Option<usize>,
    /// Hidden layers in the density trunk
    #[arg(long = "field-depth")]
    field_depth: Option<usize>,
    /// Samples per ray during training
    #[arg(long = "samples-train")]
    samples_train: Option<usize>,
    /// Samples per ray for evaluation renders
    #[arg(long = "samples-eval")]
    samples_eval: Option<usize>,
    /// Drop the adversarial term from the generator objective
    #[arg(long = "no-adversarial")]
    no_adversarial: bool,
    /// Progress lines to stderr every N steps (0 = silent)
    #[arg(long = "log-every")]
    log_every: Option<usize>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write loss-curve and sigma-trace plots
    #[arg(long)]
    plots: bool,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Trained checkpoint to start from
    #[arg(long)]
    ckpt: PathBuf,
    /// dataset.json holding the input view
    #[arg(long)]
    data: PathBuf,
    /// Which view of the dataset to fine-tune on
    #[arg(long, default_value_t = 0.0)]
    theta: f64,
    /// Fine-tuning steps
    #[arg(long)]
    steps: Option<usize>,
    /// Latent init: best of this many random draws by input-view MSE
    #[arg(long = "m-init")]
    m_init: Option<usize>,
    /// Generator step size
    #[arg(long)]
    lr: Option<f64>,
    /// Latent step size
    #[arg(long = "lr-z")]
    lr_z: Option<f64>,
    /// Seed for latent draws and patch placement
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    /// Checkpoint to render from
    #[arg(long)]
    ckpt: PathBuf,
    /// Views around the orbit
    #[arg(long, default_value_t = 72)]
    views: usize,
    /// Angular spacing in degrees
    #[arg(long = "step-deg", default_value_t = 5.0)]
    step_deg: f64,
    /// Square image side; defaults to the training resolution
    #[arg(long)]
    res: Option<usize>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Accepted for interface uniformity; rendering is deterministic
    #[arg(long, default_value_t = 0)]
    #[allow(dead_code)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// dataset.json of the rendered stack
    #[arg(long)]
    pred: PathBuf,
    /// dataset.json of the reference stack
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Seed of the frozen feature extractor
    #[arg(long = "fx-seed", default_value_t = 0)]
    fx_seed: u64,
    /// External feature-extractor weights (overrides --fx-seed)
    #[arg(long = "fx-weights")]
    fx_weights: Option<PathBuf>,
    /// Samples per kid subset draw
    #[arg(long = "kid-subset", default_value_t = 50)]
    kid_subset: usize,
    /// Number of kid subset draws
    #[arg(long = "kid-subsets", default_value_t = 10)]
    kid_subsets: usize,
    /// Seed of the kid subset draws
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a per-angle PSNR plot
    #[arg(long)]
    plots: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// dataset.json of a DRR dataset
    #[arg(long)]
    data: PathBuf,
    /// Training steps per grid cell
    #[arg(long)]
    steps: Option<usize>,
    /// Comma-separated training seeds, one run per (mode, seed)
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    /// Orbit views rendered for scoring each run
    #[arg(long, default_value_t = 18)]
    views: usize,
    /// Angular spacing of the scoring stack in degrees
    #[arg(long = "step-deg", default_value_t = 20.0)]
    step_deg: f64,
    /// Base config JSON (full TrainConfig document; unknown keys rejected)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Accepted for interface uniformity; per-run seeds come from --seeds
    #[arg(long, default_value_t = 0)]
    #[allow(dead_code)]
    seed: u64,
}

fn out_root() -> PathBuf {
    std::env::var_os("RADFIELD_OUT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn resolve_out(requested: &Option<PathBuf>, sub: &str) -> PathBuf {
    requested.clone().unwrap_or_else(|| out_root().join(sub))
}

/// Reproduction manifest written next to every artifact.
fn write_run_manifest(
    dir: &Path,
    command: &str,
    config: serde_json::Value,
    inputs: &[(&str, &Path)],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut hashes = serde_json::Map::new();
    for (label, path) in inputs {
        hashes.insert(
            label.to_string(),
            serde_json::json!({
                "path": path.display().to_string(),
                "fnv1a": hash_file(path)?,
            }),
        );
    }
    let manifest = serde_json::json!({
        "command": command,
        "argv": std::env::args().collect::<Vec<_>>(),
        "config": config,
        "inputs": hashes,
    });
    std::fs::write(
        dir.join("run_manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn parse_params(kvs: &[String]) -> Result<PhantomParams> {
    let mut out = PhantomParams::new();
    for kv in kvs {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--param `{kv}` is not KEY=VALUE"))?;
        let value: f64 = v
            .parse()
            .with_context(|| format!("--param `{kv}` has a non-numeric value"))?;
        out.insert(k.to_string(), value);
    }
    Ok(out)
}

fn cmd_phantom(args: &PhantomArgs) -> Result<()> {
    let kind: PhantomKind = args.kind.parse()?;
    let params = parse_params(&args.params)?;
    let volume = phantom::make_phantom(kind, args.size, args.seed, &params)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| out_root().join("phantom").join("volume.radvol"));
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    phantom::save_volume(&volume, &out)?;
    let dir = out.parent().unwrap_or(Path::new("."));
    write_run_manifest(
        dir,
        "phantom",
        serde_json::json!({
            "kind": args.kind, "size": args.size, "seed": args.seed,
            "params": params, "out": out.display().to_string(),
        }),
        &[],
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_drr(args: &DrrArgs) -> Result<()> {
    let volume = phantom::load_volume(&args.volume)?;
    let cfg = DrrConfig {
        n_views: args.views,
        step_deg: args.step_deg,
        res: (args.res, args.res),
        n_steps: args.steps,
        fov_extent: args.fov,
        polarity: args.polarity.into(),
    };
    let out = resolve_out(&args.out, "drr");
    let manifest = drr::make_dataset(&volume, &cfg, &out)?;
    write_run_manifest(
        &out,
        "drr",
        serde_json::to_value(&cfg)?,
        &[("volume", args.volume.as_path())],
    )?;
    println!(
        "wrote {} views to {} (volume hash {})",
        manifest.views.len(),
        out.display(),
        manifest.volume_hash
    );
    Ok(())
}

fn build_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))?;
            serde_json::from_str(&text).context("invalid train config")?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    match args.mode.as_deref() {
        None => {}
        Some("uncertainty") => cfg.lambda_mode = LambdaMode::Uncertainty,
        Some("fixed") => {
            let l1 = args.lambda1.unwrap_or(0.5);
            let l2 = args.lambda2.unwrap_or(0.5);
            cfg.lambda_mode = LambdaMode::Fixed {
                lambda1: l1,
                lambda2: l2,
            };
        }
        Some(other) => bail!("unknown --mode `{other}` (expected uncertainty or fixed)"),
    }
    if let Some(v) = args.k {
        cfg.k = v;
    }
    if let Some(v) = args.lr_g {
        cfg.lr_g = v;
    }
    if let Some(v) = args.lr_d {
        cfg.lr_d = v;
    }
    if let Some(v) = args.lr_u {
        cfg.lr_u = v;
    }
    if let Some(v) = args.r1_gamma {
        cfg.r1_gamma = v;
    }
    if let Some(v) = args.fx_seed {
        cfg.fx_seed = v;
    }
    if let Some(v) = args.field_width {
        cfg.field_arch.width = v;
        cfg.field_arch.color_width = (v / 2).max(1);
    }
    if let Some(v) = args.field_depth {
        cfg.field_arch.depth = v;
    }
    if let Some(v) = args.samples_train {
        cfg.n_samples_train = v;
    }
    if let Some(v) = args.samples_eval {
        cfg.n_samples_eval = v;
    }
    if args.no_adversarial {
        cfg.include_adversarial = false;
    }
    if let Some(v) = args.log_every {
        cfg.log_every = v;
    }
    Ok(cfg)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = build_train_config(args)?;
    let data = drr::load_dataset(&args.data)?;
    let out = resolve_out(&args.out, "train");
    std::fs::create_dir_all(&out)?;

    let ckpt = trainloop::train(&cfg, &data)?;
    let ckpt_path = out.join("checkpoint.rfck");
    ckpt.save(&ckpt_path)?;
    ckpt.write_history_csv(&out.join("history.csv"))?;
    std::fs::write(
        out.join("resolved_config.json"),
        serde_json::to_string_pretty(&ckpt.config)?,
    )?;
    write_run_manifest(
        &out,
        "train",
        serde_json::to_value(&ckpt.config)?,
        &[("dataset", args.data.as_path())],
    )?;
    if args.plots {
        let d: Vec<f64> = ckpt.history.iter().map(|r| r.loss_d).collect();
        let gadv: Vec<f64> = ckpt.history.iter().map(|r| r.loss_g_adv).collect();
        let mse: Vec<f64> = ckpt.history.iter().map(|r| r.l_mse).collect();
        line_plot(&out.join("loss_curves.png"), &[&d, &gadv, &mse])?;
        let s1: Vec<f64> = ckpt.history.iter().map(|r| r.sigma1_sq).collect();
        let s2: Vec<f64> = ckpt.history.iter().map(|r| r.sigma2_sq).collect();
        line_plot(&out.join("sigma_trace.png"), &[&s1, &s2])?;
    }
    println!(
        "trained {} steps; checkpoint at {}",
        ckpt.step,
        ckpt_path.display()
    );
    Ok(())
}

fn cmd_finetune(args: &FinetuneArgs) -> Result<()> {
    let ckpt = RunCheckpoint::load(&args.ckpt)?;
    let data = drr::load_dataset(&args.data)?;
    let xray = data
        .view_by_theta(args.theta)
        .with_context(|| format!("dataset has no view at theta {}", args.theta))?
        .clone();
    let mut fcfg = FinetuneConfig::default();
    if let Some(v) = args.steps {
        fcfg.steps = v;
    }
    if let Some(v) = args.m_init {
        fcfg.m_init = v;
    }
    if let Some(v) = args.lr {
        fcfg.lr = v;
    }
    if let Some(v) = args.lr_z {
        fcfg.lr_z = v;
    }
    if let Some(v) = args.seed {
        fcfg.seed = v;
    }

    let out = resolve_out(&args.out, "finetune");
    std::fs::create_dir_all(&out)?;
    let tuned = trainloop::finetune(&ckpt, &xray, &fcfg)?;
    let ckpt_path = out.join("checkpoint.rfck");
    tuned.save(&ckpt_path)?;
    let rows: Vec<Vec<f64>> = tuned
        .finetune_history
        .iter()
        .map(|r| vec![r.step as f64, r.l_mse_input, r.l_r, r.l_task])
        .collect();
    radfield::io::write_csv(
        &out.join("finetune_history.csv"),
        &["step", "l_mse_input", "l_r", "l_task"],
        &rows,
    )?;
    std::fs::write(
        out.join("resolved_config.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "finetune": fcfg, "theta": args.theta, "train": tuned.config,
        }))?,
    )?;
    write_run_manifest(
        &out,
        "finetune",
        serde_json::to_value(fcfg)?,
        &[
            ("checkpoint", args.ckpt.as_path()),
            ("dataset", args.data.as_path()),
        ],
    )?;
    println!("fine-tuned; checkpoint at {}", ckpt_path.display());
    Ok(())
}

fn cmd_render(args: &RenderArgs) -> Result<()> {
    let ckpt = RunCheckpoint::load(&args.ckpt)?;
    let res = args.res.map(|r| (r, r)).unwrap_or(ckpt.config.image_res);
    let out = resolve_out(&args.out, "render");
    let manifest = trainloop::render_full(&ckpt, args.views, args.step_deg, res, &out)?;
    write_run_manifest(
        &out,
        "render",
        serde_json::json!({
            "views": args.views, "step_deg": args.step_deg, "res": res,
            "params_hash": trainloop::params_hash(&ckpt),
        }),
        &[("checkpoint", args.ckpt.as_path())],
    )?;
    println!(
        "rendered {} views to {}",
        manifest.views.len(),
        out.display()
    );
    Ok(())
}

fn load_extractor(fx_seed: u64, fx_weights: &Option<PathBuf>) -> Result<FeatureExtractor> {
    let spec = match fx_weights {
        Some(path) => FxSpec::External { path: path.clone() },
        None => FxSpec::SeededRandom { seed: fx_seed },
    };
    Ok(make_feature_extractor(&spec)?)
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let fx = load_extractor(args.fx_seed, &args.fx_weights)?;
    let kid_opts = KidOpts {
        subset_size: args.kid_subset,
        n_subsets: args.kid_subsets,
        seed: args.seed,
    };
    let report = metrics::evaluate_stack(&args.pred, &args.reference, &fx, &kid_opts)?;
    let out = resolve_out(&args.out, "eval");
    report.save(&out)?;
    write_run_manifest(
        &out,
        "eval",
        serde_json::json!({ "kid": kid_opts, "extractor": report.extractor }),
        &[
            ("pred", args.pred.as_path()),
            ("ref", args.reference.as_path()),
        ],
    )?;
    if args.plots {
        let psnrs: Vec<f64> = report.per_view.iter().map(|v| v.psnr).collect();
        let ssims: Vec<f64> = report.per_view.iter().map(|v| v.ssim * 100.0).collect();
        line_plot(&out.join("per_angle_metrics.png"), &[&psnrs, &ssims])?;
    }
    println!(
        "psnr {:.3} dB  ssim {:.4}  fid {:.4}  kid {:.5} +/- {:.5}  ({} views)",
        report.psnr_mean,
        report.ssim_mean,
        report.fid,
        report.kid_mean,
        report.kid_std,
        report.n_views
    );
    println!("report written to {}", out.display());
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let mut base = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str::<TrainConfig>(&text).context("invalid train config")?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = args.steps {
        base.steps = v;
    }
    let seeds: Vec<u64> = args
        .seeds
        .split(',')
        .map(|s| s.trim().parse().context("bad --seeds entry"))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        bail!("--seeds must list at least one seed");
    }
    let data = drr::load_dataset(&args.data)?;
    let report = ablate(&base, &data, &seeds, args.views, args.step_deg)?;

    let out = resolve_out(&args.out, "ablate");
    std::fs::create_dir_all(&out)?;
    std::fs::write(
        out.join("ablation.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    let table = report.render_table();
    std::fs::write(out.join("ablation.txt"), &table)?;
    write_run_manifest(
        &out,
        "ablate",
        serde_json::json!({ "base": base, "seeds": seeds, "views": args.views, "step_deg": args.step_deg }),
        &[("dataset", args.data.as_path())],
    )?;
    print!("{table}");
    println!("written to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Phantom(a) => cmd_phantom(a),
        Cmd::Drr(a) => cmd_drr(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Finetune(a) => cmd_finetune(a),
        Cmd::Render(a) => cmd_render(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
