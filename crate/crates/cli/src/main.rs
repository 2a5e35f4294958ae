//! `ageview` — train, sample, and evaluate the viewpoint-aware face-aging
//! pipeline from the command line.
//!
//! A run lives in a checkpoint directory. `train --stage modulator` creates
//! it; every later stage loads it, trains one parameter family, and writes
//! it back together with a per-step JSONL log. `generate-dataset` renders
//! the multiview aging dataset the diffusion stages train on. `sample`
//! produces aged multiview frames for a source face, `eval` runs the full
//! metric protocol, and `report` tiles rendered frames into a contact
//! sheet.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::io::Write;
use std::path::{Path, PathBuf};

use ageview_core::config::{ConfigError, RunConfig};
use ageview_core::dataset::{png_bytes_to_image, Dataset};
use ageview_core::harness::{
    evaluate, sample_multiview, save_grid_png, save_image_png, EvalOpts, Pipeline, SampleOpts,
    Stage, StepRecord,
};
use ageview_core::world::Pose;
use ageview_core::Real;

const CONFIG_HELP: &str = "\
CONFIGURATION FILE (TOML; every key optional, defaults shown):
  [world]        seed = 1000            world/generator seed
                 image_size = 64        output resolution (16 * 2^k)
  [model]        base_width = 32        UNet channel width (multiple of 8)
                 separate_ref_kv = false  dedicated K/V weights for reference tokens
                 seed = 2000            parameter initialization seed
  [diffusion]    train_steps = 1000     noise schedule length T
                 alpha_min = 0.0025     terminal signal level, in (0, 1)
  [sampler]      steps = 100            DDIM intervals (1..=train_steps)
                 guidance_scale = 3.0   classifier-free guidance s
  [dataset]      n_identities = 64      identities rendered
                 views_per_identity = 8 poses per identity
                 ages_per_identity = 3  fixed age triplet (younger/source/older)
                 seed = 1234            dataset sampling seed
  [stage1]       steps = 300, lr = 0.01, seed = 7       age-modulator training
  [stage2_aging] steps = 300, lr = 0.001, seed = 11     aging-denoiser training
  [stage2_view]  steps = 200, lr = 0.001, seed = 8,     view-model fine-tune
                 n_identities = 6, views_per_identity = 4
  [stage2_ctrl]  steps = 200, lr = 0.001, seed = 9      viewpoint controller
  [stage3]       steps = 150, lr = 0.001, seed = 10,    frame attention
                 frames = 4             frames per training stack
  [eval]         n_subjects = 16, seed = 99             evaluation protocol

A malformed or invalid file exits with status 2 and names the bad key.";

#[derive(Parser)]
#[command(
    name = "ageview",
    version,
    about = "Viewpoint-aware face aging: dataset factory, staged training, multiview sampling",
    after_long_help = CONFIG_HELP
)]
struct Cli {
    /// TOML run configuration (defaults apply when omitted).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one stage and update the checkpoint.
    Train(TrainArgs),
    /// Render the multiview aging dataset with the trained modulator.
    GenerateDataset(GenerateArgs),
    /// Sample aged multiview frames for one source face.
    Sample(SampleArgs),
    /// Run the evaluation protocol and write the metric report.
    Eval(EvalArgs),
    /// Tile rendered PNG frames into one contact sheet.
    Report(ReportArgs),
    /// Off-ledger experiment arms.
    Experiment(ExperimentArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum CliStage {
    Modulator,
    Aging,
    ViewFinetune,
    Controller,
    Temporal,
}

impl From<CliStage> for Stage {
    fn from(s: CliStage) -> Stage {
        match s {
            CliStage::Modulator => Stage::Modulator,
            CliStage::Aging => Stage::Aging,
            CliStage::ViewFinetune => Stage::ViewFinetune,
            CliStage::Controller => Stage::Controller,
            CliStage::Temporal => Stage::Temporal,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Which stage to train (stages run in this order).
    #[arg(long, value_enum)]
    stage: CliStage,
    /// Checkpoint directory; created by the modulator stage.
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    /// Generated dataset directory (aging, controller, temporal stages).
    #[arg(long, value_name = "DIR")]
    dataset: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    /// Output dataset directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    /// Source face PNG ([-1,1] RGB render or photo stand-in).
    #[arg(long, value_name = "FILE", conflicts_with = "source_seed")]
    source: Option<PathBuf>,
    /// Render the source face from this generator seed instead.
    #[arg(long, value_name = "SEED")]
    source_seed: Option<u64>,
    /// Target age in years.
    #[arg(long)]
    age: f64,
    /// DDIM intervals (default: sampler.steps from the configuration).
    #[arg(long)]
    steps: Option<usize>,
    /// Guidance scale (default: sampler.guidance_scale).
    #[arg(long)]
    guidance_scale: Option<f64>,
    /// Noise seed for the sampled frames.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Camera azimuth, radians.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    azimuth: f64,
    /// Camera polar angle, radians.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    polar: f64,
    /// Azimuth sweep start:end:steps (radians), at the fixed polar angle.
    #[arg(long, value_name = "START:END:STEPS", allow_hyphen_values = true)]
    pose_sweep: Option<String>,
    /// Without --pose-sweep: number of jointly denoised copies of the pose.
    #[arg(long, default_value_t = 1)]
    frames: usize,
    /// Skip the viewpoint controller even if trained.
    #[arg(long)]
    no_controller: bool,
    /// Skip frame attention even if trained.
    #[arg(long)]
    no_temporal: bool,
    /// Output directory for frame PNGs and the grid.
    #[arg(long, value_name = "DIR", default_value = "samples")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_name = "DIR")]
    checkpoint: PathBuf,
    /// Report JSON path (stdout when omitted).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Override eval.n_subjects.
    #[arg(long)]
    subjects: Option<usize>,
    /// Score the four large-gap transfers too.
    #[arg(long)]
    large_gap: bool,
    /// Score the image-conditioning arm (needs `experiment rgb-arm` first).
    #[arg(long)]
    ablation: bool,
    #[arg(long)]
    no_controller: bool,
    #[arg(long)]
    no_temporal: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory of PNG frames (a dataset directory works).
    #[arg(long, value_name = "DIR")]
    images: PathBuf,
    /// Grid columns.
    #[arg(long, default_value_t = 8)]
    cols: usize,
    /// Output PNG.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(subcommand)]
    which: ExperimentCmd,
}

#[derive(Subcommand)]
enum ExperimentCmd {
    /// Train the image-conditioning controller arm (`ctrlrgb.`), the
    /// comparison twin of the pose-token controller. Requires a completed
    /// controller stage; runs outside the stage ledger.
    RgbArm {
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            if e.downcast_ref::<ConfigError>().is_some() {
                eprintln!("configuration error: {e}");
                std::process::exit(2);
            }
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => {
            let cfg = RunConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::Train(args) => train(cfg, args),
        Cmd::GenerateDataset(args) => generate(cfg, args),
        Cmd::Sample(args) => sample(cfg, args),
        Cmd::Eval(args) => eval(cfg, args),
        Cmd::Report(args) => report(args),
        Cmd::Experiment(args) => experiment(cfg, args),
    }
}

fn checkpoint_exists(dir: &Path) -> bool {
    dir.join("meta.json").is_file()
}

fn load_pipeline(cfg: RunConfig, dir: &Path) -> Result<Pipeline<Real>> {
    Ok(Pipeline::<Real>::load_checkpoint(cfg, dir)
        .with_context(|| format!("loading checkpoint at {}", dir.display()))?)
}

fn load_dataset(dir: &Path) -> Result<Dataset<Real>> {
    Dataset::<Real>::load(dir)
        .with_context(|| format!("loading dataset at {}", dir.display()))
}

fn train(cfg: RunConfig, args: TrainArgs) -> Result<()> {
    let stage: Stage = args.stage.into();
    let mut pipeline = if checkpoint_exists(&args.checkpoint) {
        load_pipeline(cfg, &args.checkpoint)?
    } else {
        if stage != Stage::Modulator {
            bail!(
                "no checkpoint at {}; train --stage modulator creates one",
                args.checkpoint.display()
            );
        }
        Pipeline::<Real>::new(cfg)?
    };
    // Report stage-order problems before touching the dataset.
    if let Some(pre) = stage.prerequisite() {
        if !pipeline.is_completed(pre) {
            bail!("stage \"{stage}\" requires completed stage \"{pre}\" first");
        }
    }
    let dataset = match (&args.dataset, stage.needs_dataset()) {
        (Some(dir), _) => Some(load_dataset(dir)?),
        (None, false) => None,
        (None, true) => bail!(
            "stage \"{stage}\" trains on the generated dataset; pass --dataset <DIR> \
             (see generate-dataset)"
        ),
    };
    log::info!("training stage \"{stage}\"");
    let rep = pipeline.run_stage(stage, dataset.as_ref())?;
    pipeline.save_checkpoint(&args.checkpoint)?;

    let log_path = args.checkpoint.join(format!("train-{stage}.jsonl"));
    write_train_log(&log_path, &rep.losses, rep.term_reports.as_deref())?;
    log::info!(
        "stage \"{stage}\": {} steps, loss {:.6} -> {:.6}; log {}",
        rep.losses.len(),
        rep.first_loss(),
        rep.last_loss(),
        log_path.display()
    );
    println!(
        "{}",
        serde_json::json!({
            "stage": stage.name(),
            "steps": rep.losses.len(),
            "first_loss": rep.first_loss(),
            "last_loss": rep.last_loss(),
            "lineage": rep.lineage,
            "checkpoint": args.checkpoint.display().to_string(),
        })
    );
    Ok(())
}

fn write_train_log(
    path: &Path,
    losses: &[f64],
    term_reports: Option<&[ageview_core::losses::LossReport]>,
) -> Result<()> {
    let file = std::fs::File::create(path)
        .with_context(|| format!("creating {}", path.display()))?;
    let mut w = std::io::BufWriter::new(file);
    match term_reports {
        Some(reports) => {
            for r in reports {
                writeln!(w, "{}", serde_json::to_string(r)?)?;
            }
        }
        None => {
            for (step, loss) in losses.iter().enumerate() {
                writeln!(w, "{}", serde_json::to_string(&StepRecord { step, loss: *loss })?)?;
            }
        }
    }
    Ok(())
}

fn generate(cfg: RunConfig, args: GenerateArgs) -> Result<()> {
    let pipeline = load_pipeline(cfg, &args.checkpoint)?;
    let header = pipeline.generate_dataset(&args.out)?;
    log::info!(
        "dataset: {} identities x {} views x {} ages at {}",
        header.config.n_identities,
        header.config.views_per_identity,
        header.config.ages_per_identity,
        args.out.display()
    );
    println!("{}", serde_json::to_string(&header)?);
    Ok(())
}

fn parse_pose_sweep(s: &str) -> Result<(f64, f64, usize)> {
    let parts: Vec<&str> = s.split(':').map(str::trim).collect();
    if parts.len() != 3 {
        bail!("--pose-sweep wants START:END:STEPS, got {s:?}");
    }
    let start: f64 = parts[0].parse().map_err(|_| anyhow!("bad sweep start {:?}", parts[0]))?;
    let end: f64 = parts[1].parse().map_err(|_| anyhow!("bad sweep end {:?}", parts[1]))?;
    let steps: usize = parts[2].parse().map_err(|_| anyhow!("bad sweep steps {:?}", parts[2]))?;
    if steps < 2 {
        bail!("--pose-sweep needs at least 2 steps");
    }
    Ok((start, end, steps))
}

fn sample(cfg: RunConfig, args: SampleArgs) -> Result<()> {
    let pipeline = load_pipeline(cfg, &args.checkpoint)?;
    let world = &pipeline.world;

    let source = match (&args.source, args.source_seed) {
        (Some(path), None) => {
            let bytes = std::fs::read(path)
                .with_context(|| format!("reading {}", path.display()))?;
            png_bytes_to_image::<Real>(&bytes, &path.display().to_string())?
        }
        (None, seed) => {
            let code = world.sample_latent(seed.unwrap_or(1));
            world.render_array(&code.styles, Pose::frontal())?
        }
        (Some(_), Some(_)) => unreachable!("clap forbids both"),
    };

    let poses: Vec<Pose> = match &args.pose_sweep {
        Some(spec) => {
            let (start, end, n) = parse_pose_sweep(spec)?;
            (0..n)
                .map(|i| {
                    let f = i as f64 / (n - 1) as f64;
                    Pose::new(start + f * (end - start), args.polar)
                })
                .collect()
        }
        None => {
            if args.frames < 1 {
                bail!("--frames must be at least 1");
            }
            vec![Pose::new(args.azimuth, args.polar); args.frames]
        }
    };
    for p in &poses {
        if !p.is_valid() {
            bail!("pose ({}, {}) out of range", p.azimuth, p.polar);
        }
    }

    let mut ddim = pipeline.cfg.ddim();
    if let Some(s) = args.steps {
        ddim.steps = s;
    }
    if let Some(gs) = args.guidance_scale {
        ddim.guidance_scale = gs;
    }
    let mut opts = SampleOpts::new(args.age, poses, ddim, args.seed);
    opts.use_controller = pipeline.is_completed(Stage::Controller) && !args.no_controller;
    opts.use_temporal = pipeline.is_completed(Stage::Temporal) && !args.no_temporal;
    log::info!(
        "sampling {} frame(s) at age {} (controller: {}, frame attention: {})",
        opts.poses.len(),
        args.age,
        opts.use_controller,
        opts.use_temporal
    );

    let sched = pipeline.cfg.schedule();
    let out = sample_multiview(world, &pipeline.store, &pipeline.bundle, &sched, &source, &opts)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let mut frame_files = Vec::new();
    for (i, img) in out.images.iter().enumerate() {
        let path = args.out.join(format!("frame_{i:02}.png"));
        save_image_png(&path, img)?;
        frame_files.push(path.display().to_string());
    }
    let grid = args.out.join("grid.png");
    save_grid_png(&grid, &out.images, out.images.len().min(8))?;

    let measured: Vec<serde_json::Value> = out
        .images
        .iter()
        .zip(&opts.poses)
        .map(|(img, pose)| {
            let est = world.estimate_pose_array(img);
            serde_json::json!({
                "requested_azimuth": pose.azimuth,
                "requested_polar": pose.polar,
                "estimated_azimuth": est.azimuth,
                "estimated_polar": est.polar,
                "predicted_age": world.predict_age_array(img),
            })
        })
        .collect();
    println!(
        "{}",
        serde_json::json!({
            "target_age": args.age,
            "source_age": world.predict_age_array(&source),
            "frames": frame_files,
            "grid": grid.display().to_string(),
            "measurements": measured,
        })
    );
    Ok(())
}

fn eval(cfg: RunConfig, args: EvalArgs) -> Result<()> {
    let pipeline = load_pipeline(cfg, &args.checkpoint)?;
    if args.ablation && !pipeline.store.contains("ctrlrgb.proj.hi.w") {
        bail!("--ablation needs the image-conditioning arm; run `ageview experiment rgb-arm` first");
    }
    let opts = EvalOpts {
        n_subjects: args.subjects.unwrap_or(pipeline.cfg.eval.n_subjects),
        seed: pipeline.cfg.eval.seed,
        ddim: pipeline.cfg.ddim(),
        use_controller: pipeline.is_completed(Stage::Controller) && !args.no_controller,
        use_temporal: pipeline.is_completed(Stage::Temporal) && !args.no_temporal,
        with_large_gap: args.large_gap,
        with_ablation: args.ablation,
    };
    log::info!(
        "evaluating {} subject(s) (controller: {}, frame attention: {})",
        opts.n_subjects,
        opts.use_controller,
        opts.use_temporal
    );
    let sched = pipeline.cfg.schedule();
    let report =
        evaluate(&pipeline.world, &pipeline.store, &pipeline.bundle, &sched, &opts)?;
    let text = report.to_json();
    match &args.out {
        Some(path) => {
            std::fs::write(path, &text)
                .with_context(|| format!("writing {}", path.display()))?;
            log::info!(
                "age MAE {:.2} y, identity cosine {:.3}, pose error {:.4} rad^2 -> {}",
                report.age_mae,
                report.identity_cosine,
                report.pose_l2_rad2,
                path.display()
            );
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(&args.images)
        .with_context(|| format!("reading {}", args.images.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no PNG files under {}", args.images.display());
    }
    let mut images = Vec::with_capacity(files.len());
    let mut tile_shape: Option<Vec<usize>> = None;
    for f in &files {
        let bytes = std::fs::read(f)?;
        let img = png_bytes_to_image::<Real>(&bytes, &f.display().to_string())?;
        match &tile_shape {
            None => {
                tile_shape = Some(img.shape().to_vec());
                images.push(img);
            }
            Some(sh) if img.shape() == &sh[..] => images.push(img),
            Some(_) => log::warn!("skipping {}: tile size differs", f.display()),
        }
    }
    save_grid_png(&args.out, &images, args.cols)?;
    log::info!("tiled {} frames into {}", images.len(), args.out.display());
    println!(
        "{}",
        serde_json::json!({ "frames": images.len(), "grid": args.out.display().to_string() })
    );
    Ok(())
}

fn experiment(cfg: RunConfig, args: ExperimentArgs) -> Result<()> {
    match args.which {
        ExperimentCmd::RgbArm { checkpoint, dataset } => {
            let mut pipeline = load_pipeline(cfg, &checkpoint)?;
            if !pipeline.is_completed(Stage::Controller) {
                bail!("the rgb arm mirrors the controller stage; train --stage controller first");
            }
            let ds = load_dataset(&dataset)?;
            let losses = pipeline.attach_and_train_rgb_arm(&ds)?;
            pipeline.save_checkpoint(&checkpoint)?;
            let log_path = checkpoint.join("train-rgb-arm.jsonl");
            write_train_log(&log_path, &losses, None)?;
            log::info!(
                "rgb arm: {} steps, loss {:.6} -> {:.6}",
                losses.len(),
                losses[0],
                losses[losses.len() - 1]
            );
            println!(
                "{}",
                serde_json::json!({
                    "arm": "rgb",
                    "steps": losses.len(),
                    "first_loss": losses[0],
                    "last_loss": losses[losses.len() - 1],
                })
            );
            Ok(())
        }
    }
}
