//! `sow`: generation, inversion, planning and experiments from the command line.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use sow_core::config::RunConfig;
use sow_core::denoiser::{DenoiserModel, ToyAttentionDenoiser};
use sow_core::engine::{prompt_condition, BackgroundKind, Generator, Preset};
use sow_core::harness::{self, ExperimentReport};
use sow_core::planner::{self, HttpMllmClient, MllmClient, PlannerMode, PlannerRequest, PromptTemplates};
use sow_core::sampler::{invert_and_store, inversion_steps};
use sow_core::{raster, LatentGrid, SowError, TokenGrid};

#[derive(Parser, Debug)]
#[command(name = "sow", version, about = "Cyclic one-way diffusion on desk-scale denoisers")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parent directory for run outputs.
    #[arg(long, global = true, value_name = "DIR")]
    output_dir: Option<PathBuf>,
    /// Prompt templates directory for the MLLM planner.
    #[arg(long, global = true, value_name = "DIR")]
    templates: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate an image around a visual condition.
    Generate(GenerateArgs),
    /// Run one of the mechanism experiments and write its CSV.
    Experiment(ExperimentArgs),
    /// Plan the condition and related boxes and print them as JSON.
    Plan(PlanArgs),
    /// Invert an image along the step grid and export the latents.
    Invert(InvertArgs),
    /// Print the resolved configuration as TOML.
    Config,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    #[value(name = "normal")]
    Normal,
    #[value(name = "attribute_editing")]
    AttributeEditing,
    #[value(name = "style_transfer")]
    StyleTransfer,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Normal => Preset::Normal,
            PresetArg::AttributeEditing => Preset::AttributeEditing,
            PresetArg::StyleTransfer => Preset::StyleTransfer,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackgroundArg {
    Gray,
    Black,
    Random,
}

impl From<BackgroundArg> for BackgroundKind {
    fn from(b: BackgroundArg) -> Self {
        match b {
            BackgroundArg::Gray => BackgroundKind::Gray,
            BackgroundArg::Black => BackgroundKind::Black,
            BackgroundArg::Random => BackgroundKind::Random,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PlannerArg {
    Stub,
    Mllm,
}

impl From<PlannerArg> for PlannerMode {
    fn from(p: PlannerArg) -> Self {
        match p {
            PlannerArg::Stub => PlannerMode::Stub,
            PlannerArg::Mllm => PlannerMode::Mllm,
        }
    }
}

#[derive(Args, Debug)]
struct PlannerFlags {
    #[arg(long, value_enum)]
    planner: Option<PlannerArg>,
    /// Pixel canvas the planner works in.
    #[arg(long)]
    canvas: Option<usize>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Visual condition image (PNG, PGM or PPM).
    #[arg(long, value_name = "IMAGE")]
    condition: PathBuf,
    #[arg(long, default_value = "")]
    prompt: String,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long)]
    cycles: Option<usize>,
    #[arg(long)]
    t1: Option<usize>,
    #[arg(long)]
    t2: Option<usize>,
    /// Preservation steps, comma separated.
    #[arg(long, value_delimiter = ',')]
    t3: Option<Vec<usize>>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    jump_target: Option<usize>,
    #[arg(long, value_enum)]
    background: Option<BackgroundArg>,
    #[arg(long)]
    guidance_scale: Option<f64>,
    /// Disable the gated attention modulation.
    #[arg(long)]
    no_modulation: bool,
    /// Resample a condition that does not match the planned box.
    #[arg(long)]
    resize: bool,
    /// Toy weights file.
    #[arg(long, value_name = "FILE")]
    weights: Option<PathBuf>,
    /// Also export the inverted condition trajectory.
    #[arg(long)]
    save_trajectory: bool,
    /// Write into this directory instead of a fresh run directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(flatten)]
    planner: PlannerFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ExperimentName {
    #[value(name = "merge")]
    Merge,
    #[value(name = "attention_bias")]
    AttentionBias,
    #[value(name = "cycle_progress")]
    CycleProgress,
    #[value(name = "sensitivity")]
    Sensitivity,
    #[value(name = "disturb_reconstruct")]
    DisturbReconstruct,
}

impl ExperimentName {
    fn as_str(self) -> &'static str {
        match self {
            ExperimentName::Merge => "merge",
            ExperimentName::AttentionBias => "attention_bias",
            ExperimentName::CycleProgress => "cycle_progress",
            ExperimentName::Sensitivity => "sensitivity",
            ExperimentName::DisturbReconstruct => "disturb_reconstruct",
        }
    }
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(value_enum)]
    name: ExperimentName,
    /// Number of seeds (experiments that average over seeds).
    #[arg(long)]
    seeds: Option<u64>,
    /// Schedule positions: merge steps or stick steps, comma separated.
    /// `a..b:s` expands to a, a+s, ..., b.
    #[arg(long, value_parser = parse_list)]
    steps: Option<NumList>,
    /// Cycle counts for cycle_progress, e.g. `1..10` or `1,2,5`.
    #[arg(long, value_parser = parse_list)]
    cycles: Option<NumList>,
    /// Window starts for sensitivity.
    #[arg(long, value_parser = parse_list)]
    window_starts: Option<NumList>,
    /// Skip raster snapshots.
    #[arg(long)]
    no_images: bool,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlanArgs {
    /// Visual condition image; a gray placeholder when omitted.
    #[arg(long, value_name = "IMAGE")]
    condition: Option<PathBuf>,
    #[arg(long, default_value = "")]
    prompt: String,
    #[command(flatten)]
    planner: PlannerFlags,
}

#[derive(Args, Debug)]
struct InvertArgs {
    #[arg(long, value_name = "IMAGE")]
    input: PathBuf,
    /// Coarse timestep to invert to.
    #[arg(long)]
    to: usize,
    #[arg(long, default_value = "")]
    prompt: String,
    #[arg(long, value_name = "FILE")]
    weights: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Clone, Debug)]
struct NumList(Vec<usize>);

fn parse_list(s: &str) -> Result<NumList, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((lo, rest)) = part.split_once("..") {
            let (hi, step) = rest.split_once(':').unwrap_or((rest, "1"));
            let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{part}`: {e}"));
            let (lo, hi, step) = (parse(lo)?, parse(hi)?, parse(step)?);
            if step == 0 || lo > hi {
                return Err(format!("`{part}` is not an increasing range"));
            }
            out.extend((lo..=hi).step_by(step));
        } else {
            out.push(part.parse().map_err(|e| format!("`{part}`: {e}"))?);
        }
    }
    if out.is_empty() {
        return Err("empty list".into());
    }
    Ok(NumList(out))
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<SowError> for Failure {
    fn from(e: SowError) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(usage)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    let templates = match &cli.templates {
        Some(dir) => PromptTemplates::from_dir(dir).map_err(usage)?,
        None => PromptTemplates::default(),
    };
    match cli.command {
        Command::Generate(args) => generate(cfg, &templates, args),
        Command::Experiment(args) => experiment(cfg, args),
        Command::Plan(args) => plan(cfg, &templates, args),
        Command::Invert(args) => invert(cfg, args),
        Command::Config => {
            cfg.validate().map_err(usage)?;
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn apply_planner_flags(cfg: &mut RunConfig, flags: &PlannerFlags) {
    if let Some(p) = flags.planner {
        cfg.planner.mode = p.into();
    }
    if let Some(c) = flags.canvas {
        cfg.planner.canvas = c;
    }
}

/// The HTTP client when the planner runs in MLLM mode.
fn mllm_client(cfg: &RunConfig) -> Result<Option<HttpMllmClient>, Failure> {
    match cfg.planner.mode {
        PlannerMode::Stub => Ok(None),
        PlannerMode::Mllm => HttpMllmClient::from_env(Duration::from_secs(cfg.planner.timeout_secs))
            .map(Some)
            .map_err(|_| {
                usage(format!(
                    "planner mode mllm needs the {} environment variable",
                    planner::ENV_ENDPOINT
                ))
            }),
    }
}

/// Loads an image and matches the model's channel count (grayscale is
/// repeated across channels, colour is averaged down to one).
fn load_condition(path: &Path, channels: usize) -> anyhow::Result<LatentGrid> {
    let img = raster::load_latent(path).with_context(|| format!("reading {}", path.display()))?;
    let (c, h, w) = img.shape();
    if c == channels {
        return Ok(img);
    }
    let arr = img.array();
    let out = match (c, channels) {
        (1, n) => ndarray::Array3::from_shape_fn((n, h, w), |(_, r, col)| arr[[0, r, col]]),
        (_, 1) => ndarray::Array3::from_shape_fn((1, h, w), |(_, r, col)| {
            (0..c).map(|k| arr[[k, r, col]]).sum::<f64>() / c as f64
        }),
        _ => anyhow::bail!("{} has {c} channels, the model expects {channels}", path.display()),
    };
    Ok(LatentGrid::from_array(out))
}

fn load_model(cfg: &RunConfig) -> anyhow::Result<ToyAttentionDenoiser> {
    cfg.build_model().context("loading the denoiser")
}

fn timestamp() -> String {
    chrono::Local::now().format("%Y%m%dT%H%M%S").to_string()
}

fn generate(mut cfg: RunConfig, templates: &PromptTemplates, args: GenerateArgs) -> Result<(), Failure> {
    let e = &mut cfg.engine;
    if let Some(p) = args.preset {
        e.preset = p.into();
    }
    if let Some(v) = args.cycles {
        e.cycles = v;
    }
    if let Some(v) = args.t1 {
        e.t1 = v;
    }
    if let Some(v) = args.t2 {
        e.t2 = v;
    }
    if let Some(v) = &args.t3 {
        e.t3 = Some(v.clone());
    }
    if let Some(v) = args.eta {
        e.eta = Some(v);
    }
    if let Some(v) = args.jump_target {
        e.jump_target = Some(v);
    }
    if let Some(v) = args.background {
        e.background = v.into();
    }
    if let Some(v) = args.guidance_scale {
        e.guidance_scale = v;
    }
    if args.no_modulation {
        e.modulation = false;
    }
    if let Some(w) = &args.weights {
        cfg.denoiser.weights = Some(w.clone());
    }
    apply_planner_flags(&mut cfg, &args.planner);
    cfg.validate().map_err(usage)?;
    let client = mllm_client(&cfg)?;

    let model = load_model(&cfg)?;
    let schedule = cfg.build_schedule()?;
    let condition = load_condition(&args.condition, cfg.denoiser.toy.channels)?;
    let request = PlannerRequest::new(condition, args.prompt.clone(), cfg.planner.canvas)?;
    let generator = Generator {
        model: &model,
        schedule: &schedule,
        grid: cfg.step_grid(&schedule)?,
        engine: cfg.engine.clone(),
        modulation: cfg.modulation,
        planner: cfg.planner.clone(),
        templates: templates.clone(),
        client: client.as_ref().map(|c| c as &dyn MllmClient),
        latent_shape: cfg.latent_shape(),
        resize_condition: args.resize,
    };
    let run = generator
        .generate(&request, cfg.seed, cfg.echo()?, None)
        .context("generation failed")?;

    let dir = args.out.unwrap_or_else(|| {
        cfg.output_dir
            .join(format!("{}_{}_{}", cfg.seed, cfg.engine.preset.name(), timestamp()))
    });
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    raster::save_latent(&run.output, &dir.join("output.png"))?;
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&run.manifest).context("encoding manifest")?,
    )
    .context("writing manifest")?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?).context("writing config")?;
    if args.save_trajectory {
        run.trajectory.export(&dir.join("trajectory"))?;
    }
    if run.manifest.plan.fallback {
        eprintln!("warning: planner fell back to the stub plan");
    }
    println!("{}", dir.display());
    Ok(())
}

fn experiment(mut cfg: RunConfig, args: ExperimentArgs) -> Result<(), Failure> {
    let x = &mut cfg.experiments;
    if let Some(n) = args.seeds {
        x.attention_bias.seeds = n;
        x.cycle_progress.seeds = n;
        x.sensitivity.seeds = n;
        x.disturb_reconstruct.seeds = n;
    }
    if let Some(NumList(steps)) = &args.steps {
        match args.name {
            ExperimentName::Merge => x.merge.steps = steps.clone(),
            ExperimentName::DisturbReconstruct => x.disturb_reconstruct.stick_steps = steps.clone(),
            other => return Err(usage(format!("--steps does not apply to {}", other.as_str()))),
        }
    }
    if let Some(NumList(cycles)) = &args.cycles {
        if args.name != ExperimentName::CycleProgress {
            return Err(usage("--cycles only applies to cycle_progress"));
        }
        x.cycle_progress.cycles = cycles.clone();
    }
    if let Some(NumList(starts)) = &args.window_starts {
        if args.name != ExperimentName::Sensitivity {
            return Err(usage("--window-starts only applies to sensitivity"));
        }
        x.sensitivity.window_starts = starts.clone();
    }
    cfg.validate().map_err(usage)?;

    let schedule = cfg.build_schedule()?;
    let model = load_model(&cfg)?;
    let channels = cfg.denoiser.toy.channels;
    let dir = args
        .out
        .unwrap_or_else(|| cfg.output_dir.join(format!("{}_{}", args.name.as_str(), timestamp())));
    let x = &cfg.experiments;
    info!("running {}", args.name.as_str());
    let mut report: ExperimentReport = match args.name {
        ExperimentName::Merge => harness::merge_experiment(&model, &schedule, cfg.latent_shape(), &x.merge)?,
        ExperimentName::AttentionBias => harness::attention_bias_experiment(&model, &schedule, &x.attention_bias)?,
        ExperimentName::CycleProgress => {
            let side = x.cycle_grid;
            let m = model.with_grid(TokenGrid::new(side, side));
            let snapshots = (!args.no_images).then(|| dir.join("snapshots"));
            harness::cycle_progress_experiment(
                &m as &dyn DenoiserModel,
                &schedule,
                cfg.step_grid(&schedule)?,
                (channels, side, side),
                &cfg.modulation,
                &x.cycle_progress,
                snapshots.as_deref(),
            )?
        }
        ExperimentName::Sensitivity => {
            let shape = cfg.latent_shape();
            let (mixture, direction) = x.sensitivity.model(shape)?;
            harness::sensitivity_experiment(&mixture, &schedule, shape, &direction, &x.sensitivity)?
        }
        ExperimentName::DisturbReconstruct => {
            harness::disturb_reconstruct_experiment(&model, &schedule, &x.disturb_reconstruct)?
        }
    };
    report.write(&dir)?;
    for (key, value) in &report.summary {
        println!("{key} = {value}");
    }
    println!("{}", dir.display());
    Ok(())
}

fn plan(mut cfg: RunConfig, templates: &PromptTemplates, args: PlanArgs) -> Result<(), Failure> {
    apply_planner_flags(&mut cfg, &args.planner);
    cfg.validate().map_err(usage)?;
    let client = mllm_client(&cfg)?;
    let channels = cfg.denoiser.toy.channels;
    let condition = match &args.condition {
        Some(path) => load_condition(path, channels)?,
        None => LatentGrid::filled(channels, 1, 1, raster::GRAY),
    };
    let request = PlannerRequest::new(condition, args.prompt, cfg.planner.canvas)?;
    let stride = cfg.planner.stride(cfg.token_grid())?;
    let outcome = planner::plan(
        &request,
        &cfg.planner,
        stride,
        client.as_ref().map(|c| c as &dyn MllmClient),
        templates,
    )?;
    let (box_v, box_r) = outcome.result.token_boxes(stride)?;
    let mut json = serde_json::to_value(&outcome).context("encoding plan")?;
    if let Some(map) = json.as_object_mut() {
        map.insert("stride".into(), stride.into());
        map.insert("token_box_v".into(), serde_json::to_value(box_v).context("encoding plan")?);
        map.insert("token_box_r".into(), serde_json::to_value(box_r).context("encoding plan")?);
    }
    println!("{}", serde_json::to_string_pretty(&json).context("encoding plan")?);
    Ok(())
}

fn invert(mut cfg: RunConfig, args: InvertArgs) -> Result<(), Failure> {
    if let Some(w) = &args.weights {
        cfg.denoiser.weights = Some(w.clone());
    }
    cfg.validate().map_err(usage)?;
    let schedule = cfg.build_schedule()?;
    let grid = cfg.step_grid(&schedule)?;
    if args.to > grid.coarse_steps {
        return Err(usage(format!("--to must be at most {}", grid.coarse_steps)));
    }
    let x0 = load_condition(&args.input, cfg.denoiser.toy.channels)?;
    let (_, h, w) = x0.shape();
    let model = load_model(&cfg)?.with_grid(TokenGrid::new(h, w));
    let cond = if args.prompt.is_empty() {
        None
    } else {
        Some(prompt_condition(&args.prompt, cfg.engine.guidance_scale)?)
    };
    let steps = inversion_steps(&grid, args.to)?;
    let target = grid.position(args.to)?;
    let traj = invert_and_store(&model, &schedule, &x0, 0, target, cond.as_ref(), &steps)?;
    traj.export(&args.out)?;
    println!("{}", args.out.display());
    Ok(())
}
