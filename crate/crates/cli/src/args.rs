use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "lidarsplat",
    version,
    about = "LiDAR-conditioned street-view synthesis: conditions, splatting, distillation and sampling",
    propagate_version = true
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Seed for every randomized step. Overrides the distillation config
    /// seed when given.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for the data-parallel kernels; 0 uses all cores.
    /// Outputs do not depend on this value.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Warn)]
    pub log_level: LogLevel,
    /// Format of the report printed on stdout (and of errors on stderr).
    #[arg(long, global = true, value_enum, default_value_t = ReportFormat::Text)]
    pub report: ReportFormat,
    /// Also write the JSON report to this file.
    #[arg(long, global = true, value_name = "PATH")]
    pub report_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LogLevel {
    Off,
    Error,
    Warn,
    Info,
    Debug,
    Trace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SideArg {
    Left,
    Right,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a scene directory and check every invariant.
    Validate {
        #[arg(long)]
        scene: PathBuf,
    },
    /// Rasterize the aggregated LiDAR condition image for one camera.
    BuildCondition(BuildConditionArgs),
    /// Render a Gaussian checkpoint from a scene camera.
    Render(RenderArgs),
    /// Apply a box-edit script to the condition sequence and, optionally,
    /// to a Gaussian checkpoint.
    Edit(EditArgs),
    /// Distill a Gaussian scene from a recorded scene and a novel-view
    /// generator.
    Distill(DistillArgs),
    /// Run the guided sampler over a sequence of condition images.
    Sample(SampleArgs),
    /// PSNR and SSIM between two directories of PNG frames.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct ViewArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Frame whose camera (and, by default, timestamp) is used.
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    /// Query time in seconds; defaults to the frame timestamp.
    #[arg(long)]
    pub time: Option<f64>,
    /// Lateral camera offset in meters along the lane-shifted trajectory.
    #[arg(long, default_value_t = 0.0)]
    pub lane_shift: f64,
    #[arg(long, value_enum, default_value_t = SideArg::Left)]
    pub side: SideArg,
    /// Camera pose file (JSON, laid out like a manifest frame camera) used
    /// instead of the frame camera.
    #[arg(long, value_name = "POSE_FILE", conflicts_with = "lane_shift")]
    pub camera: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ConditionArgs {
    /// Half-width of the aggregation window in seconds.
    #[arg(long, default_value_t = lidarsplat::pointcloud::DEFAULT_WINDOW)]
    pub window: f64,
    /// Point splat radius in NDC units.
    #[arg(long, default_value_t = lidarsplat::condition::DEFAULT_RADIUS_NDC)]
    pub radius: f64,
    /// Resize to this width and crop to this height, as `HxW`.
    #[arg(long, value_name = "HxW", value_parser = parse_size)]
    pub model_size: Option<(usize, usize)>,
}

#[derive(Debug, Args)]
pub struct BuildConditionArgs {
    #[command(flatten)]
    pub view: ViewArgs,
    #[command(flatten)]
    pub condition: ConditionArgs,
    /// Box-edit script (JSON).
    #[arg(long)]
    pub edit: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the normalized depth channel.
    #[arg(long)]
    pub depth_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[command(flatten)]
    pub view: ViewArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Box-edit script applied to the object nodes before rendering.
    #[arg(long)]
    pub edit: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the normalized expected depth.
    #[arg(long)]
    pub depth_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub edit: PathBuf,
    #[command(flatten)]
    pub condition: ConditionArgs,
    #[arg(long, default_value_t = 0.0)]
    pub lane_shift: f64,
    #[arg(long, value_enum, default_value_t = SideArg::Left)]
    pub side: SideArg,
    /// Directory receiving one edited condition image per frame.
    #[arg(long)]
    pub out: PathBuf,
    /// Gaussian checkpoint to edit alongside.
    #[arg(long, requires = "checkpoint_out")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    pub checkpoint_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// TOML config; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `mock`, `noisy`, `dir:<path>` or `none`.
    #[arg(long, default_value = "mock", value_parser = parse_generator)]
    pub generator: GeneratorArg,
    /// Start from this checkpoint instead of the LiDAR initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Overrides the config iteration count.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Output directory: config.toml, metrics.jsonl, checkpoints/ and
    /// final.lsgs.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GeneratorArg {
    None,
    Mock,
    Noisy,
    Dir(PathBuf),
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Directory of condition PNGs, taken in file-name order.
    #[arg(long, required_unless_present = "scene", conflicts_with = "scene")]
    pub conditions: Option<PathBuf>,
    /// Build the conditions from this scene instead, one per recorded frame
    /// or per `--trajectory` entry.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// JSON array of `{"timestamp": t, "camera": {...}}` entries.
    #[arg(long, requires = "scene")]
    pub trajectory: Option<PathBuf>,
    #[command(flatten)]
    pub condition: ConditionArgs,
    /// `tiny` (identity-initialized), `tiny:<checkpoint.json>` or
    /// `oracle:<dir>` (predicts the PNGs in `<dir>`).
    #[arg(long, default_value = "tiny", value_parser = parse_denoiser)]
    pub denoiser: DenoiserArg,
    /// Start from these renders noised to `--noise-scale` instead of pure
    /// noise.
    #[arg(long, requires = "noise_scale")]
    pub renders: Option<PathBuf>,
    #[arg(long, requires = "renders")]
    pub noise_scale: Option<f64>,
    /// Reference image; its per-channel mean is the reference conditioning.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value_t = lidarsplat::diffusion::DEFAULT_STEPS)]
    pub steps: usize,
    #[arg(long, alias = "cfg", default_value_t = lidarsplat::diffusion::DEFAULT_CFG_SCALE)]
    pub cfg_scale: f64,
    #[arg(long, default_value_t = lidarsplat::diffusion::DEFAULT_CHUNK)]
    pub chunk: usize,
    #[arg(long, default_value_t = lidarsplat::diffusion::DEFAULT_OVERLAP)]
    pub overlap: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DenoiserArg {
    Tiny(Option<PathBuf>),
    Oracle(PathBuf),
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let h: usize = h.parse().map_err(|_| format!("bad height in `{s}`"))?;
    let w: usize = w.parse().map_err(|_| format!("bad width in `{s}`"))?;
    if h == 0 || w == 0 {
        return Err(format!("size must be positive, got `{s}`"));
    }
    Ok((h, w))
}

fn parse_generator(s: &str) -> Result<GeneratorArg, String> {
    match s {
        "none" => Ok(GeneratorArg::None),
        "mock" => Ok(GeneratorArg::Mock),
        "noisy" => Ok(GeneratorArg::Noisy),
        _ => match s.strip_prefix("dir:") {
            Some(p) if !p.is_empty() => Ok(GeneratorArg::Dir(PathBuf::from(p))),
            _ => Err(format!("expected mock, noisy, none or dir:<path>, got `{s}`")),
        },
    }
}

fn parse_denoiser(s: &str) -> Result<DenoiserArg, String> {
    if s == "tiny" {
        return Ok(DenoiserArg::Tiny(None));
    }
    if let Some(p) = s.strip_prefix("tiny:").filter(|p| !p.is_empty()) {
        return Ok(DenoiserArg::Tiny(Some(PathBuf::from(p))));
    }
    if let Some(p) = s.strip_prefix("oracle:").filter(|p| !p.is_empty()) {
        return Ok(DenoiserArg::Oracle(PathBuf::from(p)));
    }
    Err(format!("expected tiny, tiny:<file> or oracle:<dir>, got `{s}`"))
}
