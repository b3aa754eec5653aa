//! `spherestereo`: depth maps and point clouds from equirectangular pairs.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::PipelineConfig;
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "spherestereo",
    version,
    about = "Spherical stereo depth from equirectangular images"
)]
struct Cli {
    /// JSON pipeline configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// RANSAC seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ray-cast a scene to an image, ground-truth depth and optional flow.
    Render(RenderArgs),
    /// Depth from a vertically separated camera pair.
    Binocular(BinocularArgs),
    /// Depth from two frames of one moving camera.
    Monocular(MonocularArgs),
    /// Estimate the upper camera's misalignment from a distant-scene pair.
    Calibrate(CalibrateArgs),
    /// Convert and accumulate depth maps into a PLY point cloud.
    Pointcloud(PointcloudArgs),
    /// Fraction of the sphere outside two polar blind caps.
    Coverage(CoverageArgs),
}

/// Three comma-separated numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triple(pub [f64; 3]);

impl FromStr for Triple {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(format!("expected three comma-separated numbers, got {s:?}"));
        }
        let mut out = [0.0; 3];
        for (o, p) in out.iter_mut().zip(&parts) {
            *o = p.parse().map_err(|_| format!("not a number: {p:?}"))?;
        }
        Ok(Triple(out))
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Room,
    Street,
    FarField,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    /// Scene JSON file.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub scene: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Camera position x,y,z in meters.
    #[arg(long, default_value = "0,0,0", allow_hyphen_values = true)]
    pub position: Triple,
    /// Camera orientation as pitch,yaw,roll in degrees.
    #[arg(long, default_value = "0,0,0", allow_hyphen_values = true)]
    pub euler: Triple,
    /// Output height; width is twice this.
    #[arg(long, default_value_t = 512)]
    pub height: usize,
    /// Rays per pixel along each axis.
    #[arg(long, default_value_t = 1)]
    pub supersample: usize,
    #[arg(long)]
    pub gray: bool,
    /// Also write ground-truth flow towards a second camera at this position.
    #[arg(long, allow_hyphen_values = true)]
    pub flow_to: Option<Triple>,
    /// Orientation of the flow target camera, degrees.
    #[arg(long, default_value = "0,0,0", allow_hyphen_values = true)]
    pub flow_to_euler: Triple,
    /// Output prefix: writes PREFIX.png, PREFIX_depth.pfm, PREFIX.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BinocularArgs {
    #[arg(long)]
    pub upper: PathBuf,
    #[arg(long)]
    pub lower: PathBuf,
    /// Estimate the misalignment from this pair before matching.
    #[arg(long, conflicts_with_all = ["alignment", "alignment_file"])]
    pub calibrate: bool,
    /// Upper-camera pitch,yaw,roll relative to the lower one, degrees.
    #[arg(long, allow_hyphen_values = true, conflicts_with = "alignment_file")]
    pub alignment: Option<Triple>,
    /// JSON written by the calibrate command.
    #[arg(long)]
    pub alignment_file: Option<PathBuf>,
    /// Camera separation in meters.
    #[arg(long)]
    pub baseline: Option<f64>,
    #[arg(long)]
    pub num_disparities: Option<usize>,
    #[arg(long)]
    pub max_height: Option<usize>,
    /// Output prefix: writes PREFIX_depth.pfm, PREFIX_depth.png, PREFIX.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MonocularArgs {
    /// First frame: a path, or a frame number with --frames-dir.
    #[arg(long)]
    pub frame_a: String,
    /// Second frame: a path, or a frame number with --frames-dir.
    #[arg(long)]
    pub frame_b: String,
    /// Directory of numbered frames.
    #[arg(long)]
    pub frames_dir: Option<PathBuf>,
    #[arg(long)]
    pub speed_kmh: Option<f64>,
    #[arg(long)]
    pub fps: Option<f64>,
    #[arg(long)]
    pub num_disparities: Option<usize>,
    #[arg(long)]
    pub max_height: Option<usize>,
    /// Output prefix: writes PREFIX_depth.pfm, PREFIX_depth.png, PREFIX.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub upper: PathBuf,
    #[arg(long)]
    pub lower: PathBuf,
    #[arg(long)]
    pub max_height: Option<usize>,
    /// Also write the result here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PointcloudArgs {
    /// Depth PFM files, one per capture, in capture order.
    #[arg(required = true)]
    pub depth: Vec<PathBuf>,
    /// Color images matching the depth maps.
    #[arg(long)]
    pub color: Vec<PathBuf>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub max_range: Option<f64>,
    #[arg(long)]
    pub speed_kmh: Option<f64>,
    #[arg(long)]
    pub fps: Option<f64>,
    /// Frames between consecutive captures.
    #[arg(long)]
    pub cadence: Option<f64>,
    /// Direction of travel x,y,z in camera coordinates (z forward).
    #[arg(long, default_value = "0,0,1", allow_hyphen_values = true)]
    pub axis: Triple,
    /// Refine each capture against the preceding ones with ICP.
    #[arg(long)]
    pub icp: bool,
    #[arg(long)]
    pub ascii: bool,
    /// Output PLY; the sidecar goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CoverageArgs {
    /// Blind-cap half-angle in degrees.
    #[arg(long, allow_hyphen_values = true)]
    pub psi: f64,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.stabilize.pose.seed = seed;
    }
    match cli.command {
        Command::Render(a) => commands::render(&a, &cfg),
        Command::Binocular(a) => commands::binocular(&a, cfg),
        Command::Monocular(a) => commands::monocular(&a, cfg),
        Command::Calibrate(a) => commands::calibrate(&a, cfg),
        Command::Pointcloud(a) => commands::pointcloud(&a, cfg),
        Command::Coverage(a) => commands::coverage(&a),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
