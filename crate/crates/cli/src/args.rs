use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "normint",
    version,
    about = "Surface reconstruction from normal maps on adaptive screen-space meshes"
)]
pub struct Cli {
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    /// Print debug output.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mesh a normal map, integrate it and write the surface as OBJ.
    Integrate(IntegrateArgs),
    /// Mesh a normal map without integrating.
    MeshOnly(MeshOnlyArgs),
    /// Evaluate a synthetic scene over a list of decimation thresholds.
    SweepThreshold(SweepArgs),
    /// Evaluate a synthetic scene over a list of noise levels (degrees).
    SweepNoise(SweepArgs),
    /// Evaluate a synthetic scene over a list of image widths.
    SweepResolution(SweepArgs),
    /// Write a synthetic normal map, mask and scene description.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EncodingArg {
    U8,
    U16,
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CameraKind {
    Ortho,
    Persp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Shape {
    Sphere,
    Plane,
    Ridge,
    Sinusoid,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Normal map: PNG (8 or 16 bit) or NPY (float32, H x W x 3 or 4).
    #[arg(long)]
    pub input: PathBuf,
    /// Foreground mask image; non-zero pixels are foreground.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Component encoding; inferred from the file extension when omitted
    /// (`.npy` is f32, anything else u8).
    #[arg(long, value_enum)]
    pub encoding: Option<EncodingArg>,
}

#[derive(Debug, Args, Clone)]
pub struct CameraArgs {
    #[arg(long, value_enum, default_value = "ortho")]
    pub camera: CameraKind,
    #[arg(long)]
    pub fx: Option<f64>,
    #[arg(long)]
    pub fy: Option<f64>,
    /// Principal point; defaults to the image centre.
    #[arg(long)]
    pub cx: Option<f64>,
    #[arg(long)]
    pub cy: Option<f64>,
}

#[derive(Debug, Args, Clone)]
pub struct RemeshArgs {
    /// Collapse edges while their cost stays below this value.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Target vertex count.
    #[arg(long)]
    pub vertices: Option<usize>,
    /// Integrate on the undecimated pixel-corner mesh.
    #[arg(long)]
    pub full_resolution: bool,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Skip edge flips.
    #[arg(long)]
    pub no_align_edges: bool,
    /// Skip vertex relocation.
    #[arg(long)]
    pub no_align_vertices: bool,
}

#[derive(Debug, Args)]
pub struct IntegrateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub camera: CameraArgs,
    #[command(flatten)]
    pub remesh: RemeshArgs,
    /// Output surface (OBJ).
    #[arg(long, short)]
    pub output: PathBuf,
    /// Scale applied to orthographic coordinates in the OBJ.
    #[arg(long, default_value_t = 1.0)]
    pub pixel_pitch: f64,
    /// Per-vertex depth table.
    #[arg(long)]
    pub depth_csv: Option<PathBuf>,
    /// Scene description written by `synth`; enables evaluation.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Evaluation report (JSON); requires --scene.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Absolute depth error image (PNG); requires --scene.
    #[arg(long)]
    pub error_map: Option<PathBuf>,
    #[command(flatten)]
    pub debug: DebugArgs,
}

#[derive(Debug, Args)]
pub struct DebugArgs {
    /// Wireframe of the final screen mesh.
    #[arg(long)]
    pub svg: Option<PathBuf>,
    /// Flat screen mesh as OBJ (z = 0).
    #[arg(long)]
    pub mesh_obj: Option<PathBuf>,
    /// Per-pixel vertex occupancy image.
    #[arg(long)]
    pub density: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MeshOnlyArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub camera: CameraArgs,
    #[command(flatten)]
    pub remesh: RemeshArgs,
    #[command(flatten)]
    pub debug: DebugArgs,
}

#[derive(Debug, Args, Clone)]
pub struct SceneArgs {
    /// Scene description (JSON) instead of a built-in shape.
    #[arg(long, conflicts_with_all = ["shape", "size", "height"])]
    pub scene: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "sphere")]
    pub shape: Shape,
    /// Image width in pixels.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    /// Image height; defaults to the width.
    #[arg(long)]
    pub height: Option<usize>,
    #[command(flatten)]
    pub camera: CameraArgs,
    /// Normal noise in degrees.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    /// Comma-separated sweep points.
    #[arg(long, allow_hyphen_values = true)]
    pub values: String,
    #[command(flatten)]
    pub remesh: RemeshArgs,
    /// Directory receiving the CSV table.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[arg(long, value_enum, default_value = "f32")]
    pub encoding: EncodingArg,
    /// Receives `normals.{npy,png}`, `mask.png` and `scene.json`.
    #[arg(long)]
    pub out_dir: PathBuf,
}
