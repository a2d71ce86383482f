use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use depthprop::metrics::DEFAULT_PCA_WINDOW;
use depthprop::scene::CorruptionMode;
use depthprop::upsample::UpsampleMode;

#[derive(Debug, Parser)]
#[command(name = "depthprop", version, about = "Normal-guided depth refinement toolkit")]
pub struct Cli {
    /// Worker threads (defaults to one per core). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a scene description to ground truth, initial depth and anchors.
    Scene(SceneArgs),
    /// Refine an initial depth map.
    Refine(RefineArgs),
    /// Refine with sparse anchors, optionally sweeping the anchor count.
    Complete(CompleteArgs),
    /// Compare nearest, bilinear and normal-guided upsampling.
    UpsampleAblate(UpsampleArgs),
    /// Score a depth map against ground truth.
    Eval(EvalArgs),
    /// Fit the learned weight policy on synthetic scenes.
    TrainPolicy(TrainArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Fronto,
    Slanted,
    ThreePlanes,
    Room,
    SphereOnWall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Corruption {
    Gaussian,
    ShrinkToMean,
    LowFrequencyBias,
    ScaleError,
}

impl From<Corruption> for CorruptionMode {
    fn from(c: Corruption) -> Self {
        match c {
            Corruption::Gaussian => CorruptionMode::Gaussian,
            Corruption::ShrinkToMean => CorruptionMode::ShrinkToMean,
            Corruption::LowFrequencyBias => CorruptionMode::LowFrequencyBias,
            Corruption::ScaleError => CorruptionMode::ScaleError,
        }
    }
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    /// Scene description (JSON).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    pub spec: Option<PathBuf>,

    /// Built-in scene instead of a JSON description.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,

    #[arg(long, default_value_t = 64, requires = "preset")]
    pub width: usize,

    #[arg(long, default_value_t = 64, requires = "preset")]
    pub height: usize,

    /// Override the corruption mode of the description.
    #[arg(long, value_enum)]
    pub corruption: Option<Corruption>,

    /// Override the corruption magnitude of the description.
    #[arg(long)]
    pub magnitude: Option<f64>,

    /// Number of anchors sampled from ground truth into anchors.csv.
    #[arg(long, default_value_t = 0)]
    pub anchors: usize,

    /// Seed of the anchor draw.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[arg(long)]
    pub out: PathBuf,
}

/// Input maps. Unset paths default to the standard file names inside
/// `--scene-dir`.
#[derive(Debug, Args)]
pub struct Inputs {
    /// Directory written by the `scene` subcommand.
    #[arg(long)]
    pub scene_dir: Option<PathBuf>,

    /// Scene description carrying the camera [default: <scene-dir>/scene.json].
    #[arg(long)]
    pub camera: Option<PathBuf>,

    /// Input depth [default: <scene-dir>/depth_init.pfm].
    #[arg(long)]
    pub depth: Option<PathBuf>,

    /// Estimated normals [default: <scene-dir>/normals.pfm].
    #[arg(long)]
    pub normals: Option<PathBuf>,

    /// Normal confidence [default: <scene-dir>/kappa.pfm].
    #[arg(long)]
    pub kappa: Option<PathBuf>,

    /// Ground-truth depth [default: <scene-dir>/depth_gt.pfm].
    #[arg(long)]
    pub gt: Option<PathBuf>,

    /// Ground-truth normals [default: <scene-dir>/normals_gt.pfm].
    #[arg(long)]
    pub gt_normals: Option<PathBuf>,

    /// Planar region labels [default: <scene-dir>/labels.pgm].
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

impl Inputs {
    /// Explicit path, or `name` inside the scene directory when that file exists.
    pub fn resolve(&self, explicit: &Option<PathBuf>, name: &str) -> Option<PathBuf> {
        if let Some(p) = explicit {
            return Some(p.clone());
        }
        let p = self.scene_dir.as_deref()?.join(name);
        p.exists().then_some(p)
    }

    pub fn require(&self, explicit: &Option<PathBuf>, name: &str, flag: &str) -> anyhow::Result<PathBuf> {
        self.resolve(explicit, name)
            .ok_or_else(|| anyhow::anyhow!("missing input: pass --{flag} or a --scene-dir containing {name}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyChoice {
    Oracle,
    Similarity,
    Learned,
    Uniform,
}

#[derive(Debug, Args)]
pub struct RefineOpts {
    #[arg(long, value_enum, default_value_t = PolicyChoice::Similarity)]
    pub policy: PolicyChoice,

    /// Stencil radius.
    #[arg(long, default_value_t = 2)]
    pub beta: usize,

    #[arg(long, default_value_t = 20)]
    pub n_iter: usize,

    /// Softmax temperature of the similarity policy.
    #[arg(long, default_value_t = 0.1)]
    pub temperature: f64,

    /// Disable confidence gating in the similarity policy.
    #[arg(long)]
    pub no_kappa_gate: bool,

    /// Confidence that maps to a zero log-confidence feature.
    #[arg(long, default_value_t = depthprop::scene::DEFAULT_KAPPA_MAX)]
    pub kappa_max: f64,

    /// Learned policy parameters (JSON).
    #[arg(long, required_if_eq("policy", "learned"))]
    pub params: Option<PathBuf>,

    /// PCA window for normal metrics.
    #[arg(long, default_value_t = DEFAULT_PCA_WINDOW)]
    pub window: usize,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[command(flatten)]
    pub inputs: Inputs,

    #[command(flatten)]
    pub opts: RefineOpts,

    /// Anchors CSV (`u,v,depth`) re-imposed after every iteration.
    #[arg(long)]
    pub anchors: Option<PathBuf>,

    /// Fit the initial depth to the anchors by least squares first.
    #[arg(long, requires = "anchors")]
    pub scale_match: bool,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompleteArgs {
    #[command(flatten)]
    pub inputs: Inputs,

    #[command(flatten)]
    pub opts: RefineOpts,

    /// Anchors CSV [default: <scene-dir>/anchors.csv].
    #[arg(long, conflicts_with = "sweep")]
    pub anchors: Option<PathBuf>,

    #[arg(long, conflicts_with = "sweep")]
    pub scale_match: bool,

    /// Sample 0, 10, 50, 100 and 200 anchors from ground truth and run each
    /// with and without scale matching.
    #[arg(long)]
    pub sweep: bool,

    /// Seed of the sweep's anchor draws.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum UpPolicy {
    Oracle,
    Similarity,
    Containing,
}

#[derive(Debug, Args)]
pub struct UpsampleArgs {
    #[command(flatten)]
    pub inputs: Inputs,

    #[arg(long, default_value_t = 8)]
    pub stride: usize,

    /// Weights of the normal-guided upsampler.
    #[arg(long, value_enum, default_value_t = UpPolicy::Oracle)]
    pub up_policy: UpPolicy,

    #[arg(long, default_value_t = 0.1)]
    pub temperature: f64,

    /// Run only this method instead of all three.
    #[arg(long)]
    pub mode: Option<UpsampleMode>,

    #[arg(long, default_value_t = DEFAULT_PCA_WINDOW)]
    pub window: usize,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub inputs: Inputs,

    /// Depth map to score.
    #[arg(long)]
    pub pred: PathBuf,

    #[arg(long, default_value_t = DEFAULT_PCA_WINDOW)]
    pub window: usize,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training scene descriptions; a built-in set is used when omitted.
    #[arg(long = "scene")]
    pub scenes: Vec<PathBuf>,

    /// Training configuration (JSON). Flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,

    #[arg(long)]
    pub epochs: Option<usize>,

    #[arg(long)]
    pub learning_rate: Option<f64>,

    #[arg(long)]
    pub gamma: Option<f64>,

    #[arg(long)]
    pub n_iter: Option<usize>,

    #[arg(long)]
    pub beta: Option<usize>,

    #[arg(long)]
    pub seed: Option<u64>,

    /// Train through normal-guided upsampling at this stride.
    #[arg(long)]
    pub stride: Option<usize>,

    #[arg(long)]
    pub out: PathBuf,
}

pub fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}
