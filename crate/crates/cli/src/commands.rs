use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::info;
use serde::Serialize;

use depthprop::io::{self, PfmImage};
use depthprop::learn::{self, LearnedPolicy, TrainConfig, TrainingSample};
use depthprop::metrics::{self, MetricsReport};
use depthprop::refine::{
    self, AnchorSet, OraclePolicy, RefineOptions, SimilarityPolicy, Stencil, UniformPolicy, WeightPolicy,
};
use depthprop::scene::{self, presets, CorruptionMode, SceneSpec};
use depthprop::upsample::{self, UpsampleMode};
use depthprop::{CameraIntrinsics, DepthMap, LabelMap, NormalMap};

use crate::args::{
    ensure_dir, CompleteArgs, EvalArgs, Inputs, PolicyChoice, Preset, RefineArgs, RefineOpts, SceneArgs, TrainArgs,
    UpPolicy, UpsampleArgs,
};

/// Anchor counts of the completion sweep.
pub const SWEEP_COUNTS: [usize; 5] = [0, 10, 50, 100, 200];

fn load_spec(path: &Path) -> Result<SceneSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    SceneSpec::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_pfm(dir: &Path, name: &str, img: &PfmImage) -> Result<()> {
    let path = dir.join(name);
    io::write_pfm(&path, img).with_context(|| format!("writing {}", path.display()))
}

pub fn scene(a: &SceneArgs) -> Result<()> {
    let mut spec = match (&a.spec, a.preset) {
        (Some(path), _) => load_spec(path)?,
        (None, Some(p)) => match p {
            Preset::Fronto => presets::fronto_plane(a.width, a.height, 2.0),
            Preset::Slanted => presets::slanted_plane(a.width, a.height),
            Preset::ThreePlanes => presets::three_planes(a.width, a.height),
            Preset::Room => presets::room(a.width, a.height),
            Preset::SphereOnWall => presets::sphere_on_wall(a.width, a.height),
        },
        (None, None) => bail!("pass --spec or --preset"),
    };
    if let Some(c) = a.corruption {
        spec.corruption.mode = CorruptionMode::from(c);
    }
    if let Some(m) = a.magnitude {
        spec.corruption.magnitude = m;
    }
    spec.validate()?;

    let gt = scene::render(&spec)?;
    let init = scene::corrupt(&gt.depth, &spec.corruption)?;
    if init.clamped > 0 {
        log::warn!("{} corrupted depths were clamped", init.clamped);
    }
    let estimated = scene::synth_confidence(&gt, &spec.confidence_model)?;
    let anchors = scene::sample_anchors(&gt.depth, a.anchors, a.seed)?;

    ensure_dir(&a.out)?;
    io::write_json(&a.out.join("scene.json"), &spec)?;
    write_pfm(&a.out, "depth_gt.pfm", &PfmImage::from_depth(&gt.depth)?)?;
    write_pfm(&a.out, "depth_init.pfm", &PfmImage::from_depth(&init.depth)?)?;
    write_pfm(&a.out, "normals_gt.pfm", &PfmImage::from_normals(&gt.normals)?)?;
    write_pfm(&a.out, "normals.pfm", &PfmImage::from_normals(&estimated)?)?;
    write_pfm(&a.out, "kappa.pfm", &PfmImage::from_kappa(&estimated)?)?;
    io::write_pgm(&a.out.join("labels.pgm"), &gt.surface_id)?;
    io::write_anchors(&a.out.join("anchors.csv"), &anchors)?;
    info!("scene written to {}", a.out.display());
    Ok(())
}

/// Everything loaded from disk for one run.
struct Loaded {
    intr: CameraIntrinsics,
    depth: DepthMap,
    normals: NormalMap,
    gt: Option<DepthMap>,
    gt_normals: Option<NormalMap>,
    labels: Option<LabelMap>,
}

fn load_depth(path: &Path) -> Result<DepthMap> {
    io::read_pfm(path)
        .and_then(|img| img.to_depth())
        .with_context(|| format!("reading depth {}", path.display()))
}

fn load_normals(path: &Path, kappa: Option<&Path>) -> Result<NormalMap> {
    let k = kappa
        .map(|p| io::read_pfm(p).with_context(|| format!("reading confidence {}", p.display())))
        .transpose()?;
    io::read_pfm(path)
        .and_then(|img| img.to_normals(k.as_ref()))
        .with_context(|| format!("reading normals {}", path.display()))
}

fn check_dims(what: &str, expected: (usize, usize), found: (usize, usize)) -> Result<()> {
    if expected != found {
        bail!(
            "{what} is {}x{} but the camera is {}x{}",
            found.0,
            found.1,
            expected.0,
            expected.1
        );
    }
    Ok(())
}

fn load_inputs(inputs: &Inputs, depth_override: Option<&Path>) -> Result<Loaded> {
    let camera = inputs.require(&inputs.camera, "scene.json", "camera")?;
    let intr = load_spec(&camera)?.intrinsics;
    let depth_path = match depth_override {
        Some(p) => p.to_path_buf(),
        None => inputs.require(&inputs.depth, "depth_init.pfm", "depth")?,
    };
    let depth = load_depth(&depth_path)?;
    let normals_path = inputs.require(&inputs.normals, "normals.pfm", "normals")?;
    let kappa_path = inputs.resolve(&inputs.kappa, "kappa.pfm");
    let normals = load_normals(&normals_path, kappa_path.as_deref())?;
    let gt = inputs
        .resolve(&inputs.gt, "depth_gt.pfm")
        .map(|p| load_depth(&p))
        .transpose()?;
    let gt_normals = inputs
        .resolve(&inputs.gt_normals, "normals_gt.pfm")
        .map(|p| load_normals(&p, None))
        .transpose()?;
    let labels = inputs
        .resolve(&inputs.labels, "labels.pgm")
        .map(|p| io::read_pgm(&p).with_context(|| format!("reading labels {}", p.display())))
        .transpose()?;

    let dims = intr.dims();
    check_dims("depth", dims, depth.dims())?;
    check_dims("normals", dims, normals.dims())?;
    if let Some(g) = &gt {
        check_dims("ground-truth depth", dims, g.dims())?;
    }
    if let Some(g) = &gt_normals {
        check_dims("ground-truth normals", dims, g.dims())?;
    }
    if let Some(l) = &labels {
        check_dims("labels", dims, l.dims())?;
    }
    Ok(Loaded {
        intr,
        depth,
        normals,
        gt,
        gt_normals,
        labels,
    })
}

fn build_policy<'a>(opts: &RefineOpts, gt: Option<&'a DepthMap>) -> Result<Box<dyn WeightPolicy + 'a>> {
    Ok(match opts.policy {
        PolicyChoice::Oracle => {
            let gt = gt.context("the oracle policy needs ground-truth depth (--gt)")?;
            Box::new(OraclePolicy::new(gt))
        }
        PolicyChoice::Similarity => Box::new(SimilarityPolicy {
            temperature: opts.temperature,
            kappa_gate: !opts.no_kappa_gate,
            kappa_max: opts.kappa_max,
        }),
        PolicyChoice::Learned => {
            let path = opts.params.as_ref().context("the learned policy needs --params")?;
            let params = io::read_params(path).with_context(|| format!("reading {}", path.display()))?;
            Box::new(LearnedPolicy {
                params,
                kappa_max: opts.kappa_max,
            })
        }
        PolicyChoice::Uniform => Box::new(UniformPolicy),
    })
}

/// Depth, normal and (when labels exist) planarity metrics of `pred`.
fn score(data: &Loaded, pred: &DepthMap, window: usize) -> Result<Option<MetricsReport>> {
    let (Some(gt), Some(gt_normals)) = (&data.gt, &data.gt_normals) else {
        return Ok(None);
    };
    let mut report = metrics::evaluate(&data.intr, pred, gt, gt_normals, window, None)?;
    if let Some(labels) = &data.labels {
        report.planarity = Some(metrics::planarity_metrics(&data.intr, pred, labels, gt_normals, None)?);
    }
    Ok(Some(report))
}

/// Optionally scale-match, then refine. Returns the result and its trace.
fn run(
    data: &Loaded,
    opts: &RefineOpts,
    anchors: &AnchorSet,
    scale_match: bool,
    record: bool,
) -> Result<(DepthMap, refine::RefineTrace)> {
    let policy = build_policy(opts, data.gt.as_ref())?;
    let init = if scale_match && !anchors.is_empty() {
        let (scaled, s) = refine::scale_match(&data.depth, anchors)?;
        info!("scale match factor {s}");
        scaled
    } else {
        data.depth.clone()
    };
    let mut options = RefineOptions::new(opts.n_iter).with_stencil(Stencil::new(opts.beta));
    if !anchors.is_empty() {
        options = options.with_anchors(anchors);
    }
    if record {
        options = options.recording();
    }
    Ok(refine::refine(&data.intr, &init, &data.normals, policy.as_ref(), &options)?)
}

fn write_outputs(
    data: &Loaded,
    out: &Path,
    name: &str,
    depth: &DepthMap,
    trace: &refine::RefineTrace,
    window: usize,
) -> Result<()> {
    write_pfm(out, name, &PfmImage::from_depth(depth)?)?;
    match &data.gt {
        Some(gt) => {
            let rows = metrics::summarize_trace(&data.intr, trace, gt, data.gt_normals.as_ref(), window)?;
            io::write_trace(&out.join("trace.csv"), &rows)?;
        }
        None => log::warn!("no ground truth: trace and metrics are not written"),
    }
    if let Some(report) = score(data, depth, window)? {
        io::write_json(&out.join("metrics.json"), &report)?;
    }
    Ok(())
}

pub fn refine(a: &RefineArgs) -> Result<()> {
    let data = load_inputs(&a.inputs, None)?;
    let anchors = match &a.anchors {
        Some(p) => io::read_anchors(p, data.intr.dims()).with_context(|| format!("reading {}", p.display()))?,
        None => AnchorSet::empty(),
    };
    let (depth, trace) = run(&data, &a.opts, &anchors, a.scale_match, data.gt.is_some())?;
    ensure_dir(&a.out)?;
    write_outputs(&data, &a.out, "depth_refined.pfm", &depth, &trace, a.opts.window)
}

pub fn complete(a: &CompleteArgs) -> Result<()> {
    let data = load_inputs(&a.inputs, None)?;
    ensure_dir(&a.out)?;
    if !a.sweep {
        let path = a.inputs.require(&a.anchors, "anchors.csv", "anchors")?;
        let anchors =
            io::read_anchors(&path, data.intr.dims()).with_context(|| format!("reading {}", path.display()))?;
        let (depth, trace) = run(&data, &a.opts, &anchors, a.scale_match, data.gt.is_some())?;
        return write_outputs(&data, &a.out, "depth_completed.pfm", &depth, &trace, a.opts.window);
    }

    let gt = data.gt.as_ref().context("the anchor sweep needs ground-truth depth (--gt)")?;
    let mut rows = Vec::new();
    for &count in &SWEEP_COUNTS {
        let anchors = scene::sample_anchors(gt, count, a.seed)?;
        for scale_match in [false, true] {
            let (depth, _) = run(&data, &a.opts, &anchors, scale_match, false)?;
            let report = score(&data, &depth, a.opts.window)?.context("the anchor sweep needs ground-truth normals")?;
            rows.push((vec![count.to_string(), scale_match.to_string()], report));
        }
    }
    io::write_metrics_csv(&a.out.join("sweep.csv"), &["anchors", "scale_match"], &rows)?;
    Ok(())
}

pub fn upsample_ablate(a: &UpsampleArgs) -> Result<()> {
    let data = load_inputs(&a.inputs, None)?;
    let gt = data.gt.as_ref().context("upsampling ablation needs ground-truth depth (--gt)")?;
    if data.gt_normals.is_none() {
        bail!("upsampling ablation needs ground-truth normals (--gt-normals)");
    }
    let s = a.stride;
    let n_coarse = upsample::downsample_normals(&data.normals, s)?;
    let d_coarse = upsample::downsample_depth(&data.intr, &data.depth, &data.normals, s)?;
    let modes: Vec<UpsampleMode> = match a.mode {
        Some(m) => vec![m],
        None => UpsampleMode::ALL.to_vec(),
    };
    ensure_dir(&a.out)?;
    let mut rows = Vec::new();
    for mode in modes {
        let up = match mode {
            UpsampleMode::Nearest => upsample::upsample_nearest(&d_coarse, s)?,
            UpsampleMode::Bilinear => upsample::upsample_bilinear(&d_coarse, s)?,
            UpsampleMode::NormalGuided => {
                upsample::upsample_normal_guided(&data.intr, &d_coarse, &n_coarse, s, |c| match a.up_policy {
                    UpPolicy::Oracle => upsample::up_oracle_weights(c, gt),
                    UpPolicy::Similarity => {
                        upsample::up_similarity_weights(c, &n_coarse, Some(&data.normals), s, a.temperature)
                    }
                    UpPolicy::Containing => Ok(upsample::up_containing_weights(c)),
                })?
            }
        };
        write_pfm(&a.out, &format!("depth_{mode}.pfm"), &PfmImage::from_depth(&up)?)?;
        let report = score(&data, &up, a.window)?.expect("ground truth checked above");
        rows.push((vec![mode.to_string()], report));
    }
    io::write_metrics_csv(&a.out.join("upsample.csv"), &["method"], &rows)?;
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let data = load_inputs(&a.inputs, Some(&a.pred))?;
    if data.gt.is_none() || data.gt_normals.is_none() {
        bail!("evaluation needs ground-truth depth and normals (--gt, --gt-normals)");
    }
    let report = score(&data, &data.depth, a.window)?.expect("ground truth checked above");
    ensure_dir(&a.out)?;
    io::write_json(&a.out.join("metrics.json"), &report)?;
    io::write_metrics_csv(&a.out.join("metrics.csv"), &[], &[(Vec::new(), report)])?;
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config: &'a TrainConfig,
    scenes: usize,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
}

pub fn train_policy(a: &TrainArgs) -> Result<()> {
    let mut config: TrainConfig = match &a.config {
        Some(p) => io::read_json(p).with_context(|| format!("reading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        config.epochs = v;
    }
    if let Some(v) = a.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = a.gamma {
        config.gamma = v;
    }
    if let Some(v) = a.n_iter {
        config.n_iter_train = v;
    }
    if let Some(v) = a.beta {
        config.beta = v;
    }
    if let Some(v) = a.seed {
        config.seed = v;
    }
    config.validate()?;

    let specs = if a.scenes.is_empty() {
        presets::training_set(32, 32)
    } else {
        a.scenes.iter().map(|p| load_spec(p)).collect::<Result<Vec<_>>>()?
    };
    let samples = specs
        .iter()
        .map(|spec| match a.stride {
            Some(s) => TrainingSample::from_scene_upsampled(spec, s, 0.1),
            None => TrainingSample::from_scene(spec),
        })
        .collect::<depthprop::Result<Vec<_>>>()?;
    let outcome = learn::train(&samples, &config)?;

    ensure_dir(&a.out)?;
    io::write_json(&a.out.join("params.json"), &outcome.params)?;
    io::write_training_log(&a.out.join("training_log.csv"), &outcome.log)?;
    let summary = TrainSummary {
        config: &config,
        scenes: samples.len(),
        initial_loss: outcome.log.first().copied(),
        final_loss: outcome.log.last().copied(),
    };
    io::write_json(&a.out.join("training.json"), &summary)?;
    Ok(())
}
