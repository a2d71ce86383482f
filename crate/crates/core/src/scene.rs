//! Ray-cast synthetic scenes with exact ground truth.
//!
//! A [`SceneSpec`] lists planes and spheres in camera coordinates. Rendering
//! intersects every pixel ray with every primitive and keeps the nearest hit,
//! producing exact depth, analytic normals (facing the camera) and the id of
//! the visible primitive. The same spec also describes how the initial depth
//! is corrupted and how normal confidence is synthesized.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{orient_toward_camera, plane_ray_depth, CameraIntrinsics, Vec3};
use crate::map::{DepthMap, LabelMap, NormalMap};
use crate::refine::{Anchor, AnchorSet};

/// Depth floor applied by [`corrupt`].
pub const MIN_DEPTH: f64 = 1e-3;

pub const DEFAULT_KAPPA_MAX: f64 = 100.0;
pub const DEFAULT_KAPPA_MIN: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPrimitive", into = "RawPrimitive")]
pub enum Primitive {
    Plane { id: u32, normal: Vec3, point: Vec3 },
    Sphere { id: u32, center: Vec3, radius: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum RawPrimitive {
    Plane {
        id: u32,
        normal: [f64; 3],
        point: [f64; 3],
    },
    Sphere {
        id: u32,
        center: [f64; 3],
        radius: f64,
    },
}

impl TryFrom<RawPrimitive> for Primitive {
    type Error = Error;

    fn try_from(raw: RawPrimitive) -> Result<Self> {
        match raw {
            RawPrimitive::Plane { id, normal, point } => {
                Primitive::plane(id, Vec3::from(normal), Vec3::from(point))
            }
            RawPrimitive::Sphere { id, center, radius } => {
                Primitive::sphere(id, Vec3::from(center), radius)
            }
        }
    }
}

impl From<Primitive> for RawPrimitive {
    fn from(p: Primitive) -> Self {
        match p {
            Primitive::Plane { id, normal, point } => RawPrimitive::Plane {
                id,
                normal: normal.into(),
                point: point.into(),
            },
            Primitive::Sphere { id, center, radius } => RawPrimitive::Sphere {
                id,
                center: center.into(),
                radius,
            },
        }
    }
}

impl Primitive {
    /// Plane through `point`; `normal` is normalized here.
    pub fn plane(id: u32, normal: Vec3, point: Vec3) -> Result<Self> {
        let len = normal.norm();
        if !(len > 1e-12 && len.is_finite()) || !point.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidConfig(format!("plane {id} has a degenerate normal or point")));
        }
        Ok(Primitive::Plane {
            id,
            normal: normal / len,
            point,
        })
    }

    pub fn sphere(id: u32, center: Vec3, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) || !center.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidConfig(format!("sphere {id} needs a positive radius")));
        }
        Ok(Primitive::Sphere { id, center, radius })
    }

    pub fn id(&self) -> u32 {
        match self {
            Primitive::Plane { id, .. } | Primitive::Sphere { id, .. } => *id,
        }
    }

    /// Nearest positive depth along the unit-depth ray `r`, with the surface
    /// normal facing the camera.
    pub fn intersect(&self, r: &Vec3) -> Option<(f64, Vec3)> {
        match self {
            Primitive::Plane { normal, point, .. } => {
                let t = plane_ray_depth(normal, point, r).ok()?;
                t.is_finite().then(|| (t, orient_toward_camera(*normal, r)))
            }
            Primitive::Sphere { center, radius, .. } => {
                let a = r.dot(r);
                let b = r.dot(center);
                let c = center.dot(center) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [(b - sq) / a, (b + sq) / a].into_iter().find(|t| *t > 0.0)?;
                let n = (r * t - center) / *radius;
                Some((t, orient_toward_camera(n.normalize(), r)))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionMode {
    Gaussian,
    ShrinkToMean,
    LowFrequencyBias,
    ScaleError,
}

/// How the initial depth deviates from ground truth.
///
/// `magnitude` is the noise standard deviation in meters (`gaussian`), the
/// shrinkage factor λ (`shrink-to-mean`), the field amplitude in meters
/// (`low-frequency-bias`), or the relative scale offset (`scale-error`
/// multiplies by `1 + magnitude`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub mode: CorruptionMode,
    pub magnitude: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            mode: CorruptionMode::Gaussian,
            magnitude: 0.0,
            seed: 0,
        }
    }
}

impl CorruptionSpec {
    pub fn new(mode: CorruptionMode, magnitude: f64, seed: u64) -> Self {
        Self {
            mode,
            magnitude,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfidenceSpec {
    pub kappa_max: f64,
    pub kappa_min: f64,
    /// Chebyshev pixel distance to a label change within which `kappa_min`
    /// applies.
    pub boundary_band: usize,
    /// Angular noise (degrees) applied at `kappa_max`; scaled by
    /// `sqrt(kappa_max / kappa)` elsewhere.
    pub noise_deg: f64,
    pub seed: u64,
}

impl Default for ConfidenceSpec {
    fn default() -> Self {
        Self {
            kappa_max: DEFAULT_KAPPA_MAX,
            kappa_min: DEFAULT_KAPPA_MIN,
            boundary_band: 2,
            noise_deg: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub intrinsics: CameraIntrinsics,
    pub primitives: Vec<Primitive>,
    #[serde(default)]
    pub corruption: CorruptionSpec,
    #[serde(default)]
    pub confidence_model: ConfidenceSpec,
    #[serde(default)]
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(intrinsics: CameraIntrinsics, primitives: Vec<Primitive>) -> Self {
        Self {
            intrinsics,
            primitives,
            corruption: CorruptionSpec::default(),
            confidence_model: ConfidenceSpec::default(),
            seed: 0,
        }
    }

    pub fn with_corruption(mut self, corruption: CorruptionSpec) -> Self {
        self.corruption = corruption;
        self
    }

    pub fn with_confidence(mut self, confidence: ConfidenceSpec) -> Self {
        self.confidence_model = confidence;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SceneSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::InvalidConfig("scene has no primitives".into()));
        }
        let c = &self.confidence_model;
        if !(c.kappa_min >= 0.0 && c.kappa_max > 0.0 && c.kappa_min <= c.kappa_max) {
            return Err(Error::InvalidConfig(format!(
                "confidence range [{}, {}] is invalid",
                c.kappa_min, c.kappa_max
            )));
        }
        if !(c.noise_deg >= 0.0 && c.noise_deg.is_finite()) {
            return Err(Error::InvalidConfig("noise_deg must be nonnegative".into()));
        }
        if !(self.corruption.magnitude >= 0.0 && self.corruption.magnitude.is_finite()) {
            return Err(Error::InvalidConfig("corruption magnitude must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Exact depth, camera-facing normals and visible primitive ids.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub depth: DepthMap,
    pub normals: NormalMap,
    pub surface_id: LabelMap,
}

pub fn render(spec: &SceneSpec) -> Result<GroundTruth> {
    spec.validate()?;
    let intr = &spec.intrinsics;
    let (w, h) = intr.dims();
    let hits: Vec<Option<(f64, Vec3, u32)>> = (0..w * h)
        .into_par_iter()
        .map(|idx| {
            let r = intr.ray((idx % w) as f64, (idx / w) as f64).to_vec();
            let mut best: Option<(f64, Vec3, u32)> = None;
            for prim in &spec.primitives {
                if let Some((t, n)) = prim.intersect(&r) {
                    if best.is_none_or(|(bt, _, _)| t < bt) {
                        best = Some((t, n, prim.id()));
                    }
                }
            }
            best
        })
        .collect();

    let mut depth = Vec::with_capacity(w * h);
    let mut normals = Vec::with_capacity(w * h);
    let mut labels = Vec::with_capacity(w * h);
    for (idx, hit) in hits.into_iter().enumerate() {
        let (t, n, id) = hit.ok_or(Error::Coverage {
            u: idx % w,
            v: idx / w,
        })?;
        depth.push(t);
        normals.push(n);
        labels.push(id);
    }
    Ok(GroundTruth {
        depth: DepthMap::new(w, h, depth)?,
        normals: NormalMap::with_uniform_kappa(w, h, normals, spec.confidence_model.kappa_max)?,
        surface_id: LabelMap::new(w, h, labels)?,
    })
}

/// Corrupted depth plus the number of pixels clamped to [`MIN_DEPTH`].
#[derive(Debug, Clone, PartialEq)]
pub struct Corrupted {
    pub depth: DepthMap,
    pub clamped: usize,
}

fn pixel_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub fn corrupt(depth: &DepthMap, spec: &CorruptionSpec) -> Result<Corrupted> {
    let m = spec.magnitude;
    if !(m >= 0.0 && m.is_finite()) {
        return Err(Error::InvalidConfig(format!("corruption magnitude {m} is invalid")));
    }
    let (w, h) = depth.dims();
    let src = depth.values();
    let raw: Vec<f64> = match spec.mode {
        _ if m == 0.0 => src.to_vec(),
        CorruptionMode::Gaussian => {
            let noise = Normal::new(0.0, m).map_err(|e| Error::InvalidConfig(e.to_string()))?;
            src.par_iter()
                .enumerate()
                .map(|(i, d)| d + noise.sample(&mut pixel_rng(spec.seed, i)))
                .collect()
        }
        CorruptionMode::ShrinkToMean => {
            let mean = depth.mean();
            src.iter().map(|d| (1.0 - m) * d + m * mean).collect()
        }
        CorruptionMode::ScaleError => src.iter().map(|d| (1.0 + m) * d).collect(),
        CorruptionMode::LowFrequencyBias => {
            let field = smooth_field(w, h, spec.seed);
            src.iter().zip(&field).map(|(d, f)| d + m * f).collect()
        }
    };
    let mut clamped = 0;
    let values = raw
        .into_iter()
        .map(|d| {
            if d < MIN_DEPTH || !d.is_finite() {
                clamped += 1;
                MIN_DEPTH
            } else {
                d
            }
        })
        .collect();
    if clamped > 0 {
        log::warn!("corruption clamped {clamped} pixels to {MIN_DEPTH} m");
    }
    Ok(Corrupted {
        depth: DepthMap::new(w, h, values)?,
        clamped,
    })
}

/// Sum of a few random low-frequency cosines, scaled into `[-1, 1]`.
fn smooth_field(w: usize, h: usize, seed: u64) -> Vec<f64> {
    const TERMS: usize = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f64; 4]> = (0..TERMS)
        .map(|_| {
            [
                rng.random_range(0.5..1.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(0.0..2.0 * PI),
            ]
        })
        .collect();
    let total: f64 = waves.iter().map(|w| w[0]).sum();
    (0..w * h)
        .map(|idx| {
            let x = (idx % w) as f64 / w as f64;
            let y = (idx / w) as f64 / h as f64;
            waves
                .iter()
                .map(|[a, fx, fy, phase]| a * (2.0 * PI * (fx * x + fy * y) + phase).cos())
                .sum::<f64>()
                / total
        })
        .collect()
}

/// True for pixels within Chebyshev distance `band` of a pixel with a
/// different label.
pub fn boundary_mask(labels: &LabelMap, band: usize) -> Vec<bool> {
    let (w, h) = labels.dims();
    let b = band as isize;
    (0..w * h)
        .into_par_iter()
        .map(|idx| {
            let (u, v) = ((idx % w) as isize, (idx / w) as isize);
            let own = labels.labels()[idx];
            (-b..=b).any(|dv| {
                (-b..=b).any(|du| {
                    let (x, y) = (u + du, v + dv);
                    x >= 0
                        && y >= 0
                        && (x as usize) < w
                        && (y as usize) < h
                        && labels.get(x as usize, y as usize) != own
                })
            })
        })
        .collect()
}

/// Rotate `n` by `angle` radians about a random axis perpendicular to it.
fn perturb(n: &Vec3, angle: f64, rng: &mut ChaCha8Rng) -> Vec3 {
    let probe = Vec3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    );
    let mut axis = n.cross(&probe);
    if axis.norm() < 1e-9 {
        axis = n.cross(&Vec3::x());
        if axis.norm() < 1e-9 {
            axis = n.cross(&Vec3::y());
        }
    }
    let axis = axis.normalize();
    // Rodrigues with axis ⟂ n.
    (n * angle.cos() + axis.cross(n) * angle.sin()).normalize()
}

/// Predicted normals and confidence derived from ground truth: `kappa_max`
/// inside primitives, `kappa_min` near label changes, and optional angular
/// noise that grows as confidence drops.
pub fn synth_confidence(gt: &GroundTruth, spec: &ConfidenceSpec) -> Result<NormalMap> {
    let (w, h) = gt.depth.dims();
    let near_boundary = boundary_mask(&gt.surface_id, spec.boundary_band);
    let kappa: Vec<f64> = near_boundary
        .iter()
        .map(|&b| if b { spec.kappa_min } else { spec.kappa_max })
        .collect();
    let normals: Vec<Vec3> = if spec.noise_deg == 0.0 {
        gt.normals.normals().to_vec()
    } else {
        gt.normals
            .normals()
            .par_iter()
            .zip(kappa.par_iter())
            .enumerate()
            .map(|(i, (n, k))| {
                let sigma_deg = if *k > 0.0 {
                    (spec.noise_deg * (spec.kappa_max / k).sqrt()).min(90.0)
                } else {
                    90.0
                };
                let mut rng = pixel_rng(spec.seed, i);
                let angle: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * sigma_deg.to_radians();
                perturb(n, angle, &mut rng)
            })
            .collect()
    };
    NormalMap::new(w, h, normals, kappa)
}

/// `count` distinct pixels drawn uniformly with their ground-truth depths.
///
/// Draws are prefixes of one seeded permutation, so for a fixed seed a
/// smaller anchor set is always a subset of a larger one.
pub fn sample_anchors(depth: &DepthMap, count: usize, seed: u64) -> Result<AnchorSet> {
    let n = depth.len();
    if count > n {
        return Err(Error::InvalidConfig(format!(
            "cannot sample {count} anchors from {n} pixels"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut picked = order[..count].to_vec();
    picked.sort_unstable();
    let w = depth.width();
    let anchors = picked
        .into_iter()
        .map(|i| Anchor {
            u: i % w,
            v: i / w,
            depth: depth.values()[i],
        })
        .collect();
    AnchorSet::new(anchors, depth.dims())
}

/// Ready-made scenes used by the tests, the acceptance suite and the CLI.
pub mod presets {
    use super::*;

    fn camera(width: usize, height: usize) -> CameraIntrinsics {
        CameraIntrinsics::centered(width as f64, width, height).expect("valid preset camera")
    }

    pub fn fronto_plane(width: usize, height: usize, depth: f64) -> SceneSpec {
        SceneSpec::new(
            camera(width, height),
            vec![Primitive::plane(1, Vec3::new(0.0, 0.0, -1.0), Vec3::new(0.0, 0.0, depth)).unwrap()],
        )
    }

    /// A single plane tilted about both image axes, 3 m in front of the camera.
    pub fn slanted_plane(width: usize, height: usize) -> SceneSpec {
        SceneSpec::new(
            camera(width, height),
            vec![Primitive::plane(1, Vec3::new(-0.45, -0.3, -1.0), Vec3::new(0.0, 0.0, 3.0)).unwrap()],
        )
    }

    /// Room corner: slanted back wall, floor and left wall.
    pub fn three_planes(width: usize, height: usize) -> SceneSpec {
        SceneSpec::new(
            camera(width, height),
            vec![
                Primitive::plane(1, Vec3::new(0.2, 0.1, -1.0), Vec3::new(0.0, 0.0, 4.0)).unwrap(),
                Primitive::plane(2, Vec3::new(0.0, -1.0, 0.0), Vec3::new(0.0, 0.8, 0.0)).unwrap(),
                Primitive::plane(3, Vec3::new(1.0, 0.0, 0.0), Vec3::new(-1.2, 0.0, 0.0)).unwrap(),
            ],
        )
    }

    /// Room with back wall, floor, ceiling and both side walls.
    pub fn room(width: usize, height: usize) -> SceneSpec {
        SceneSpec::new(
            camera(width, height),
            vec![
                Primitive::plane(1, Vec3::new(0.15, 0.05, -1.0), Vec3::new(0.0, 0.0, 5.0)).unwrap(),
                Primitive::plane(2, Vec3::new(0.0, -1.0, 0.0), Vec3::new(0.0, 1.0, 0.0)).unwrap(),
                Primitive::plane(3, Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, -1.3, 0.0)).unwrap(),
                Primitive::plane(4, Vec3::new(1.0, 0.0, 0.0), Vec3::new(-1.4, 0.0, 0.0)).unwrap(),
                Primitive::plane(5, Vec3::new(-1.0, 0.0, 0.2), Vec3::new(1.6, 0.0, 0.0)).unwrap(),
            ],
        )
    }

    /// Fronto-parallel wall with a sphere in front of it.
    pub fn sphere_on_wall(width: usize, height: usize) -> SceneSpec {
        SceneSpec::new(
            camera(width, height),
            vec![
                Primitive::sphere(2, Vec3::new(0.0, 0.0, 3.0), 0.8).unwrap(),
                Primitive::plane(1, Vec3::new(0.0, 0.0, -1.0), Vec3::new(0.0, 0.0, 4.0)).unwrap(),
            ],
        )
    }

    /// Default training set of the learned policy: two multi-plane layouts,
    /// each under three corruption modes.
    pub fn training_set(width: usize, height: usize) -> Vec<SceneSpec> {
        let mut out = Vec::new();
        for (i, base) in [three_planes(width, height), room(width, height)].into_iter().enumerate() {
            let seed = 100 + 10 * i as u64;
            out.push(base.clone().with_corruption(CorruptionSpec::new(CorruptionMode::Gaussian, 0.05, seed)));
            out.push(
                base.clone()
                    .with_corruption(CorruptionSpec::new(CorruptionMode::LowFrequencyBias, 0.2, seed + 1)),
            );
            out.push(base.with_corruption(CorruptionSpec::new(CorruptionMode::ShrinkToMean, 0.5, seed + 2)));
        }
        out
    }
}
