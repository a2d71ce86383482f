//! Coarse-to-full resolution transfer.
//!
//! A full-resolution pixel `(u, v)` lies in coarse cell `(u / s, v / s)`.
//! Normal-guided upsampling propagates the depths of the 3x3 coarse cells
//! around that containing cell onto the pixel's ray (each along its own
//! tangent plane) and fuses the nine candidates with per-pixel weights.
//! Coarse cell centers sit at full-resolution coordinate `s·(x + 0.5) − 0.5`,
//! the same alignment [`coarse_intrinsics`] uses.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{coarse_center, coarse_intrinsics, propagation_ratio, CameraIntrinsics};
use crate::map::{same_dims, DepthMap, NormalMap};
use crate::refine::{oracle_weights, CandidateSet, WeightField};

/// Number of coarse neighbors per full-resolution pixel.
pub const UP_K: usize = 9;
/// Stencil index of the containing cell.
pub const CONTAINING: usize = 4;

/// 3x3 cell offsets in row-major order.
pub const UP_OFFSETS: [(i32, i32); UP_K] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (0, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
    NormalGuided,
}

impl UpsampleMode {
    pub const ALL: [UpsampleMode; 3] = [Self::Nearest, Self::Bilinear, Self::NormalGuided];
}

impl fmt::Display for UpsampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Nearest => "nearest",
            Self::Bilinear => "bilinear",
            Self::NormalGuided => "normal-guided",
        })
    }
}

impl FromStr for UpsampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Self::Nearest),
            "bilinear" => Ok(Self::Bilinear),
            "normal-guided" => Ok(Self::NormalGuided),
            other => Err(Error::InvalidConfig(format!("unknown upsample mode '{other}'"))),
        }
    }
}

fn check_stride(full: (usize, usize), coarse: (usize, usize), stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::InvalidConfig("stride must be at least 1".into()));
    }
    same_dims(full, (coarse.0 * stride, coarse.1 * stride))
}

/// Per full-resolution pixel: the source cell and propagation ratio of each
/// of the nine candidates (`None` when out of bounds or degenerate), plus the
/// containing-cell fallback used for those slots.
#[derive(Debug, Clone)]
pub(crate) struct UpTable {
    pub dims: (usize, usize),
    pub entries: Vec<[Option<(usize, f64)>; UP_K]>,
    pub fallback: Vec<(usize, f64)>,
}

impl UpTable {
    pub fn build(intr_full: &CameraIntrinsics, n_coarse: &NormalMap, stride: usize) -> Result<Self> {
        check_stride(intr_full.dims(), n_coarse.dims(), stride)?;
        let (w, h) = intr_full.dims();
        let (cw, ch) = n_coarse.dims();
        let (entries, fallback) = (0..w * h)
            .into_par_iter()
            .map(|i| {
                let (u, v) = (i % w, i / w);
                let dst = intr_full.ray(u as f64, v as f64);
                let (cx, cy) = ((u / stride) as i64, (v / stride) as i64);
                let propagate = |x: i64, y: i64| -> Option<(usize, f64)> {
                    if x < 0 || y < 0 || x >= cw as i64 || y >= ch as i64 {
                        return None;
                    }
                    let (x, y) = (x as usize, y as usize);
                    let src = intr_full.ray(coarse_center(x as f64, stride), coarse_center(y as f64, stride));
                    propagation_ratio(src, &n_coarse.normal(x, y), dst).map(|r| (y * cw + x, r))
                };
                let containing = cy as usize * cw + cx as usize;
                let fallback = propagate(cx, cy).unwrap_or((containing, 1.0));
                let mut slots = [None; UP_K];
                for (kk, &(dx, dy)) in UP_OFFSETS.iter().enumerate() {
                    if kk != CONTAINING {
                        slots[kk] = propagate(cx + dx as i64, cy + dy as i64);
                    }
                }
                (slots, fallback)
            })
            .unzip();
        Ok(Self {
            dims: (w, h),
            entries,
            fallback,
        })
    }

    pub fn candidates(&self, d_coarse: &DepthMap) -> Result<CandidateSet> {
        let d = d_coarse.values();
        let n = self.entries.len();
        let mut values = vec![0.0; n * UP_K];
        let mut valid = vec![false; n * UP_K];
        values
            .par_chunks_mut(UP_K)
            .zip(valid.par_chunks_mut(UP_K))
            .enumerate()
            .for_each(|(i, (vals, ok))| {
                let (fc, fr) = self.fallback[i];
                for kk in 0..UP_K {
                    match self.entries[i][kk] {
                        Some((cell, r)) => {
                            vals[kk] = r * d[cell];
                            ok[kk] = true;
                        }
                        None => {
                            vals[kk] = fr * d[fc];
                            ok[kk] = kk == CONTAINING;
                        }
                    }
                }
            });
        CandidateSet::new(self.dims, UP_K, CONTAINING, values, valid)
    }
}

/// Nine propagated candidates per full-resolution pixel.
pub fn up_candidates(
    intr_full: &CameraIntrinsics,
    d_coarse: &DepthMap,
    n_coarse: &NormalMap,
    stride: usize,
) -> Result<CandidateSet> {
    same_dims(d_coarse.dims(), n_coarse.dims())?;
    UpTable::build(intr_full, n_coarse, stride)?.candidates(d_coarse)
}

/// Weighted sum of candidates at full resolution.
pub fn up_step(cands: &CandidateSet, weights: &WeightField) -> Result<DepthMap> {
    same_dims(cands.dims(), weights.dims())?;
    if cands.k() != weights.k() {
        return Err(Error::LengthMismatch {
            expected: cands.k(),
            found: weights.k(),
        });
    }
    weights.validate()?;
    let k = cands.k();
    let values = cands
        .values()
        .par_chunks_exact(k)
        .zip(weights.weights().par_chunks_exact(k))
        .map(|(c, w)| c.iter().zip(w).map(|(c, w)| c * w).sum())
        .collect();
    let (w, h) = cands.dims();
    DepthMap::new(w, h, values)
}

/// One-hot on the candidate nearest the full-resolution ground truth.
pub fn up_oracle_weights(cands: &CandidateSet, gt_full: &DepthMap) -> Result<WeightField> {
    oracle_weights(cands, gt_full)
}

/// One-hot on the containing cell.
pub fn up_containing_weights(cands: &CandidateSet) -> WeightField {
    WeightField::one_hot(cands.dims(), cands.k(), cands.self_index())
}

/// Softmax over `n_refᵀ n_cell / temperature`, where `n_ref` is the
/// full-resolution normal when given and the containing cell's otherwise.
pub fn up_similarity_weights(
    cands: &CandidateSet,
    n_coarse: &NormalMap,
    n_full: Option<&NormalMap>,
    stride: usize,
    temperature: f64,
) -> Result<WeightField> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig(format!("temperature must be positive, got {temperature}")));
    }
    check_stride(cands.dims(), n_coarse.dims(), stride)?;
    if let Some(nf) = n_full {
        same_dims(cands.dims(), nf.dims())?;
    }
    let (w, _) = cands.dims();
    let mut weights = vec![0.0; cands.values().len()];
    weights.par_chunks_mut(UP_K).enumerate().for_each(|(i, logits)| {
        let (u, v) = (i % w, i / w);
        let (cx, cy) = ((u / stride) as i64, (v / stride) as i64);
        let n_ref = match n_full {
            Some(nf) => nf.normals()[i],
            None => n_coarse.normal(cx as usize, cy as usize),
        };
        let valid = cands.pixel_valid(i);
        for (kk, &(dx, dy)) in UP_OFFSETS.iter().enumerate() {
            logits[kk] = if valid[kk] {
                let n = n_coarse.normal((cx + dx as i64) as usize, (cy + dy as i64) as usize);
                n_ref.dot(&n) / temperature
            } else {
                f64::NEG_INFINITY
            };
        }
        crate::refine::policy_softmax(logits, CONTAINING);
    });
    Ok(WeightField::new(cands.dims(), UP_K, weights)?)
}

/// Normal-guided upsampling with the given weights.
pub fn upsample_normal_guided(
    intr_full: &CameraIntrinsics,
    d_coarse: &DepthMap,
    n_coarse: &NormalMap,
    stride: usize,
    weights: impl FnOnce(&CandidateSet) -> Result<WeightField>,
) -> Result<DepthMap> {
    let cands = up_candidates(intr_full, d_coarse, n_coarse, stride)?;
    let w = weights(&cands)?;
    up_step(&cands, &w)
}

/// Block replication.
pub fn upsample_nearest(d_coarse: &DepthMap, stride: usize) -> Result<DepthMap> {
    if stride == 0 {
        return Err(Error::InvalidConfig("stride must be at least 1".into()));
    }
    let (cw, ch) = d_coarse.dims();
    DepthMap::from_fn(cw * stride, ch * stride, |u, v| d_coarse.get(u / stride, v / stride))
}

/// Bilinear interpolation between coarse cell centers, clamped at the edges.
pub fn upsample_bilinear(d_coarse: &DepthMap, stride: usize) -> Result<DepthMap> {
    if stride == 0 {
        return Err(Error::InvalidConfig("stride must be at least 1".into()));
    }
    let (cw, ch) = d_coarse.dims();
    let s = stride as f64;
    let axis = |p: usize, n: usize| -> (usize, usize, f64) {
        let x = ((p as f64 + 0.5) / s - 0.5).clamp(0.0, (n - 1) as f64);
        let x0 = (x.floor() as usize).min(n - 1);
        let x1 = (x0 + 1).min(n - 1);
        (x0, x1, x - x0 as f64)
    };
    DepthMap::from_fn(cw * stride, ch * stride, |u, v| {
        let (x0, x1, fx) = axis(u, cw);
        let (y0, y1, fy) = axis(v, ch);
        let top = (1.0 - fx) * d_coarse.get(x0, y0) + fx * d_coarse.get(x1, y0);
        let bottom = (1.0 - fx) * d_coarse.get(x0, y1) + fx * d_coarse.get(x1, y1);
        (1.0 - fy) * top + fy * bottom
    })
}

/// Coarse normals: the normal at each block's center pixel and the minimum
/// confidence over the block.
pub fn downsample_normals(nmap: &NormalMap, stride: usize) -> Result<NormalMap> {
    if stride == 0 || nmap.width() % stride != 0 || nmap.height() % stride != 0 {
        return Err(Error::InvalidConfig(format!(
            "{}x{} map is not divisible by stride {stride}",
            nmap.width(),
            nmap.height()
        )));
    }
    let (cw, ch) = (nmap.width() / stride, nmap.height() / stride);
    let mid = stride / 2;
    let mut normals = Vec::with_capacity(cw * ch);
    let mut kappa = Vec::with_capacity(cw * ch);
    for y in 0..ch {
        for x in 0..cw {
            normals.push(nmap.normal(x * stride + mid, y * stride + mid));
            let mut k = f64::INFINITY;
            for v in y * stride..(y + 1) * stride {
                for u in x * stride..(x + 1) * stride {
                    k = k.min(nmap.kappa_at(u, v));
                }
            }
            kappa.push(k);
        }
    }
    NormalMap::new(cw, ch, normals, kappa)
}

/// Coarse depth: the depth at each block's center pixel, carried along that
/// pixel's tangent plane onto the coarse cell-center ray.
pub fn downsample_depth(
    intr_full: &CameraIntrinsics,
    depth: &DepthMap,
    nmap: &NormalMap,
    stride: usize,
) -> Result<DepthMap> {
    same_dims(intr_full.dims(), depth.dims())?;
    same_dims(depth.dims(), nmap.dims())?;
    let coarse = coarse_intrinsics(intr_full, stride)?;
    let mid = stride / 2;
    DepthMap::from_fn(coarse.width, coarse.height, |x, y| {
        let (u, v) = (x * stride + mid, y * stride + mid);
        let d = depth.get(u, v);
        let src = intr_full.ray(u as f64, v as f64);
        let dst = coarse.ray(x as f64, y as f64);
        propagation_ratio(src, &nmap.normal(u, v), dst).map_or(d, |r| r * d)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::plane_ray_depth;
    use crate::refine::{candidates, Stencil};
    use crate::scene::{presets, render, Primitive, SceneSpec};
    use approx::assert_relative_eq;

    fn coarse_scene(spec: &SceneSpec, stride: usize) -> (CameraIntrinsics, crate::scene::GroundTruth) {
        let coarse = coarse_intrinsics(&spec.intrinsics, stride).unwrap();
        let mut cs = spec.clone();
        cs.intrinsics = coarse;
        (coarse, render(&cs).unwrap())
    }

    #[test]
    fn fronto_plane_candidates_constant() {
        let spec = presets::fronto_plane(16, 16, 2.0);
        let (_, coarse) = coarse_scene(&spec, 4);
        let c = up_candidates(&spec.intrinsics, &coarse.depth, &coarse.normals, 4).unwrap();
        assert!(c.values().iter().all(|v| *v == 2.0));
    }

    #[test]
    fn slanted_plane_candidates_exact() {
        let spec = SceneSpec::new(
            CameraIntrinsics::new(40.0, 40.0, 15.5, 15.5, 32, 32).unwrap(),
            vec![Primitive::plane(1, crate::Vec3::new(-1.0, 0.0, -1.0), crate::Vec3::new(0.0, 0.0, 2.0)).unwrap()],
        );
        let (_, coarse) = coarse_scene(&spec, 8);
        let c = up_candidates(&spec.intrinsics, &coarse.depth, &coarse.normals, 8).unwrap();
        let Primitive::Plane { normal, point, .. } = spec.primitives[0] else { unreachable!() };
        for i in 0..32 * 32 {
            let r = spec.intrinsics.ray((i % 32) as f64, (i / 32) as f64).to_vec();
            let truth = plane_ray_depth(&normal, &point, &r).unwrap();
            for (cand, ok) in c.pixel(i).iter().zip(c.pixel_valid(i)) {
                if *ok {
                    assert_relative_eq!(*cand, truth, max_relative = 1e-12);
                }
            }
        }
        let w = up_oracle_weights(&c, &render(&spec).unwrap().depth).unwrap();
        let up = up_step(&c, &w).unwrap();
        let gt = render(&spec).unwrap().depth;
        for (a, b) in up.values().iter().zip(gt.values()) {
            assert_relative_eq!(*a, *b, max_relative = 1e-12);
        }
    }

    #[test]
    fn stride_one_is_refine_stencil() {
        let spec = presets::three_planes(10, 8);
        let gt = render(&spec).unwrap();
        let up = up_candidates(&spec.intrinsics, &gt.depth, &gt.normals, 1).unwrap();
        let refine = candidates(&spec.intrinsics, &gt.depth, &gt.normals, &Stencil::new(1)).unwrap();
        assert_eq!(up.values(), refine.values());
        assert_eq!(up.valid(), refine.valid());
        let id = up_step(&up, &up_containing_weights(&up)).unwrap();
        assert_eq!(id, gt.depth);
    }

    #[test]
    fn containing_weights_replicate_blocks() {
        let spec = presets::fronto_plane(8, 8, 2.5);
        let (_, coarse) = coarse_scene(&spec, 4);
        let c = up_candidates(&spec.intrinsics, &coarse.depth, &coarse.normals, 4).unwrap();
        let up = up_step(&c, &up_containing_weights(&c)).unwrap();
        assert_eq!(up, upsample_nearest(&coarse.depth, 4).unwrap());
    }

    #[test]
    fn up_step_equal_candidates() {
        let c = CandidateSet::new((1, 1), 9, 4, vec![3.0; 9], vec![true; 9]).unwrap();
        let mut w = vec![0.0; 9];
        w[0] = 0.5;
        w[8] = 0.5;
        let w = WeightField::new((1, 1), 9, w).unwrap();
        assert_eq!(up_step(&c, &w).unwrap().values(), &[3.0]);
    }

    #[test]
    fn nearest_and_bilinear_basics() {
        let d = DepthMap::new(2, 1, vec![1.0, 3.0]).unwrap();
        assert_eq!(upsample_nearest(&d, 2).unwrap().values(), &[1.0, 1.0, 3.0, 3.0, 1.0, 1.0, 3.0, 3.0]);
        let flat = DepthMap::filled(3, 2, 1.7).unwrap();
        assert!(upsample_bilinear(&flat, 4).unwrap().values().iter().all(|v| (*v - 1.7).abs() < 1e-15));
        assert!(upsample_nearest(&flat, 4).unwrap().values().iter().all(|v| *v == 1.7));

        // Linear ramp in x and y: exact wherever the sample lies between centers.
        let ramp = DepthMap::from_fn(5, 4, |x, y| 1.0 + 0.5 * x as f64 + 0.25 * y as f64).unwrap();
        let s = 4;
        let up = upsample_bilinear(&ramp, s).unwrap();
        for v in 0..16 {
            for u in 0..20 {
                let x = (u as f64 + 0.5) / s as f64 - 0.5;
                let y = (v as f64 + 0.5) / s as f64 - 0.5;
                if (0.0..=4.0).contains(&x) && (0.0..=3.0).contains(&y) {
                    assert_relative_eq!(up.get(u, v), 1.0 + 0.5 * x + 0.25 * y, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn similarity_up_weights_valid() {
        let spec = presets::three_planes(32, 32);
        let (_, coarse) = coarse_scene(&spec, 4);
        let c = up_candidates(&spec.intrinsics, &coarse.depth, &coarse.normals, 4).unwrap();
        let full = render(&spec).unwrap();
        for n_full in [None, Some(&full.normals)] {
            let w = up_similarity_weights(&c, &coarse.normals, n_full, 4, 0.1).unwrap();
            w.validate().unwrap();
            let up = up_step(&c, &w).unwrap();
            for i in 0..up.len() {
                let cs = c.pixel(i);
                let lo = cs.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = cs.iter().copied().fold(0.0, f64::max);
                assert!(up.values()[i] >= lo * (1.0 - 1e-12) && up.values()[i] <= hi * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn downsampling_is_exact_on_planes() {
        let spec = presets::slanted_plane(32, 24);
        let gt = render(&spec).unwrap();
        let (_, coarse) = coarse_scene(&spec, 8);
        let d = downsample_depth(&spec.intrinsics, &gt.depth, &gt.normals, 8).unwrap();
        for (a, b) in d.values().iter().zip(coarse.depth.values()) {
            assert_relative_eq!(*a, *b, max_relative = 1e-12);
        }
        let n = downsample_normals(&gt.normals, 8).unwrap();
        assert_eq!(n.dims(), (4, 3));
        assert!(downsample_normals(&gt.normals, 5).is_err());
    }

    #[test]
    fn downsampled_kappa_is_block_minimum() {
        let normals = vec![crate::Vec3::new(0.0, 0.0, -1.0); 16];
        let kappa: Vec<f64> = (0..16).map(|i| 1.0 + i as f64).collect();
        let n = NormalMap::new(4, 4, normals, kappa).unwrap();
        let c = downsample_normals(&n, 2).unwrap();
        assert_eq!(c.kappa(), &[1.0, 3.0, 9.0, 11.0]);
    }

    #[test]
    fn mode_parsing() {
        for m in UpsampleMode::ALL {
            assert_eq!(m.to_string().parse::<UpsampleMode>().unwrap(), m);
        }
        assert!("cubic".parse::<UpsampleMode>().is_err());
    }
}
