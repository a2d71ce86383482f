//! Iterative normal-guided refinement.
//!
//! Each iteration builds, for every pixel, one depth candidate per stencil
//! offset by propagating the neighbor's depth along the neighbor's tangent
//! plane, asks a [`WeightPolicy`] for a distribution over those candidates,
//! and replaces the depth by the weighted sum. Updates are double-buffered:
//! every candidate of iteration `t + 1` reads `d_t` only.

mod policy;

pub use policy::{
    oracle_weights, similarity_weights, OraclePolicy, PolicyInput, SelfPolicy, SimilarityPolicy,
    UniformPolicy, WeightPolicy,
};
pub(crate) use policy::softmax_into as policy_softmax;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{propagation_ratio, CameraIntrinsics};
use crate::map::{same_dims, DepthMap, NormalMap};

/// Tolerance on the per-pixel weight sum.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-6;

/// Square neighborhood of radius `beta`, offsets `(du, dv)` in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stencil {
    beta: usize,
    offsets: Vec<(i32, i32)>,
}

impl Stencil {
    pub fn new(beta: usize) -> Self {
        let b = beta as i32;
        let offsets = (-b..=b).flat_map(|dv| (-b..=b).map(move |du| (du, dv))).collect();
        Self { beta, offsets }
    }

    pub fn beta(&self) -> usize {
        self.beta
    }

    /// Number of offsets, `(2β + 1)²`.
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn offsets(&self) -> &[(i32, i32)] {
        &self.offsets
    }

    /// Index of the `(0, 0)` offset.
    pub fn self_index(&self) -> usize {
        self.offsets.len() / 2
    }
}

impl Default for Stencil {
    fn default() -> Self {
        Self::new(2)
    }
}

/// A pixel whose depth is fixed to a measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub u: usize,
    pub v: usize,
    pub depth: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnchorSet {
    anchors: Vec<Anchor>,
}

impl AnchorSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Validates positivity, bounds against `dims` and uniqueness.
    pub fn new(anchors: Vec<Anchor>, dims: (usize, usize)) -> Result<Self> {
        let (w, h) = dims;
        let mut seen = vec![false; w * h];
        for (index, a) in anchors.iter().enumerate() {
            let invalid = |reason: &str| Error::InvalidAnchor {
                index,
                u: a.u as i64,
                v: a.v as i64,
                reason: reason.to_string(),
            };
            if a.u >= w || a.v >= h {
                return Err(invalid("out of bounds"));
            }
            if !(a.depth > 0.0 && a.depth.is_finite()) {
                return Err(invalid("depth must be positive"));
            }
            let slot = &mut seen[a.v * w + a.u];
            if *slot {
                return Err(invalid("duplicate pixel"));
            }
            *slot = true;
        }
        Ok(Self { anchors })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Anchor> {
        self.anchors.iter()
    }

    pub fn as_slice(&self) -> &[Anchor] {
        &self.anchors
    }

    /// Overwrite the anchored pixels of `depth`.
    pub fn impose(&self, depth: &mut DepthMap) -> Result<()> {
        for a in &self.anchors {
            if a.u >= depth.width() || a.v >= depth.height() {
                return Err(Error::InvalidAnchor {
                    index: 0,
                    u: a.u as i64,
                    v: a.v as i64,
                    reason: "out of bounds for depth map".into(),
                });
            }
            depth.set(a.u, a.v, a.depth)?;
        }
        Ok(())
    }
}

/// Per-pixel candidate depths, `k` per pixel in stencil order.
///
/// `valid` is false for offsets whose source is outside the image or whose
/// propagation is degenerate; those slots hold the pixel's own depth.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    width: usize,
    height: usize,
    k: usize,
    self_index: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl CandidateSet {
    pub fn new(
        dims: (usize, usize),
        k: usize,
        self_index: usize,
        values: Vec<f64>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        let (width, height) = dims;
        let expected = width * height * k;
        if values.len() != expected || valid.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                found: values.len().min(valid.len()),
            });
        }
        if self_index >= k {
            return Err(Error::InvalidConfig(format!("self index {self_index} >= k {k}")));
        }
        Ok(Self {
            width,
            height,
            k,
            self_index,
            values,
            valid,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn self_index(&self) -> usize {
        self.self_index
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.values[i * self.k..(i + 1) * self.k]
    }

    pub fn pixel_valid(&self, i: usize) -> &[bool] {
        &self.valid[i * self.k..(i + 1) * self.k]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }
}

/// Per-pixel distribution over `k` candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightField {
    width: usize,
    height: usize,
    k: usize,
    weights: Vec<f64>,
}

impl WeightField {
    pub fn new(dims: (usize, usize), k: usize, weights: Vec<f64>) -> Result<Self> {
        let field = Self {
            width: dims.0,
            height: dims.1,
            k,
            weights,
        };
        field.validate()?;
        Ok(field)
    }

    pub(crate) fn from_raw(dims: (usize, usize), k: usize, weights: Vec<f64>) -> Self {
        debug_assert_eq!(weights.len(), dims.0 * dims.1 * k);
        Self {
            width: dims.0,
            height: dims.1,
            k,
            weights,
        }
    }

    /// One-hot on `index` at every pixel.
    pub fn one_hot(dims: (usize, usize), k: usize, index: usize) -> Self {
        let mut weights = vec![0.0; dims.0 * dims.1 * k];
        weights.iter_mut().skip(index).step_by(k).for_each(|w| *w = 1.0);
        Self::from_raw(dims, k, weights)
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.width * self.height * self.k;
        if self.weights.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                found: self.weights.len(),
            });
        }
        for (pixel, w) in self.weights.chunks_exact(self.k).enumerate() {
            let sum: f64 = w.iter().sum();
            let min = w.iter().copied().fold(f64::INFINITY, f64::min);
            if !(min >= 0.0) || !((sum - 1.0).abs() <= WEIGHT_SUM_TOLERANCE) {
                return Err(Error::InvalidWeights { pixel, sum, min });
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.weights[i * self.k..(i + 1) * self.k]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Source pixel and propagation ratio for every (pixel, offset) pair.
///
/// The ratio depends only on the camera and the normals, so it is computed
/// once and reused while the depth map evolves: the candidate is
/// `ratio * d_t(source)`.
#[derive(Debug, Clone)]
pub(crate) struct PropagationTable {
    pub width: usize,
    pub height: usize,
    pub k: usize,
    pub self_index: usize,
    pub entries: Vec<Option<(usize, f64)>>,
}

impl PropagationTable {
    pub fn build(intr: &CameraIntrinsics, nmap: &NormalMap, stencil: &Stencil) -> Result<Self> {
        same_dims(intr.dims(), nmap.dims())?;
        let (w, h) = nmap.dims();
        let k = stencil.len();
        let self_index = stencil.self_index();
        let mut entries = vec![None; w * h * k];
        entries
            .par_chunks_mut(k)
            .enumerate()
            .for_each(|(i, slots)| {
                let (u, v) = ((i % w) as i64, (i / w) as i64);
                let dst = intr.ray(u as f64, v as f64);
                for (slot, &(du, dv)) in slots.iter_mut().zip(stencil.offsets()) {
                    if (du, dv) == (0, 0) {
                        continue;
                    }
                    let (x, y) = (u + du as i64, v + dv as i64);
                    if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                        continue;
                    }
                    let j = y as usize * w + x as usize;
                    let src = intr.ray(x as f64, y as f64);
                    *slot = propagation_ratio(src, &nmap.normals()[j], dst).map(|r| (j, r));
                }
            });
        Ok(Self {
            width: w,
            height: h,
            k,
            self_index,
            entries,
        })
    }

    pub fn candidates(&self, depth: &DepthMap) -> Result<CandidateSet> {
        same_dims((self.width, self.height), depth.dims())?;
        let d = depth.values();
        let k = self.k;
        let mut values = vec![0.0; self.entries.len()];
        let mut valid = vec![false; self.entries.len()];
        values
            .par_chunks_mut(k)
            .zip(valid.par_chunks_mut(k))
            .enumerate()
            .for_each(|(i, (vals, ok))| {
                for kk in 0..k {
                    match self.entries[i * k + kk] {
                        Some((j, ratio)) => {
                            vals[kk] = ratio * d[j];
                            ok[kk] = true;
                        }
                        None => {
                            vals[kk] = d[i];
                            ok[kk] = kk == self.self_index;
                        }
                    }
                }
            });
        CandidateSet::new((self.width, self.height), k, self.self_index, values, valid)
    }
}

/// Candidate depths for every pixel and stencil offset.
pub fn candidates(
    intr: &CameraIntrinsics,
    depth: &DepthMap,
    nmap: &NormalMap,
    stencil: &Stencil,
) -> Result<CandidateSet> {
    same_dims(depth.dims(), nmap.dims())?;
    PropagationTable::build(intr, nmap, stencil)?.candidates(depth)
}

/// Weighted sum of candidates per pixel.
pub fn update_step(depth: &DepthMap, cands: &CandidateSet, weights: &WeightField) -> Result<DepthMap> {
    same_dims(depth.dims(), cands.dims())?;
    same_dims(depth.dims(), weights.dims())?;
    if cands.k() != weights.k() {
        return Err(Error::LengthMismatch {
            expected: cands.k(),
            found: weights.k(),
        });
    }
    weights.validate()?;
    let k = cands.k();
    let values: Vec<f64> = cands
        .values()
        .par_chunks_exact(k)
        .zip(weights.weights().par_chunks_exact(k))
        .map(|(c, w)| c.iter().zip(w).map(|(c, w)| c * w).sum())
        .collect();
    let (w, h) = depth.dims();
    DepthMap::new(w, h, values)
}

/// Per-iteration record of a refinement run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RefineTrace {
    pub iterations: usize,
    /// `d_0 ..= d_{n_iter}` when recording was requested, otherwise empty.
    pub snapshots: Vec<DepthMap>,
}

#[derive(Debug, Clone)]
pub struct RefineOptions<'a> {
    pub n_iter: usize,
    pub stencil: Stencil,
    pub anchors: Option<&'a AnchorSet>,
    pub record: bool,
}

impl Default for RefineOptions<'_> {
    fn default() -> Self {
        Self {
            n_iter: 20,
            stencil: Stencil::default(),
            anchors: None,
            record: false,
        }
    }
}

impl<'a> RefineOptions<'a> {
    pub fn new(n_iter: usize) -> Self {
        Self {
            n_iter,
            ..Self::default()
        }
    }

    pub fn with_anchors(mut self, anchors: &'a AnchorSet) -> Self {
        self.anchors = Some(anchors);
        self
    }

    pub fn with_stencil(mut self, stencil: Stencil) -> Self {
        self.stencil = stencil;
        self
    }

    pub fn recording(mut self) -> Self {
        self.record = true;
        self
    }
}

/// Run `n_iter` rounds of candidates, policy weights and update.
///
/// Anchors are written into the initial depth and again after every update.
pub fn refine(
    intr: &CameraIntrinsics,
    d0: &DepthMap,
    nmap: &NormalMap,
    policy: &dyn WeightPolicy,
    options: &RefineOptions<'_>,
) -> Result<(DepthMap, RefineTrace)> {
    same_dims(intr.dims(), d0.dims())?;
    same_dims(d0.dims(), nmap.dims())?;
    let table = PropagationTable::build(intr, nmap, &options.stencil)?;

    let mut depth = d0.clone();
    if let Some(anchors) = options.anchors {
        anchors.impose(&mut depth)?;
    }
    let mut trace = RefineTrace {
        iterations: options.n_iter,
        snapshots: Vec::new(),
    };
    if options.record {
        trace.snapshots.push(depth.clone());
    }
    for iteration in 0..options.n_iter {
        let cands = table.candidates(&depth)?;
        let weights = policy.weights(&PolicyInput {
            intrinsics: intr,
            depth: &depth,
            normals: nmap,
            stencil: &options.stencil,
            candidates: &cands,
            iteration,
        })?;
        depth = update_step(&depth, &cands, &weights)?;
        if let Some(anchors) = options.anchors {
            anchors.impose(&mut depth)?;
        }
        if options.record {
            trace.snapshots.push(depth.clone());
        }
    }
    Ok((depth, trace))
}

/// Least-squares scale `s` minimizing `Σ (s·d0(a) − d_a)²` over the anchors,
/// and the rescaled map.
pub fn scale_match(d0: &DepthMap, anchors: &AnchorSet) -> Result<(DepthMap, f64)> {
    if anchors.is_empty() {
        return Err(Error::InvalidConfig("scale matching needs at least one anchor".into()));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for a in anchors.iter() {
        if a.u >= d0.width() || a.v >= d0.height() {
            return Err(Error::InvalidAnchor {
                index: 0,
                u: a.u as i64,
                v: a.v as i64,
                reason: "out of bounds for depth map".into(),
            });
        }
        let p = d0.get(a.u, a.v);
        num += p * a.depth;
        den += p * p;
    }
    let s = num / den;
    let (w, h) = d0.dims();
    let scaled = DepthMap::new(w, h, d0.values().iter().map(|d| d * s).collect())?;
    Ok((scaled, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{plane_ray_depth, Vec3};
    use crate::scene::{presets, render};
    use approx::assert_relative_eq;

    fn scene(spec: crate::scene::SceneSpec) -> (CameraIntrinsics, crate::scene::GroundTruth) {
        let gt = render(&spec).unwrap();
        (spec.intrinsics, gt)
    }

    #[test]
    fn stencil_layout() {
        let s = Stencil::new(2);
        assert_eq!(s.len(), 25);
        assert_eq!(s.offsets()[0], (-2, -2));
        assert_eq!(s.offsets()[1], (-1, -2));
        assert_eq!(s.offsets()[s.self_index()], (0, 0));
        assert_eq!(Stencil::new(0).offsets(), &[(0, 0)]);
    }

    #[test]
    fn candidates_fronto_plane_all_equal() {
        let (intr, gt) = scene(presets::fronto_plane(9, 7, 2.0));
        let c = candidates(&intr, &gt.depth, &gt.normals, &Stencil::default()).unwrap();
        assert!(c.values().iter().all(|v| *v == 2.0));
    }

    #[test]
    fn candidates_slanted_plane_exact() {
        // Plane x + z = 2 seen by a unit camera near the principal point.
        let intr = CameraIntrinsics::new(4.0, 4.0, 2.0, 2.0, 5, 5).unwrap();
        let n = Vec3::new(-1.0, 0.0, -1.0) / 2f64.sqrt();
        let p = Vec3::new(0.0, 0.0, 2.0);
        let truth = |u: usize, v: usize| plane_ray_depth(&n, &p, &intr.ray(u as f64, v as f64).to_vec()).unwrap();
        let depth = DepthMap::from_fn(5, 5, truth).unwrap();
        let nmap = NormalMap::with_uniform_kappa(5, 5, vec![n; 25], 1.0).unwrap();
        let c = candidates(&intr, &depth, &nmap, &Stencil::default()).unwrap();
        for i in 0..25 {
            let expected = truth(i % 5, i / 5);
            for (cand, ok) in c.pixel(i).iter().zip(c.pixel_valid(i)) {
                if *ok {
                    assert_relative_eq!(*cand, expected, max_relative = 1e-12);
                } else {
                    assert_eq!(*cand, depth.values()[i]);
                }
            }
            assert_eq!(c.pixel(i)[12], depth.values()[i]);
        }
        // Corner pixel: 9 in-bounds neighbors including itself.
        assert_eq!(c.pixel_valid(0).iter().filter(|v| **v).count(), 9);
    }

    #[test]
    fn candidates_follow_displaced_tangent_planes() {
        let (intr, gt) = scene(presets::slanted_plane(6, 6));
        let mut values = gt.depth.values().to_vec();
        for (i, d) in values.iter_mut().enumerate() {
            *d *= 1.0 + 0.01 * (i % 7) as f64;
        }
        let depth = DepthMap::new(6, 6, values).unwrap();
        let stencil = Stencil::default();
        let c = candidates(&intr, &depth, &gt.normals, &stencil).unwrap();
        for i in 0..36 {
            let (u, v) = ((i % 6) as i32, (i / 6) as i32);
            for (kk, &(du, dv)) in stencil.offsets().iter().enumerate() {
                let (x, y) = (u + du, v + dv);
                if !(0..6).contains(&x) || !(0..6).contains(&y) {
                    assert!(!c.pixel_valid(i)[kk] || (du, dv) == (0, 0));
                    continue;
                }
                let n = gt.normals.normal(x as usize, y as usize);
                let pj = crate::geometry::backproject(&intr, x as f64, y as f64, depth.get(x as usize, y as usize)).unwrap();
                let expected = plane_ray_depth(&n, &pj, &intr.ray(u as f64, v as f64).to_vec()).unwrap();
                assert_relative_eq!(c.pixel(i)[kk], expected, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn candidates_dimension_mismatch() {
        let (intr, gt) = scene(presets::fronto_plane(4, 4, 2.0));
        let other = DepthMap::filled(3, 4, 1.0).unwrap();
        assert!(matches!(
            candidates(&intr, &other, &gt.normals, &Stencil::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn update_step_examples() {
        let (intr, gt) = scene(presets::three_planes(12, 10));
        let d = crate::scene::corrupt(&gt.depth, &crate::scene::CorruptionSpec::new(
            crate::scene::CorruptionMode::Gaussian, 0.1, 2)).unwrap().depth;
        let stencil = Stencil::default();
        let c = candidates(&intr, &d, &gt.normals, &stencil).unwrap();
        let w = WeightField::one_hot(d.dims(), 25, stencil.self_index());
        assert_eq!(update_step(&d, &c, &w).unwrap(), d);

        let d = DepthMap::filled(1, 1, 1.0).unwrap();
        let c = CandidateSet::new((1, 1), 2, 0, vec![1.0, 3.0], vec![true, true]).unwrap();
        let w = WeightField::new((1, 1), 2, vec![0.25, 0.75]).unwrap();
        assert_eq!(update_step(&d, &c, &w).unwrap().values(), &[2.5]);
    }

    #[test]
    fn weight_field_rejects_non_distributions() {
        assert!(matches!(
            WeightField::new((1, 1), 2, vec![0.5, 0.6]),
            Err(Error::InvalidWeights { pixel: 0, .. })
        ));
        assert!(WeightField::new((1, 1), 2, vec![1.5, -0.5]).is_err());
        assert!(WeightField::new((1, 1), 2, vec![f64::NAN, 1.0]).is_err());
        assert!(WeightField::new((1, 1), 2, vec![0.5, 0.5 + 1e-7]).is_ok());
        let bad = WeightField::from_raw((1, 1), 2, vec![0.2, 0.2]);
        let d = DepthMap::filled(1, 1, 1.0).unwrap();
        let c = CandidateSet::new((1, 1), 2, 0, vec![1.0, 3.0], vec![true, true]).unwrap();
        assert!(matches!(update_step(&d, &c, &bad), Err(Error::InvalidWeights { .. })));
    }

    #[test]
    fn refine_zero_iterations() {
        let (intr, gt) = scene(presets::three_planes(10, 10));
        let d0 = DepthMap::filled(10, 10, 3.0).unwrap();
        let (out, trace) = refine(&intr, &d0, &gt.normals, &UniformPolicy, &RefineOptions::new(0).recording()).unwrap();
        assert_eq!(out, d0);
        assert_eq!(trace.snapshots.len(), 1);

        let anchors = AnchorSet::new(vec![Anchor { u: 1, v: 2, depth: 7.0 }], (10, 10)).unwrap();
        let opts = RefineOptions::new(0).with_anchors(&anchors);
        let (out, _) = refine(&intr, &d0, &gt.normals, &UniformPolicy, &opts).unwrap();
        assert_eq!(out.get(1, 2), 7.0);
        assert_eq!(out.get(2, 1), 3.0);
    }

    #[test]
    fn refine_trace_length_and_anchor_persistence() {
        let (intr, gt) = scene(presets::three_planes(16, 16));
        let d0 = DepthMap::filled(16, 16, 3.0).unwrap();
        let anchors = crate::scene::sample_anchors(&gt.depth, 12, 5).unwrap();
        let opts = RefineOptions::new(7).with_anchors(&anchors).recording();
        let policy = SimilarityPolicy::default();
        let (out, trace) = refine(&intr, &d0, &gt.normals, &policy, &opts).unwrap();
        assert_eq!(trace.snapshots.len(), 8);
        assert_eq!(trace.iterations, 7);
        for snap in &trace.snapshots {
            for a in anchors.iter() {
                assert_eq!(snap.get(a.u, a.v), a.depth);
            }
        }
        assert_eq!(&out, trace.snapshots.last().unwrap());
    }

    #[test]
    fn anchor_set_validation() {
        let a = |u, v, depth| Anchor { u, v, depth };
        assert!(AnchorSet::new(vec![a(0, 0, 1.0), a(3, 2, 1.0)], (4, 3)).is_ok());
        assert!(matches!(
            AnchorSet::new(vec![a(0, 0, 1.0), a(4, 0, 1.0)], (4, 3)),
            Err(Error::InvalidAnchor { index: 1, .. })
        ));
        assert!(AnchorSet::new(vec![a(0, 0, 1.0), a(0, 0, 2.0)], (4, 3)).is_err());
        assert!(AnchorSet::new(vec![a(0, 0, 0.0)], (4, 3)).is_err());
    }

    #[test]
    fn scale_match_examples() {
        let d0 = DepthMap::new(2, 1, vec![1.0, 2.0]).unwrap();
        let exact = AnchorSet::new(vec![Anchor { u: 0, v: 0, depth: 1.0 }, Anchor { u: 1, v: 0, depth: 2.0 }], (2, 1)).unwrap();
        assert_eq!(scale_match(&d0, &exact).unwrap().1, 1.0);

        let doubled = AnchorSet::new(vec![Anchor { u: 0, v: 0, depth: 2.0 }, Anchor { u: 1, v: 0, depth: 4.0 }], (2, 1)).unwrap();
        let (scaled, s) = scale_match(&d0, &doubled).unwrap();
        assert_eq!(s, 2.0);
        assert_eq!(scaled.values(), &[2.0, 4.0]);

        let single = AnchorSet::new(vec![Anchor { u: 1, v: 0, depth: 3.0 }], (2, 1)).unwrap();
        assert_eq!(scale_match(&d0, &single).unwrap().1, 1.5);

        assert!(scale_match(&d0, &AnchorSet::empty()).is_err());
    }
}
