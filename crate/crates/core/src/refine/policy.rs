//! Weight policies: anything that maps the current candidates to a
//! per-pixel distribution over the stencil.

use rayon::prelude::*;

use super::{CandidateSet, Stencil, WeightField};
use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::map::{same_dims, DepthMap, NormalMap};
use crate::scene::DEFAULT_KAPPA_MAX;

/// Everything a policy may look at when weighting iteration `t + 1`.
pub struct PolicyInput<'a> {
    pub intrinsics: &'a CameraIntrinsics,
    pub depth: &'a DepthMap,
    pub normals: &'a NormalMap,
    pub stencil: &'a Stencil,
    pub candidates: &'a CandidateSet,
    pub iteration: usize,
}

pub trait WeightPolicy: Sync {
    fn weights(&self, input: &PolicyInput<'_>) -> Result<WeightField>;
}

/// In-place softmax over `logits`; `-inf` entries get zero weight. If every
/// entry is `-inf` the distribution falls back to one-hot on `fallback`.
pub(crate) fn softmax_into(logits: &mut [f64], fallback: usize) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        logits.iter_mut().for_each(|l| *l = 0.0);
        logits[fallback] = 1.0;
        return;
    }
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    logits.iter_mut().for_each(|l| *l /= sum);
}

/// One-hot on the candidate closest to `gt`. Ties prefer the self candidate,
/// then the smallest stencil index.
pub fn oracle_weights(cands: &CandidateSet, gt: &DepthMap) -> Result<WeightField> {
    same_dims(cands.dims(), gt.dims())?;
    let k = cands.k();
    let self_index = cands.self_index();
    let mut weights = vec![0.0; gt.len() * k];
    weights.par_chunks_mut(k).enumerate().for_each(|(i, w)| {
        let target = gt.values()[i];
        let c = cands.pixel(i);
        let mut best = self_index;
        let mut best_err = (c[self_index] - target).abs();
        for (kk, cand) in c.iter().enumerate() {
            let err = (cand - target).abs();
            if err < best_err {
                best = kk;
                best_err = err;
            }
        }
        w[best] = 1.0;
    });
    Ok(WeightField::from_raw(cands.dims(), k, weights))
}

/// Softmax over normal similarity `n_iᵀn_j / temperature`, optionally plus
/// `ln(κ_j / κ_max)` so low-confidence sources are suppressed. Invalid
/// candidates are masked out.
pub fn similarity_weights(
    nmap: &NormalMap,
    stencil: &Stencil,
    cands: &CandidateSet,
    temperature: f64,
    kappa_gate: bool,
    kappa_max: f64,
) -> Result<WeightField> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig(format!("temperature must be positive, got {temperature}")));
    }
    same_dims(nmap.dims(), cands.dims())?;
    if cands.k() != stencil.len() {
        return Err(Error::LengthMismatch {
            expected: stencil.len(),
            found: cands.k(),
        });
    }
    let (w, h) = nmap.dims();
    let k = cands.k();
    let mut weights = vec![0.0; w * h * k];
    weights.par_chunks_mut(k).enumerate().for_each(|(i, logits)| {
        let (u, v) = ((i % w) as i64, (i / w) as i64);
        let ni = nmap.normals()[i];
        let valid = cands.pixel_valid(i);
        for (kk, &(du, dv)) in stencil.offsets().iter().enumerate() {
            logits[kk] = if valid[kk] {
                let j = (v + dv as i64) as usize * w + (u + du as i64) as usize;
                let mut logit = ni.dot(&nmap.normals()[j]) / temperature;
                if kappa_gate {
                    logit += (nmap.kappa()[j] / kappa_max).ln();
                }
                logit
            } else {
                f64::NEG_INFINITY
            };
        }
        softmax_into(logits, cands.self_index());
    });
    Ok(WeightField::from_raw((w, h), k, weights))
}

/// Upper-bound policy that knows the ground-truth depth.
pub struct OraclePolicy<'a> {
    pub gt: &'a DepthMap,
}

impl<'a> OraclePolicy<'a> {
    pub fn new(gt: &'a DepthMap) -> Self {
        Self { gt }
    }
}

impl WeightPolicy for OraclePolicy<'_> {
    fn weights(&self, input: &PolicyInput<'_>) -> Result<WeightField> {
        oracle_weights(input.candidates, self.gt)
    }
}

/// Normal-similarity weighting with optional confidence gating.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityPolicy {
    pub temperature: f64,
    pub kappa_gate: bool,
    pub kappa_max: f64,
}

impl Default for SimilarityPolicy {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            kappa_gate: true,
            kappa_max: DEFAULT_KAPPA_MAX,
        }
    }
}

impl WeightPolicy for SimilarityPolicy {
    fn weights(&self, input: &PolicyInput<'_>) -> Result<WeightField> {
        similarity_weights(
            input.normals,
            input.stencil,
            input.candidates,
            self.temperature,
            self.kappa_gate,
            self.kappa_max,
        )
    }
}

/// Equal weight on every valid candidate.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformPolicy;

impl WeightPolicy for UniformPolicy {
    fn weights(&self, input: &PolicyInput<'_>) -> Result<WeightField> {
        let cands = input.candidates;
        let k = cands.k();
        let mut weights = vec![0.0; cands.values().len()];
        weights
            .par_chunks_mut(k)
            .zip(cands.valid().par_chunks(k))
            .for_each(|(w, valid)| {
                let n = valid.iter().filter(|v| **v).count() as f64;
                for (w, ok) in w.iter_mut().zip(valid) {
                    *w = if *ok { 1.0 / n } else { 0.0 };
                }
            });
        Ok(WeightField::from_raw(cands.dims(), k, weights))
    }
}

/// Never updates: one-hot on the self candidate.
#[derive(Debug, Clone, Copy, Default)]
pub struct SelfPolicy;

impl WeightPolicy for SelfPolicy {
    fn weights(&self, input: &PolicyInput<'_>) -> Result<WeightField> {
        let c = input.candidates;
        Ok(WeightField::one_hot(c.dims(), c.k(), c.self_index()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::refine::candidates;
    use crate::scene::{presets, render};
    use approx::assert_relative_eq;

    #[test]
    fn softmax_handles_masks() {
        let mut l = [0.0, 1.0, f64::NEG_INFINITY];
        softmax_into(&mut l, 0);
        let e = std::f64::consts::E;
        assert_relative_eq!(l[0], 1.0 / (1.0 + e), epsilon = 1e-15);
        assert_relative_eq!(l[1], e / (1.0 + e), epsilon = 1e-15);
        assert_eq!(l[2], 0.0);
        let mut l = [f64::NEG_INFINITY; 3];
        softmax_into(&mut l, 1);
        assert_eq!(l, [0.0, 1.0, 0.0]);
    }

    #[test]
    fn oracle_prefers_self_on_exact_plane() {
        let spec = presets::slanted_plane(10, 10);
        let gt = render(&spec).unwrap();
        let stencil = Stencil::default();
        let c = candidates(&spec.intrinsics, &gt.depth, &gt.normals, &stencil).unwrap();
        let w = oracle_weights(&c, &gt.depth).unwrap();
        for i in 0..100 {
            assert_eq!(w.pixel(i)[stencil.self_index()], 1.0);
            assert_eq!(w.pixel(i).iter().filter(|x| **x == 1.0).count(), 1);
        }
    }

    #[test]
    fn oracle_picks_same_plane_neighbor() {
        let spec = presets::slanted_plane(9, 9);
        let gt = render(&spec).unwrap();
        let mut d = gt.depth.clone();
        d.set(4, 4, gt.depth.get(4, 4) * 1.3).unwrap();
        // Corrupt every neighbor except (6, 2), offset (+2, -2) = index 4.
        let mut noisy = d.clone();
        for v in 2..=6 {
            for u in 2..=6 {
                if (u, v) != (6, 2) && (u, v) != (4, 4) {
                    noisy.set(u, v, gt.depth.get(u, v) * (1.1 + 0.01 * (u + v) as f64)).unwrap();
                }
            }
        }
        let stencil = Stencil::default();
        let c = candidates(&spec.intrinsics, &noisy, &gt.normals, &stencil).unwrap();
        let w = oracle_weights(&c, &gt.depth).unwrap();
        let i = 4 * 9 + 4;
        assert_eq!(stencil.offsets()[4], (2, -2));
        assert_eq!(w.pixel(i)[4], 1.0);
    }

    #[test]
    fn similarity_uniform_on_constant_normals() {
        let spec = presets::fronto_plane(6, 5, 2.0);
        let gt = render(&spec).unwrap();
        let stencil = Stencil::default();
        let c = candidates(&spec.intrinsics, &gt.depth, &gt.normals, &stencil).unwrap();
        let w = similarity_weights(&gt.normals, &stencil, &c, 0.5, false, 100.0).unwrap();
        w.validate().unwrap();
        for i in 0..30 {
            let n = c.pixel_valid(i).iter().filter(|v| **v).count() as f64;
            for (wk, ok) in w.pixel(i).iter().zip(c.pixel_valid(i)) {
                if *ok {
                    assert_relative_eq!(*wk, 1.0 / n, epsilon = 1e-15);
                } else {
                    assert_eq!(*wk, 0.0);
                }
            }
        }
    }

    fn two_plane_row() -> (NormalMap, Stencil, CandidateSet) {
        // 1-row map: left half faces -z, right half faces -x.
        let a = Vec3::new(0.0, 0.0, -1.0);
        let b = Vec3::new(-1.0, 0.0, 0.0);
        let normals = vec![a, a, b, b];
        let nmap = NormalMap::with_uniform_kappa(4, 1, normals, 100.0).unwrap();
        let stencil = Stencil::new(1);
        let values = vec![1.0; 4 * 9];
        let valid = (0..4 * 9)
            .map(|idx| {
                let (i, kk) = (idx / 9, idx % 9);
                let (du, dv) = stencil.offsets()[kk];
                let x = i as i32 + du;
                dv == 0 && (0..4).contains(&x)
            })
            .collect();
        let c = CandidateSet::new((4, 1), 9, 4, values, valid).unwrap();
        (nmap, stencil, c)
    }

    #[test]
    fn similarity_cross_boundary_ratio() {
        let (nmap, stencil, c) = two_plane_row();
        let w = similarity_weights(&nmap, &stencil, &c, 0.1, false, 100.0).unwrap();
        // Pixel 1: left neighbor same plane (index 3), right neighbor across (index 5).
        let p = w.pixel(1);
        assert_relative_eq!(p[5] / p[3], (-10.0f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(p[5] / p[3], 4.54e-5, max_relative = 1e-3);
    }

    #[test]
    fn similarity_sharpens_to_most_similar() {
        let (nmap, stencil, c) = two_plane_row();
        let w = similarity_weights(&nmap, &stencil, &c, 1e-4, false, 100.0).unwrap();
        // Pixel 1 has two equally similar sources (itself and pixel 0).
        assert_relative_eq!(w.pixel(1)[3], 0.5, epsilon = 1e-12);
        assert_relative_eq!(w.pixel(1)[4], 0.5, epsilon = 1e-12);
        assert!(w.pixel(1)[5] < 1e-300);
        assert!(similarity_weights(&nmap, &stencil, &c, 0.0, false, 100.0).is_err());
    }

    #[test]
    fn kappa_gate_suppresses_zero_confidence() {
        let (nmap, stencil, c) = two_plane_row();
        let nmap = nmap.with_kappa(vec![100.0, 100.0, 0.0, 50.0]).unwrap();
        let w = similarity_weights(&nmap, &stencil, &c, 1.0, true, 100.0).unwrap();
        assert_eq!(w.pixel(1)[5], 0.0);
        // Pixel 2 has zero confidence itself and one live neighbor on each side.
        let p = w.pixel(2);
        assert_eq!(p[4], 0.0);
        assert!(p[3] > 0.0 && p[5] > 0.0);
        w.validate().unwrap();
        // All sources dead: fall back to keeping the current depth.
        let dead = nmap.with_kappa(vec![0.0; 4]).unwrap();
        let w = similarity_weights(&dead, &stencil, &c, 1.0, true, 100.0).unwrap();
        assert!((0..4).all(|i| w.pixel(i)[4] == 1.0));
    }
}
