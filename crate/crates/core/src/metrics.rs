//! Evaluation: depth error statistics, PCA normals from depth, angular error
//! statistics and planarity of labeled regions.
//!
//! Threshold comparisons (`δ_k`, angular percentages) are strict.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Vec3};
use crate::map::{same_dims, DepthMap, LabelMap, NormalMap};
use crate::refine::RefineTrace;

/// Window used for PCA normals unless stated otherwise.
pub const DEFAULT_PCA_WINDOW: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub rmse: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalMetrics {
    pub mean: f64,
    pub median: f64,
    pub rmse: f64,
    pub pct_11_25: f64,
    pub pct_22_5: f64,
    pub pct_30: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanarityMetrics {
    /// Mean over regions of the RMS point-to-fitted-plane distance (meters).
    pub eps_plan: f64,
    /// Mean over regions of the angle between fitted and true normal (degrees).
    pub eps_orie: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub depth: DepthMetrics,
    pub normal: NormalMetrics,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub planarity: Option<PlanarityMetrics>,
}

impl MetricsReport {
    pub fn csv_header() -> Vec<&'static str> {
        vec![
            "depth.abs_rel",
            "depth.rmse",
            "depth.log10",
            "depth.delta1",
            "depth.delta2",
            "depth.delta3",
            "normal.mean",
            "normal.median",
            "normal.rmse",
            "normal.pct_11_25",
            "normal.pct_22_5",
            "normal.pct_30",
            "planarity.eps_plan",
            "planarity.eps_orie",
        ]
    }

    pub fn csv_row(&self) -> Vec<String> {
        let d = &self.depth;
        let n = &self.normal;
        let mut row: Vec<String> = [
            d.abs_rel, d.rmse, d.log10, d.delta1, d.delta2, d.delta3, n.mean, n.median, n.rmse,
            n.pct_11_25, n.pct_22_5, n.pct_30,
        ]
        .iter()
        .map(|x| x.to_string())
        .collect();
        match &self.planarity {
            Some(p) => row.extend([p.eps_plan.to_string(), p.eps_orie.to_string()]),
            None => row.extend([String::new(), String::new()]),
        }
        row
    }
}

fn selected(mask: Option<&[bool]>, len: usize) -> Result<Vec<usize>> {
    let idx: Vec<usize> = match mask {
        Some(m) => {
            if m.len() != len {
                return Err(Error::LengthMismatch {
                    expected: len,
                    found: m.len(),
                });
            }
            (0..len).filter(|&i| m[i]).collect()
        }
        None => (0..len).collect(),
    };
    if idx.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(idx)
}

pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, mask: Option<&[bool]>) -> Result<DepthMetrics> {
    same_dims(gt.dims(), pred.dims())?;
    let idx = selected(mask, gt.len())?;
    let (p, g) = (pred.values(), gt.values());
    let n = idx.len() as f64;
    let (mut abs_rel, mut sq, mut log10) = (0.0, 0.0, 0.0);
    let mut within = [0usize; 3];
    for &i in &idx {
        let (p, g) = (p[i], g[i]);
        abs_rel += (p - g).abs() / g;
        sq += (p - g) * (p - g);
        log10 += (p.log10() - g.log10()).abs();
        let ratio = (p / g).max(g / p);
        for (k, count) in within.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *count += 1;
            }
        }
    }
    Ok(DepthMetrics {
        abs_rel: abs_rel / n,
        rmse: (sq / n).sqrt(),
        log10: log10 / n,
        delta1: within[0] as f64 / n,
        delta2: within[1] as f64 / n,
        delta3: within[2] as f64 / n,
    })
}

/// Angle in degrees between two vectors. `atan2` keeps small angles
/// accurate where `acos` of a rounded dot product would not.
pub fn angle_deg(a: &Vec3, b: &Vec3) -> f64 {
    a.cross(b).norm().atan2(a.dot(b)).to_degrees()
}

pub fn angular_errors(pred: &NormalMap, gt: &NormalMap) -> Result<Vec<f64>> {
    same_dims(gt.dims(), pred.dims())?;
    Ok(pred
        .normals()
        .iter()
        .zip(gt.normals())
        .map(|(p, g)| angle_deg(p, g))
        .collect())
}

pub fn normal_metrics(pred: &NormalMap, gt: &NormalMap, mask: Option<&[bool]>) -> Result<NormalMetrics> {
    let all = angular_errors(pred, gt)?;
    let idx = selected(mask, all.len())?;
    let mut errs: Vec<f64> = idx.iter().map(|&i| all[i]).collect();
    let n = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / n;
    let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let frac = |t: f64| errs.iter().filter(|e| **e < t).count() as f64 / n;
    let (pct_11_25, pct_22_5, pct_30) = (frac(11.25), frac(22.5), frac(30.0));
    errs.sort_by(f64::total_cmp);
    let m = errs.len();
    let median = if m % 2 == 1 {
        errs[m / 2]
    } else {
        0.5 * (errs[m / 2 - 1] + errs[m / 2])
    };
    Ok(NormalMetrics {
        mean,
        median,
        rmse,
        pct_11_25,
        pct_22_5,
        pct_30,
    })
}

/// Total-least-squares plane through a point set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFit {
    pub centroid: Vec3,
    /// Eigenvector of the smallest covariance eigenvalue.
    pub normal: Vec3,
    /// Covariance eigenvalues, ascending.
    pub eigenvalues: [f64; 3],
}

impl PlaneFit {
    /// `1 − λ_min / λ_mid` in `[0, 1]`; zero for rank-deficient sets where the
    /// plane is undetermined.
    pub fn planarity(&self) -> f64 {
        let [lo, mid, hi] = self.eigenvalues;
        if !(mid > 1e-12 * hi) || hi <= 0.0 {
            return 0.0;
        }
        (1.0 - lo / mid).clamp(0.0, 1.0)
    }
}

pub fn fit_plane(points: &[Vec3]) -> PlaneFit {
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let normal: Vec3 = eig.eigenvectors.column(order[0]).into_owned();
    let norm = normal.norm();
    PlaneFit {
        centroid,
        normal: if norm > 0.0 { normal / norm } else { Vec3::new(0.0, 0.0, -1.0) },
        eigenvalues: order.map(|i| eig.eigenvalues[i]),
    }
}

/// Per-pixel PCA normals over a `window x window` neighborhood (clipped at
/// the borders), oriented toward the camera. Confidence holds the PCA
/// planarity score.
pub fn normals_from_depth(intr: &CameraIntrinsics, depth: &DepthMap, window: usize) -> Result<NormalMap> {
    same_dims(intr.dims(), depth.dims())?;
    let (w, h) = depth.dims();
    if window < 3 || window % 2 == 0 || window > w || window > h {
        return Err(Error::InvalidWindow {
            window,
            width: w,
            height: h,
        });
    }
    let points: Vec<Vec3> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (u, v) = ((i % w) as f64, (i / w) as f64);
            intr.ray(u, v).to_vec() * depth.values()[i]
        })
        .collect();
    let half = window / 2;
    let fits: Vec<(Vec3, f64)> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (u, v) = (i % w, i / w);
            let mut local = Vec::with_capacity(window * window);
            for y in v.saturating_sub(half)..=(v + half).min(h - 1) {
                for x in u.saturating_sub(half)..=(u + half).min(w - 1) {
                    local.push(points[y * w + x]);
                }
            }
            let fit = fit_plane(&local);
            let r = intr.ray(u as f64, v as f64).to_vec();
            let n = if fit.normal.dot(&r) > 0.0 { -fit.normal } else { fit.normal };
            (n, fit.planarity())
        })
        .collect();
    let (normals, kappa) = fits.into_iter().unzip();
    NormalMap::new(w, h, normals, kappa)
}

/// Planarity of every labeled region in `regions` (all labels when `None`).
/// Regions with fewer than three pixels are skipped.
pub fn planarity_metrics(
    intr: &CameraIntrinsics,
    pred: &DepthMap,
    labels: &LabelMap,
    gt_normals: &NormalMap,
    regions: Option<&[u32]>,
) -> Result<PlanarityMetrics> {
    same_dims(intr.dims(), pred.dims())?;
    same_dims(pred.dims(), labels.dims())?;
    same_dims(pred.dims(), gt_normals.dims())?;
    let w = pred.width();
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.labels().iter().enumerate() {
        if regions.is_none_or(|r| r.contains(&l)) {
            groups.entry(l).or_default().push(i);
        }
    }
    let mut plan = Vec::new();
    let mut orie = Vec::new();
    for (label, idx) in &groups {
        if idx.len() < 3 {
            log::warn!("planarity: region {label} has {} pixels, skipped", idx.len());
            continue;
        }
        let points: Vec<Vec3> = idx
            .iter()
            .map(|&i| intr.ray((i % w) as f64, (i / w) as f64).to_vec() * pred.values()[i])
            .collect();
        let fit = fit_plane(&points);
        let rms = (points
            .iter()
            .map(|p| (p - fit.centroid).dot(&fit.normal).powi(2))
            .sum::<f64>()
            / points.len() as f64)
            .sqrt();
        let gt_sum = idx
            .iter()
            .fold(Vec3::zeros(), |acc, &i| acc + gt_normals.normals()[i]);
        let gt_n = if gt_sum.norm() > 0.0 { gt_sum.normalize() } else { gt_normals.normals()[idx[0]] };
        plan.push(rms);
        let fit_n = if fit.normal.dot(&gt_n) < 0.0 { -fit.normal } else { fit.normal };
        orie.push(angle_deg(&fit_n, &gt_n));
    }
    if plan.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n = plan.len() as f64;
    Ok(PlanarityMetrics {
        eps_plan: plan.iter().sum::<f64>() / n,
        eps_orie: orie.iter().sum::<f64>() / n,
    })
}

/// Depth metrics plus metrics of PCA normals against `gt_normals`.
pub fn evaluate(
    intr: &CameraIntrinsics,
    pred: &DepthMap,
    gt: &DepthMap,
    gt_normals: &NormalMap,
    window: usize,
    mask: Option<&[bool]>,
) -> Result<MetricsReport> {
    let depth = depth_metrics(pred, gt, mask)?;
    let pred_normals = normals_from_depth(intr, pred, window)?;
    let normal = normal_metrics(&pred_normals, gt_normals, mask)?;
    Ok(MetricsReport {
        depth,
        normal,
        planarity: None,
    })
}

/// One row of a refinement trace summary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub rmse: f64,
    pub abs_rel: f64,
    pub mean_normal_error_deg: f64,
}

pub fn summarize_trace(
    intr: &CameraIntrinsics,
    trace: &RefineTrace,
    gt: &DepthMap,
    gt_normals: Option<&NormalMap>,
    window: usize,
) -> Result<Vec<TraceRow>> {
    trace
        .snapshots
        .iter()
        .enumerate()
        .map(|(iteration, snap)| {
            let d = depth_metrics(snap, gt, None)?;
            let mean_normal_error_deg = match gt_normals {
                Some(gn) => normal_metrics(&normals_from_depth(intr, snap, window)?, gn, None)?.mean,
                None => f64::NAN,
            };
            Ok(TraceRow {
                iteration,
                rmse: d.rmse,
                abs_rel: d.abs_rel,
                mean_normal_error_deg,
            })
        })
        .collect()
}
