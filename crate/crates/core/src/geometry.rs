//! Pinhole camera model and normal-guided depth propagation.
//!
//! Pixel coordinates are `(u, v) = (column, row)`, 0-based, with integer
//! coordinates addressing pixel centers. Rays are normalized to unit depth,
//! so the depth of a point along a ray is its camera-frame `z`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// `|nᵀ r(dst)|` below this marks a propagation as degenerate.
pub const DENOMINATOR_FLOOR: f64 = 1e-4;

/// Tolerance on `|n| - 1` accepted for surface normals.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Pinhole calibration: focal lengths and principal point in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawIntrinsics")]
pub struct CameraIntrinsics {
    pub alpha_u: f64,
    pub alpha_v: f64,
    pub u0: f64,
    pub v0: f64,
    pub width: usize,
    pub height: usize,
}

#[derive(Deserialize)]
struct RawIntrinsics {
    alpha_u: f64,
    alpha_v: f64,
    u0: f64,
    v0: f64,
    width: usize,
    height: usize,
}

impl TryFrom<RawIntrinsics> for CameraIntrinsics {
    type Error = Error;

    fn try_from(raw: RawIntrinsics) -> Result<Self> {
        CameraIntrinsics::new(raw.alpha_u, raw.alpha_v, raw.u0, raw.v0, raw.width, raw.height)
    }
}

impl CameraIntrinsics {
    pub fn new(
        alpha_u: f64,
        alpha_v: f64,
        u0: f64,
        v0: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(alpha_u > 0.0 && alpha_u.is_finite() && alpha_v > 0.0 && alpha_v.is_finite()) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive, got ({alpha_u}, {alpha_v})"
            )));
        }
        if !(u0.is_finite() && v0.is_finite()) {
            return Err(Error::InvalidIntrinsics("principal point must be finite".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidIntrinsics(format!(
                "image size must be at least 1x1, got {width}x{height}"
            )));
        }
        Ok(Self {
            alpha_u,
            alpha_v,
            u0,
            v0,
            width,
            height,
        })
    }

    /// Square-pixel camera with the principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Result<Self> {
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn ray(&self, u: f64, v: f64) -> Ray {
        ray(self, u, v)
    }
}

/// Direction through a pixel with unit depth (`z == 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub x: f64,
    pub y: f64,
}

impl Ray {
    pub const fn z(&self) -> f64 {
        1.0
    }

    pub fn to_vec(self) -> Vec3 {
        Vec3::new(self.x, self.y, 1.0)
    }
}

pub fn ray(intr: &CameraIntrinsics, u: f64, v: f64) -> Ray {
    Ray {
        x: (u - intr.u0) / intr.alpha_u,
        y: (v - intr.v0) / intr.alpha_v,
    }
}

/// Camera-frame point at depth `d` along the ray through `(u, v)`.
pub fn backproject(intr: &CameraIntrinsics, u: f64, v: f64, d: f64) -> Result<Vec3> {
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::NonPositiveDepth(d));
    }
    let r = ray(intr, u, v);
    Ok(Vec3::new(r.x * d, r.y * d, d))
}

#[inline]
fn dot_ray(n: &Vec3, r: Ray) -> f64 {
    n.x * r.x + n.y * r.y + n.z
}

pub(crate) fn check_unit(n: &Vec3) -> Result<()> {
    let norm = n.norm();
    if (norm - 1.0).abs() > UNIT_TOLERANCE || !norm.is_finite() {
        return Err(Error::NonUnitNormal(norm));
    }
    Ok(())
}

/// Ratio `nᵀr(src) / nᵀr(dst)` mapping a source depth onto the destination
/// ray along the source tangent plane. Returns `None` when degenerate.
#[inline]
pub(crate) fn propagation_ratio(src: Ray, normal: &Vec3, dst: Ray) -> Option<f64> {
    let den = dot_ray(normal, dst);
    if den.abs() < DENOMINATOR_FLOOR {
        return None;
    }
    let ratio = dot_ray(normal, src) / den;
    (ratio > 0.0 && ratio.is_finite()).then_some(ratio)
}

/// Depth at `dst` of the plane through the back-projection of `src` at depth
/// `d_src` with normal `n_src`.
///
/// Orientation-agnostic: flipping the normal leaves the result unchanged.
/// Fails with [`Error::DegeneratePropagation`] when the destination ray is
/// nearly parallel to the plane or the plane lies behind the camera along it.
pub fn propagate_depth(
    intr: &CameraIntrinsics,
    src: (f64, f64),
    n_src: &Vec3,
    d_src: f64,
    dst: (f64, f64),
) -> Result<f64> {
    check_unit(n_src)?;
    if !(d_src > 0.0 && d_src.is_finite()) {
        return Err(Error::NonPositiveDepth(d_src));
    }
    if src == dst {
        return Ok(d_src);
    }
    let ratio = propagation_ratio(ray(intr, src.0, src.1), n_src, ray(intr, dst.0, dst.1))
        .ok_or(Error::DegeneratePropagation)?;
    let d = ratio * d_src;
    if d > 0.0 && d.is_finite() {
        Ok(d)
    } else {
        Err(Error::DegeneratePropagation)
    }
}

/// Parameter `t` of the ray–plane intersection `t·r`, i.e. the depth when
/// `r` has unit `z`.
pub fn plane_ray_depth(plane_normal: &Vec3, plane_point: &Vec3, r: &Vec3) -> Result<f64> {
    let den = plane_normal.dot(r);
    if den.abs() < 1e-15 {
        return Err(Error::NoIntersection);
    }
    let t = plane_normal.dot(plane_point) / den;
    if t <= 0.0 {
        return Err(Error::BehindCamera(t));
    }
    Ok(t)
}

/// Full-resolution coordinate of the center of coarse cell `x` at stride `s`.
#[inline]
pub fn coarse_center(x: f64, stride: usize) -> f64 {
    let s = stride as f64;
    s * (x + 0.5) - 0.5
}

/// Intrinsics of the grid obtained by pooling `s x s` pixel blocks, such that
/// every coarse pixel center casts the same ray as the corresponding
/// full-resolution block center.
pub fn coarse_intrinsics(intr: &CameraIntrinsics, stride: usize) -> Result<CameraIntrinsics> {
    if stride == 0 {
        return Err(Error::InvalidConfig("stride must be at least 1".into()));
    }
    if intr.width % stride != 0 || intr.height % stride != 0 {
        return Err(Error::InvalidConfig(format!(
            "{}x{} image is not divisible by stride {stride}",
            intr.width, intr.height
        )));
    }
    if stride == 1 {
        return Ok(*intr);
    }
    let s = stride as f64;
    CameraIntrinsics::new(
        intr.alpha_u / s,
        intr.alpha_v / s,
        (intr.u0 + 0.5) / s - 0.5,
        (intr.v0 + 0.5) / s - 0.5,
        intr.width / stride,
        intr.height / stride,
    )
}

/// Flip `n` if needed so that it faces the camera along `r` (`nᵀr < 0`).
pub fn orient_toward_camera(n: Vec3, r: &Vec3) -> Vec3 {
    if n.dot(r) > 0.0 {
        -n
    } else {
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit() -> CameraIntrinsics {
        CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 4, 4).unwrap()
    }

    #[test]
    fn ray_examples() {
        let r = ray(&unit(), 0.0, 0.0);
        assert_eq!((r.x, r.y, r.z()), (0.0, 0.0, 1.0));
        let r = ray(&unit(), 1.0, 0.0);
        assert_eq!((r.x, r.y), (1.0, 0.0));
        let intr = CameraIntrinsics::new(100.0, 200.0, 50.0, 60.0, 200, 200).unwrap();
        let r = ray(&intr, 150.0, 60.0);
        assert_eq!((r.x, r.y, r.z()), (1.0, 0.0, 1.0));
    }

    #[test]
    fn backproject_examples() {
        assert_eq!(backproject(&unit(), 0.0, 0.0, 2.0).unwrap(), Vec3::new(0.0, 0.0, 2.0));
        assert_eq!(backproject(&unit(), 1.0, 0.0, 2.0).unwrap(), Vec3::new(2.0, 0.0, 2.0));
        let intr = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        assert_eq!(backproject(&intr, 75.0, 50.0, 4.0).unwrap(), Vec3::new(1.0, 0.0, 4.0));
        assert!(matches!(
            backproject(&unit(), 0.0, 0.0, 0.0),
            Err(Error::NonPositiveDepth(_))
        ));
        assert!(backproject(&unit(), 0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn propagate_examples() {
        let n = Vec3::new(0.3, -0.4, -0.866_025_403_784_438_6).normalize();
        assert_eq!(propagate_depth(&unit(), (1.0, 2.0), &n, 3.7, (1.0, 2.0)).unwrap(), 3.7);

        let front = Vec3::new(0.0, 0.0, -1.0);
        assert_eq!(propagate_depth(&unit(), (0.0, 0.0), &front, 2.0, (1.0, 0.0)).unwrap(), 2.0);

        let slanted = Vec3::new(-1.0, 0.0, -1.0) / 2f64.sqrt();
        let d = propagate_depth(&unit(), (0.0, 0.0), &slanted, 2.0, (1.0, 0.0)).unwrap();
        assert_relative_eq!(d, 1.0, max_relative = 1e-15);
    }

    #[test]
    fn propagate_rejects_bad_inputs() {
        let n = Vec3::new(0.0, 0.0, -2.0);
        assert!(matches!(
            propagate_depth(&unit(), (0.0, 0.0), &n, 1.0, (1.0, 0.0)),
            Err(Error::NonUnitNormal(_))
        ));
        let front = Vec3::new(0.0, 0.0, -1.0);
        assert!(propagate_depth(&unit(), (0.0, 0.0), &front, -1.0, (1.0, 0.0)).is_err());
    }

    #[test]
    fn propagate_degenerate_when_ray_in_plane() {
        // Plane x + z = 2 contains the direction (1, 0, -1); a ray (-1, 0, 1)
        // through pixel u = -1 is parallel to it.
        let slanted = Vec3::new(1.0, 0.0, 1.0) / 2f64.sqrt();
        assert!(matches!(
            propagate_depth(&unit(), (0.0, 0.0), &slanted, 2.0, (-1.0, 0.0)),
            Err(Error::DegeneratePropagation)
        ));
        // Beyond the horizon the intersection is behind the camera.
        assert!(matches!(
            propagate_depth(&unit(), (0.0, 0.0), &slanted, 2.0, (-3.0, 0.0)),
            Err(Error::DegeneratePropagation)
        ));
    }

    #[test]
    fn plane_ray_depth_examples() {
        let front = Vec3::new(0.0, 0.0, -1.0);
        let p = Vec3::new(0.0, 0.0, 2.0);
        assert_eq!(plane_ray_depth(&front, &p, &Vec3::new(0.0, 0.0, 1.0)).unwrap(), 2.0);
        let slanted = Vec3::new(-1.0, 0.0, -1.0) / 2f64.sqrt();
        let d = plane_ray_depth(&slanted, &p, &Vec3::new(1.0, 0.0, 1.0)).unwrap();
        assert_relative_eq!(d, 1.0, max_relative = 1e-15);
        assert!(matches!(
            plane_ray_depth(&front, &p, &Vec3::new(1.0, 0.0, 0.0)),
            Err(Error::NoIntersection)
        ));
        assert!(matches!(
            plane_ray_depth(&front, &Vec3::new(0.0, 0.0, -2.0), &Vec3::new(0.0, 0.0, 1.0)),
            Err(Error::BehindCamera(_))
        ));
    }

    #[test]
    fn coarse_intrinsics_identity_at_stride_one() {
        let intr = CameraIntrinsics::new(500.0, 400.0, 31.5, 20.0, 64, 48).unwrap();
        assert_eq!(coarse_intrinsics(&intr, 1).unwrap(), intr);
    }

    #[test]
    fn coarse_intrinsics_matches_block_centers() {
        let intr = CameraIntrinsics::new(800.0, 800.0, 400.0, 300.0, 800, 600).unwrap();
        let coarse = coarse_intrinsics(&intr, 8).unwrap();
        assert_eq!(coarse.dims(), (100, 75));
        let rc = coarse.ray(0.0, 0.0);
        let rf = intr.ray(3.5, 3.5);
        assert_relative_eq!(rc.x, rf.x, epsilon = 1e-15);
        assert_relative_eq!(rc.y, rf.y, epsilon = 1e-15);
        for x in 0..100 {
            let rc = coarse.ray(x as f64, 7.0);
            let rf = intr.ray(coarse_center(x as f64, 8), coarse_center(7.0, 8));
            assert_relative_eq!(rc.x, rf.x, epsilon = 1e-14);
            assert_relative_eq!(rc.y, rf.y, epsilon = 1e-14);
        }
    }

    #[test]
    fn coarse_centers_enumerated() {
        let intr = CameraIntrinsics::centered(4.0, 4, 4).unwrap();
        let coarse = coarse_intrinsics(&intr, 2).unwrap();
        assert_eq!(coarse.dims(), (2, 2));
        let centers: Vec<(f64, f64)> = (0..2)
            .flat_map(|y| (0..2).map(move |x| (coarse_center(x as f64, 2), coarse_center(y as f64, 2))))
            .collect();
        assert_eq!(centers, vec![(0.5, 0.5), (2.5, 0.5), (0.5, 2.5), (2.5, 2.5)]);
        for (i, &(u, v)) in centers.iter().enumerate() {
            let rc = coarse.ray((i % 2) as f64, (i / 2) as f64);
            let rf = intr.ray(u, v);
            assert_relative_eq!(rc.x, rf.x, epsilon = 1e-15);
            assert_relative_eq!(rc.y, rf.y, epsilon = 1e-15);
        }
    }

    #[test]
    fn coarse_intrinsics_rejects_indivisible() {
        let intr = CameraIntrinsics::centered(10.0, 10, 8).unwrap();
        assert!(matches!(coarse_intrinsics(&intr, 4), Err(Error::InvalidConfig(_))));
        assert!(coarse_intrinsics(&intr, 0).is_err());
    }

    #[test]
    fn intrinsics_validation_and_json() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 1, 1).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 0, 1).is_err());
        let json = r#"{"alpha_u":100,"alpha_v":200,"u0":50,"v0":60,"width":10,"height":20}"#;
        let intr: CameraIntrinsics = serde_json::from_str(json).unwrap();
        assert_eq!(intr.alpha_v, 200.0);
        let back: CameraIntrinsics =
            serde_json::from_str(&serde_json::to_string(&intr).unwrap()).unwrap();
        assert_eq!(back, intr);
        let bad = r#"{"alpha_u":-1,"alpha_v":200,"u0":50,"v0":60,"width":10,"height":20}"#;
        assert!(serde_json::from_str::<CameraIntrinsics>(bad).is_err());
    }
}
