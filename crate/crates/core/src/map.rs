//! Dense row-major image grids: depth, surface normals with confidence, and
//! integer surface labels.

use crate::error::{Error, Result};
use crate::geometry::{check_unit, Vec3};

fn check_len(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidConfig(format!("empty {width}x{height} map")));
    }
    if width * height != len {
        return Err(Error::LengthMismatch {
            expected: width * height,
            found: len,
        });
    }
    Ok(())
}

pub(crate) fn same_dims(expected: (usize, usize), found: (usize, usize)) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

/// Metric depth per pixel; every value is positive and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        check_len(width, height, values.len())?;
        if let Some(&bad) = values.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
            return Err(Error::NonPositiveDepth(bad));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, depth: f64) -> Result<Self> {
        Self::new(width, height, vec![depth; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let values = (0..height)
            .flat_map(|v| (0..width).map(move |u| (u, v)))
            .map(|(u, v)| f(u, v))
            .collect();
        Self::new(width, height, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.values[v * self.width + u]
    }

    /// Overwrite a value. Fails for nonpositive or non-finite depths.
    pub fn set(&mut self, u: usize, v: usize, d: f64) -> Result<()> {
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::NonPositiveDepth(d));
        }
        self.values[v * self.width + u] = d;
        Ok(())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Unit surface normals plus a nonnegative confidence `κ` per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    width: usize,
    height: usize,
    normals: Vec<Vec3>,
    kappa: Vec<f64>,
}

impl NormalMap {
    pub fn new(width: usize, height: usize, normals: Vec<Vec3>, kappa: Vec<f64>) -> Result<Self> {
        check_len(width, height, normals.len())?;
        check_len(width, height, kappa.len())?;
        for n in &normals {
            check_unit(n)?;
        }
        if let Some(&bad) = kappa.iter().find(|k| !(**k >= 0.0) || k.is_nan()) {
            return Err(Error::InvalidConfig(format!("confidence must be nonnegative, got {bad}")));
        }
        Ok(Self {
            width,
            height,
            normals,
            kappa,
        })
    }

    /// Normals with a constant confidence.
    pub fn with_uniform_kappa(width: usize, height: usize, normals: Vec<Vec3>, kappa: f64) -> Result<Self> {
        Self::new(width, height, normals, vec![kappa; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn normal(&self, u: usize, v: usize) -> Vec3 {
        self.normals[v * self.width + u]
    }

    pub fn kappa_at(&self, u: usize, v: usize) -> f64 {
        self.kappa[v * self.width + u]
    }

    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }

    pub fn kappa(&self) -> &[f64] {
        &self.kappa
    }

    pub fn with_kappa(mut self, kappa: Vec<f64>) -> Result<Self> {
        check_len(self.width, self.height, kappa.len())?;
        self.kappa = kappa;
        Self::new(self.width, self.height, self.normals, self.kappa)
    }
}

/// Per-pixel integer label (the id of the primitive seen by each pixel).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        check_len(width, height, labels.len())?;
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn get(&self, u: usize, v: usize) -> u32 {
        self.labels[v * self.width + u]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }
}
