//! Volumes, masks, probabilistic predictions and plane extraction.

mod format;
mod phantom;

pub use format::{
    decode_mask, decode_volume, encode_mask, encode_prediction, encode_volume, load_mask,
    load_prediction, load_volume, read_pvol, save_mask, save_prediction, save_volume, write_pvol,
    Dtype, Payload, PvolHeader, MAGIC,
};
pub use phantom::{fade_band, make_phantom, FadeBand, LesionKind, PhantomConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Shape4, Tensor};

/// Spatial extent `(D, H, W)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims3 {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims3 {
    pub const fn new(d: usize, h: usize, w: usize) -> Self {
        Self { d, h, w }
    }

    pub fn len(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.h + y) * self.w + x
    }

    pub fn extent(&self, axis: Axis) -> usize {
        match axis {
            Axis::Axial => self.d,
            Axis::Coronal => self.h,
            Axis::Sagittal => self.w,
        }
    }
}

/// Physical voxel size in millimetres, `(z, y, x)`.
pub type Spacing = [f64; 3];

fn check_spacing(spacing: Spacing) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "spacing components must be positive, got {spacing:?}"
        )))
    }
}

/// Multi-channel image volume `(C, D, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub shape: Shape4,
    pub data: Vec<f32>,
    pub spacing: Spacing,
    pub modality_tags: Vec<String>,
}

impl Volume {
    pub fn new(shape: Shape4, data: Vec<f32>, spacing: Spacing, modality_tags: Vec<String>) -> Result<Self> {
        let v = Self {
            shape,
            data,
            spacing,
            modality_tags,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.shape.c) {
            return Err(Error::Validation(format!(
                "volume must have 1 or 2 channels, got {}",
                self.shape.c
            )));
        }
        if self.shape.d == 0 || self.shape.h == 0 || self.shape.w == 0 {
            return Err(Error::Validation(format!("empty volume {}", self.shape)));
        }
        if self.data.len() != self.shape.len() {
            return Err(Error::Validation(format!(
                "{} values for shape {}",
                self.data.len(),
                self.shape
            )));
        }
        check_spacing(self.spacing)?;
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("volume contains NaN or Inf".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims3 {
        Dims3::new(self.shape.d, self.shape.h, self.shape.w)
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.shape.spatial();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor {
            shape: self.shape,
            data: self.data.clone(),
        }
    }
}

/// Binary label volume.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume {
    pub dims: Dims3,
    pub data: Vec<bool>,
    pub spacing: Spacing,
}

impl MaskVolume {
    pub fn new(dims: Dims3, data: Vec<bool>, spacing: Spacing) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Validation(format!(
                "{} mask values for dims {dims:?}",
                data.len()
            )));
        }
        check_spacing(spacing)?;
        Ok(Self { dims, data, spacing })
    }

    pub fn empty(dims: Dims3, spacing: Spacing) -> Self {
        Self {
            dims,
            data: vec![false; dims.len()],
            spacing,
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn axial(&self, z: usize) -> &[bool] {
        let p = self.dims.plane();
        &self.data[z * p..(z + 1) * p]
    }

    pub fn axial_mut(&mut self, z: usize) -> &mut [bool] {
        let p = self.dims.plane();
        &mut self.data[z * p..(z + 1) * p]
    }

    /// Keep only the listed axial slices, clearing all others.
    pub fn restrict(&self, slices: &[usize]) -> Self {
        let mut out = Self::empty(self.dims, self.spacing);
        for &z in slices {
            out.axial_mut(z).copy_from_slice(self.axial(z));
        }
        out
    }
}

/// Foreground probability volume.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionVolume {
    pub dims: Dims3,
    pub prob: Vec<f32>,
    pub threshold: f32,
}

impl PredictionVolume {
    pub const DEFAULT_THRESHOLD: f32 = 0.5;

    pub fn new(dims: Dims3, prob: Vec<f32>) -> Result<Self> {
        if prob.len() != dims.len() {
            return Err(Error::Validation(format!(
                "{} probabilities for dims {dims:?}",
                prob.len()
            )));
        }
        if prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Validation("probabilities outside [0, 1]".into()));
        }
        Ok(Self {
            dims,
            prob,
            threshold: Self::DEFAULT_THRESHOLD,
        })
    }

    pub fn axial(&self, z: usize) -> &[f32] {
        let p = self.dims.plane();
        &self.prob[z * p..(z + 1) * p]
    }

    pub fn axial_mut(&mut self, z: usize) -> &mut [f32] {
        let p = self.dims.plane();
        &mut self.prob[z * p..(z + 1) * p]
    }

    pub fn binarize(&self, spacing: Spacing) -> MaskVolume {
        MaskVolume {
            dims: self.dims,
            data: self.prob.iter().map(|p| *p >= self.threshold).collect(),
            spacing,
        }
    }
}

/// Viewing plane. Axial fixes z, coronal fixes y, sagittal fixes x.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Axial,
    Coronal,
    Sagittal,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(Self::Axial),
            "coronal" => Ok(Self::Coronal),
            "sagittal" => Ok(Self::Sagittal),
            other => Err(Error::Config(format!("unknown axis {other:?}"))),
        }
    }
}

/// Row-major 2D plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

fn plane_geometry(dims: Dims3, axis: Axis, index: usize) -> Result<(usize, usize)> {
    let extent = dims.extent(axis);
    if index >= extent {
        return Err(Error::OutOfRange { index, extent });
    }
    Ok(match axis {
        Axis::Axial => (dims.h, dims.w),
        Axis::Coronal => (dims.d, dims.w),
        Axis::Sagittal => (dims.d, dims.h),
    })
}

fn plane_voxel(dims: Dims3, axis: Axis, index: usize, r: usize, c: usize) -> usize {
    match axis {
        Axis::Axial => dims.index(index, r, c),
        Axis::Coronal => dims.index(r, index, c),
        Axis::Sagittal => dims.index(r, c, index),
    }
}

/// Extract one plane of a `(D, H, W)` grid.
pub fn slice_extract<T: Copy>(data: &[T], dims: Dims3, axis: Axis, index: usize) -> Result<Plane<T>> {
    let (rows, cols) = plane_geometry(dims, axis, index)?;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(data[plane_voxel(dims, axis, index, r, c)]);
        }
    }
    Ok(Plane { rows, cols, data: out })
}

/// Write `plane` back into a `(D, H, W)` grid; inverse of [`slice_extract`].
pub fn slice_insert<T: Copy>(data: &mut [T], dims: Dims3, axis: Axis, index: usize, plane: &Plane<T>) -> Result<()> {
    let (rows, cols) = plane_geometry(dims, axis, index)?;
    if (plane.rows, plane.cols) != (rows, cols) || plane.data.len() != rows * cols {
        return Err(Error::Shape(format!(
            "plane {}x{} does not fit {rows}x{cols}",
            plane.rows, plane.cols
        )));
    }
    for r in 0..rows {
        for c in 0..cols {
            data[plane_voxel(dims, axis, index, r, c)] = plane.data[r * cols + c];
        }
    }
    Ok(())
}
