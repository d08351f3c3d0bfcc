//! Image, mask and deformation-field containers plus the warping operator.
//!
//! Displacements follow the pull-back convention: a field `phi` warps an
//! image `I` into `I(phi)` with `I(phi)(v) = I(v + phi(v))`. Sample positions
//! outside the image are clamped to the border.
//!
//! Two warping paths exist: [`warp`] / [`warp_mask`] operate on plain arrays
//! (data generation, evaluation), while [`warp_tensor`] is the differentiable
//! version used during training. Both use the same bilinear stencil so they
//! agree to floating-point rounding.

use std::collections::BTreeSet;

use candle_core::{DType, Device, IndexOp, Tensor};
use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Intensity convention of an [`ImageGrid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueRange {
    /// Min-max normalized to `[-1, 1]`.
    Normalized,
    /// Raw 8-bit intensity convention, `[0, 255]`.
    Intensity8,
}

impl ValueRange {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            ValueRange::Normalized => (-1.0, 1.0),
            ValueRange::Intensity8 => (0.0, 255.0),
        }
    }
}

/// A dense single-channel 2D image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    data: Array2<f64>,
    range: ValueRange,
    modality: String,
}

impl ImageGrid {
    /// Builds an image, checking finiteness and the declared value range.
    pub fn new(data: Array2<f64>, range: ValueRange, modality: impl Into<String>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("image must be non-empty".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image data".into()));
        }
        let (lo, hi) = range.bounds();
        // Tolerate rounding from float32 round trips.
        let slack = 1e-6 * (hi - lo);
        if let Some(v) = data.iter().find(|&&v| v < lo - slack || v > hi + slack) {
            return Err(Error::InvalidArgument(format!(
                "image value {v} outside {range:?} range [{lo}, {hi}]"
            )));
        }
        let data = data.mapv(|v| v.clamp(lo, hi));
        Ok(Self {
            data,
            range,
            modality: modality.into(),
        })
    }

    pub fn normalized(data: Array2<f64>, modality: impl Into<String>) -> Result<Self> {
        Self::new(data, ValueRange::Normalized, modality)
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn modality(&self) -> &str {
        &self.modality
    }

    pub fn with_modality(mut self, modality: impl Into<String>) -> Self {
        self.modality = modality.into();
        self
    }

    /// `(1, 1, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        array2_to_tensor(self.data.view(), dtype, device)
    }

    /// Reads a `(1, 1, H, W)` tensor back into a normalized image. Values are
    /// clamped into `[-1, 1]` to absorb float32 overshoot.
    pub fn from_tensor(t: &Tensor, modality: impl Into<String>) -> Result<Self> {
        let data = tensor_to_array2(t)?.mapv(|v| v.clamp(-1.0, 1.0));
        Self::normalized(data, modality)
    }
}

/// Dense displacement field, shape `(2, H, W)`; component 0 is the row
/// displacement and component 1 the column displacement, both in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    displacements: Array3<f64>,
}

impl DeformationField {
    pub fn new(displacements: Array3<f64>) -> Result<Self> {
        let (c, h, w) = displacements.dim();
        if c != 2 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch(format!(
                "deformation field must be 2xHxW, got {c}x{h}x{w}"
            )));
        }
        if displacements.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("deformation field".into()));
        }
        Ok(Self { displacements })
    }

    /// The all-zero field.
    pub fn identity(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "field dimensions must be positive, got {height}x{width}"
            )));
        }
        Ok(Self {
            displacements: Array3::zeros((2, height, width)),
        })
    }

    /// A spatially constant field.
    pub fn constant(height: usize, width: usize, d_row: f64, d_col: f64) -> Result<Self> {
        let mut f = Self::identity(height, width)?;
        f.displacements.index_axis_mut(Axis(0), 0).fill(d_row);
        f.displacements.index_axis_mut(Axis(0), 1).fill(d_col);
        Self::new(f.displacements)
    }

    pub fn height(&self) -> usize {
        self.displacements.dim().1
    }

    pub fn width(&self) -> usize {
        self.displacements.dim().2
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn displacements(&self) -> &Array3<f64> {
        &self.displacements
    }

    pub fn into_displacements(self) -> Array3<f64> {
        self.displacements
    }

    pub fn row_component(&self) -> ArrayView2<'_, f64> {
        self.displacements.index_axis(Axis(0), 0)
    }

    pub fn col_component(&self) -> ArrayView2<'_, f64> {
        self.displacements.index_axis(Axis(0), 1)
    }

    /// Mean Euclidean displacement length over all pixels.
    pub fn mean_magnitude(&self) -> f64 {
        let r = self.row_component();
        let c = self.col_component();
        let total: f64 = r.iter().zip(c.iter()).map(|(a, b)| a.hypot(*b)).sum();
        total / r.len() as f64
    }

    /// Largest absolute value of any single component.
    pub fn max_abs_component(&self) -> f64 {
        self.displacements.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `(1, 2, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let (c, h, w) = self.displacements.dim();
        let v: Vec<f64> = self.displacements.iter().copied().collect();
        Ok(Tensor::from_vec(v, (1, c, h, w), device)?.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = t.to_dtype(DType::F64)?;
        let (b, c, h, w) = t.dims4()?;
        if b != 1 || c != 2 {
            return Err(Error::ShapeMismatch(format!(
                "expected field tensor (1, 2, H, W), got {:?}",
                t.dims()
            )));
        }
        let v = t.flatten_all()?.to_vec1::<f64>()?;
        let arr = Array3::from_shape_vec((2, h, w), v)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Self::new(arr)
    }
}

/// Integer label map; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    labels: Array2<u16>,
}

impl MaskGrid {
    pub fn new(labels: Array2<u16>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("mask must be non-empty".into()));
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &Array2<u16> {
        &self.labels
    }

    pub fn shape(&self) -> (usize, usize) {
        self.labels.dim()
    }

    /// Distinct labels present, including background.
    pub fn label_set(&self) -> BTreeSet<u16> {
        self.labels.iter().copied().collect()
    }

    /// Distinct non-background labels.
    pub fn foreground_labels(&self) -> BTreeSet<u16> {
        self.labels.iter().copied().filter(|&l| l != 0).collect()
    }

    pub fn count(&self, label: u16) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interpolation {
    Bilinear,
    Nearest,
}

/// Lower corner index and fractional weight of a clamped sample coordinate.
///
/// The lower index is capped at `n - 2` so that the upper neighbour is always
/// in range; a coordinate sitting exactly on the last pixel then resolves to
/// weight 1 on that pixel.
#[inline]
fn stencil(pos: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let p = pos.clamp(0.0, (n - 1) as f64);
    let i0 = (p.floor() as usize).min(n - 2);
    (i0, i0 + 1, p - i0 as f64)
}

fn check_field_shape(shape: (usize, usize), field: &DeformationField) -> Result<()> {
    if shape != field.shape() {
        return Err(Error::ShapeMismatch(format!(
            "image is {}x{} but field is {}x{}",
            shape.0,
            shape.1,
            field.height(),
            field.width()
        )));
    }
    Ok(())
}

/// Warps a raw array with the given field.
pub fn warp_array(
    image: ArrayView2<'_, f64>,
    field: &DeformationField,
    interpolation: Interpolation,
) -> Result<Array2<f64>> {
    let (h, w) = image.dim();
    check_field_shape((h, w), field)?;
    let dr = field.row_component();
    let dc = field.col_component();
    let out = Array2::from_shape_fn((h, w), |(r, c)| {
        let sr = r as f64 + dr[[r, c]];
        let sc = c as f64 + dc[[r, c]];
        match interpolation {
            Interpolation::Bilinear => {
                let (r0, r1, wr) = stencil(sr, h);
                let (c0, c1, wc) = stencil(sc, w);
                (1.0 - wr) * (1.0 - wc) * image[[r0, c0]]
                    + (1.0 - wr) * wc * image[[r0, c1]]
                    + wr * (1.0 - wc) * image[[r1, c0]]
                    + wr * wc * image[[r1, c1]]
            }
            Interpolation::Nearest => {
                let (rr, cc) = nearest_index(sr, sc, h, w);
                image[[rr, cc]]
            }
        }
    });
    Ok(out)
}

#[inline]
fn nearest_index(sr: f64, sc: f64, h: usize, w: usize) -> (usize, usize) {
    let rr = sr.clamp(0.0, (h - 1) as f64).round() as usize;
    let cc = sc.clamp(0.0, (w - 1) as f64).round() as usize;
    (rr, cc)
}

/// Warps an image, producing `image(phi)`.
pub fn warp(
    image: &ImageGrid,
    field: &DeformationField,
    interpolation: Interpolation,
) -> Result<ImageGrid> {
    let data = warp_array(image.data.view(), field, interpolation)?;
    ImageGrid::new(data, image.range, image.modality.clone())
}

/// Nearest-neighbour warp of a label map.
pub fn warp_mask(mask: &MaskGrid, field: &DeformationField) -> Result<MaskGrid> {
    let (h, w) = mask.shape();
    check_field_shape((h, w), field)?;
    let dr = field.row_component();
    let dc = field.col_component();
    let labels = Array2::from_shape_fn((h, w), |(r, c)| {
        let (rr, cc) = nearest_index(r as f64 + dr[[r, c]], c as f64 + dc[[r, c]], h, w);
        mask.labels[[rr, cc]]
    });
    MaskGrid::new(labels)
}

/// Differentiable bilinear warp.
///
/// `image` is `(B, C, H, W)` and `field` is `(B, 2, H, W)`. Gradients flow to
/// both the image values and the field; the integer stencil indices are
/// treated as constants.
pub fn warp_tensor(image: &Tensor, field: &Tensor) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = image.dims4()?;
    let (fb, fc, fh, fw) = field.dims4()?;
    if (fb, fc, fh, fw) != (b, 2, h, w) {
        candle_core::bail!(
            "warp_tensor: image {:?} incompatible with field {:?}",
            image.dims(),
            field.dims()
        );
    }
    let device = image.device();
    let dtype = image.dtype();
    let rows = Tensor::arange(0u32, h as u32, device)?
        .to_dtype(dtype)?
        .reshape((1, h, 1))?
        .broadcast_as((b, h, w))?;
    let cols = Tensor::arange(0u32, w as u32, device)?
        .to_dtype(dtype)?
        .reshape((1, 1, w))?
        .broadcast_as((b, h, w))?;

    let sr = (field.i((.., 0))? + rows)?.clamp(0f64, (h - 1) as f64)?;
    let sc = (field.i((.., 1))? + cols)?.clamp(0f64, (w - 1) as f64)?;
    let r0 = sr.detach().floor()?.clamp(0f64, h.saturating_sub(2) as f64)?;
    let c0 = sc.detach().floor()?.clamp(0f64, w.saturating_sub(2) as f64)?;
    let r1 = (&r0 + 1.0)?.clamp(0f64, (h - 1) as f64)?;
    let c1 = (&c0 + 1.0)?.clamp(0f64, (w - 1) as f64)?;
    let wr = (&sr - &r0)?.unsqueeze(1)?;
    let wc = (&sc - &c0)?.unsqueeze(1)?;

    let flat = image.reshape((b, c, h * w))?;
    let gather = |ri: &Tensor, ci: &Tensor| -> candle_core::Result<Tensor> {
        let idx = ((ri * w as f64)? + ci)?
            .to_dtype(DType::U32)?
            .reshape((b, 1, h * w))?
            .broadcast_as((b, c, h * w))?
            .contiguous()?;
        flat.gather(&idx, 2)?.reshape((b, c, h, w))
    };
    let v00 = gather(&r0, &c0)?;
    let v01 = gather(&r0, &c1)?;
    let v10 = gather(&r1, &c0)?;
    let v11 = gather(&r1, &c1)?;

    let one_r = wr.affine(-1.0, 1.0)?;
    let one_c = wc.affine(-1.0, 1.0)?;
    let top = (v00.broadcast_mul(&one_c)? + v01.broadcast_mul(&wc)?)?;
    let bottom = (v10.broadcast_mul(&one_c)? + v11.broadcast_mul(&wc)?)?;
    top.broadcast_mul(&one_r)? + bottom.broadcast_mul(&wr)?
}

/// Folding diagnostics for a deformation field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JacobianStats {
    /// Fraction of pixels where the Jacobian determinant is `<= 0`.
    pub fraction_nonpositive: f64,
    pub min_det: f64,
}

/// Derivative along one axis: central differences inside, one-sided at the
/// borders, zero for a length-1 axis.
fn axis_derivative(a: ArrayView2<'_, f64>, axis: usize) -> Array2<f64> {
    let (h, w) = a.dim();
    let n = if axis == 0 { h } else { w };
    Array2::from_shape_fn((h, w), |(r, c)| {
        if n == 1 {
            return 0.0;
        }
        let i = if axis == 0 { r } else { c };
        let at = |k: usize| if axis == 0 { a[[k, c]] } else { a[[r, k]] };
        if i == 0 {
            at(1) - at(0)
        } else if i == n - 1 {
            at(n - 1) - at(n - 2)
        } else {
            0.5 * (at(i + 1) - at(i - 1))
        }
    })
}

/// Per-pixel determinant of the Jacobian of `v -> v + phi(v)`.
pub fn jacobian_determinants(field: &DeformationField) -> Array2<f64> {
    let dr = field.row_component();
    let dc = field.col_component();
    let drr = axis_derivative(dr, 0);
    let drc = axis_derivative(dr, 1);
    let dcr = axis_derivative(dc, 0);
    let dcc = axis_derivative(dc, 1);
    let mut det = Array2::zeros(dr.dim());
    ndarray::Zip::from(&mut det)
        .and(&drr)
        .and(&drc)
        .and(&dcr)
        .and(&dcc)
        .for_each(|d, &a, &b, &c, &e| *d = (1.0 + a) * (1.0 + e) - b * c);
    det
}

pub fn jacobian_stats(field: &DeformationField) -> JacobianStats {
    let det = jacobian_determinants(field);
    let nonpos = det.iter().filter(|&&d| d <= 0.0).count();
    let min_det = det.iter().copied().fold(f64::INFINITY, f64::min);
    JacobianStats {
        fraction_nonpositive: nonpos as f64 / det.len() as f64,
        min_det,
    }
}

pub(crate) fn array2_to_tensor(
    a: ArrayView2<'_, f64>,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let (h, w) = a.dim();
    let v: Vec<f64> = a.iter().copied().collect();
    Ok(Tensor::from_vec(v, (1, 1, h, w), device)?.to_dtype(dtype)?)
}

pub(crate) fn tensor_to_array2(t: &Tensor) -> Result<Array2<f64>> {
    let dims = t.dims();
    let (h, w) = match dims {
        [1, 1, h, w] | [1, h, w] | [h, w] => (*h, *w),
        _ => {
            return Err(Error::ShapeMismatch(format!(
                "expected a single-channel image tensor, got {dims:?}"
            )))
        }
    };
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Array2::from_shape_vec((h, w), v).map_err(|e| Error::ShapeMismatch(e.to_string()))
}
