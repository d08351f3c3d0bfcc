//! Dataset ingestion, slice preprocessing, synthetic-modality simulation and
//! a self-contained shapes dataset with known ground-truth deformations.
//!
//! On-disk layout (version 1):
//!
//! ```text
//! root/{train,val,test}/pair_0000/
//!     source.png  target.png            16-bit grayscale, [-1, 1] mapped to [0, 65535]
//!     source_mask.png  target_mask.png  16-bit label maps (optional)
//!     meta.json                         modality_source, modality_target, spacing_mm, layout_version
//!     gt_field.npy                      float64 (2, H, W) displacements (synthetic data only)
//! ```

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grids::{jacobian_stats, warp_array, warp_mask, DeformationField, ImageGrid, Interpolation, MaskGrid, ValueRange};

pub const LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-pair sidecar metadata (`meta.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub modality_source: String,
    pub modality_target: String,
    /// Pixel spacing in millimetres (row, column).
    pub spacing_mm: [f64; 2],
    pub layout_version: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub name: String,
    pub source: ImageGrid,
    pub target: ImageGrid,
    pub source_mask: Option<MaskGrid>,
    pub target_mask: Option<MaskGrid>,
    /// Field that maps the source onto the target, when known.
    pub gt_field: Option<DeformationField>,
    pub meta: PairMeta,
}

impl PairRecord {
    fn validate(&self) -> Result<()> {
        let shape = self.source.shape();
        let bad = |what: &str, s: (usize, usize)| {
            Error::ShapeMismatch(format!(
                "pair {}: {what} is {}x{} but source is {}x{}",
                self.name, s.0, s.1, shape.0, shape.1
            ))
        };
        if self.target.shape() != shape {
            return Err(bad("target", self.target.shape()));
        }
        for (what, m) in [("source mask", &self.source_mask), ("target mask", &self.target_mask)] {
            if let Some(m) = m {
                if m.shape() != shape {
                    return Err(bad(what, m.shape()));
                }
            }
        }
        if let Some(f) = &self.gt_field {
            if f.shape() != shape {
                return Err(bad("ground-truth field", f.shape()));
            }
        }
        Ok(())
    }

    /// The same pair registered in the opposite direction. The ground-truth
    /// field is dropped because its inverse is not stored.
    pub fn reversed(&self) -> Self {
        Self {
            name: self.name.clone(),
            source: self.target.clone(),
            target: self.source.clone(),
            source_mask: self.target_mask.clone(),
            target_mask: self.source_mask.clone(),
            gt_field: None,
            meta: PairMeta {
                modality_source: self.meta.modality_target.clone(),
                modality_target: self.meta.modality_source.clone(),
                ..self.meta.clone()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub split: Split,
    pub records: Vec<PairRecord>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `"<source modality>->Target modality>"` of the first record.
    pub fn direction(&self) -> String {
        self.records
            .first()
            .map(|r| format!("{}->{}", r.meta.modality_source, r.meta.modality_target))
            .unwrap_or_default()
    }

    pub fn reversed(&self) -> Self {
        Self {
            split: self.split,
            records: self.records.iter().map(PairRecord::reversed).collect(),
        }
    }

    /// SHA-256 over names, pixel data and masks, in record order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.records {
            h.update(r.name.as_bytes());
            for img in [&r.source, &r.target] {
                for v in img.data().iter() {
                    h.update(v.to_le_bytes());
                }
            }
            for m in [&r.source_mask, &r.target_mask].into_iter().flatten() {
                for v in m.labels().iter() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: PairedDataset,
    pub val: PairedDataset,
    pub test: PairedDataset,
}

impl DatasetSplits {
    pub fn get(&self, split: Split) -> &PairedDataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn reversed(&self) -> Self {
        Self {
            train: self.train.reversed(),
            val: self.val.reversed(),
            test: self.test.reversed(),
        }
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for s in Split::ALL {
            h.update(self.get(s).checksum().as_bytes());
        }
        hex(&h.finalize())
    }
}

/// Random smooth deformation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticDeformConfig {
    /// Distance between control points, in pixels.
    pub control_grid_spacing: f64,
    /// Control-point displacements are drawn from `U(-max, max)` per axis.
    pub max_displacement: f64,
    /// Gaussian smoothing of the upsampled field, in pixels.
    pub smoothing_sigma: f64,
    pub seed: u64,
}

impl Default for ElasticDeformConfig {
    fn default() -> Self {
        Self::for_size(256)
    }
}

impl ElasticDeformConfig {
    /// Defaults for a square image of side `size`: 16 px spacing, 6 px
    /// amplitude and 2 px smoothing at 256, scaled proportionally.
    pub fn for_size(size: usize) -> Self {
        let s = size as f64 / 256.0;
        Self {
            control_grid_spacing: 16.0 * s,
            max_displacement: 6.0 * s,
            smoothing_sigma: 2.0 * s,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.control_grid_spacing > 0.0) {
            return Err(Error::InvalidArgument("control_grid_spacing must be positive".into()));
        }
        if !(self.max_displacement >= 0.0 && self.max_displacement < self.control_grid_spacing) {
            return Err(Error::InvalidArgument(format!(
                "max_displacement {} must lie in [0, control_grid_spacing = {})",
                self.max_displacement, self.control_grid_spacing
            )));
        }
        if !(self.smoothing_sigma >= 0.0) {
            return Err(Error::InvalidArgument("smoothing_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// 1D Gaussian kernel truncated at three sigma, normalized to sum 1.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Separable convolution with border replication.
fn convolve_separable(a: ArrayView2<'_, f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = a.dim();
    let r = (kernel.len() / 2) as i64;
    let tmp: Array2<f64> = Array2::from_shape_fn((h, w), |(i, j)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, kv)| {
                let jj = (j as i64 + k as i64 - r).clamp(0, w as i64 - 1) as usize;
                kv * a[[i, jj]]
            })
            .sum()
    });
    Array2::from_shape_fn((h, w), |(i, j)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, kv)| {
                let ii = (i as i64 + k as i64 - r).clamp(0, h as i64 - 1) as usize;
                kv * tmp[[ii, j]]
            })
            .sum()
    })
}

/// 3x3 binomial blur, `[1, 2, 1] x [1, 2, 1] / 16`, border replicated.
pub fn gaussian_blur3(a: ArrayView2<'_, f64>) -> Array2<f64> {
    convolve_separable(a, &[0.25, 0.5, 0.25])
}

/// Samples a smooth random field: uniform displacements on a coarse control
/// grid, bilinearly upsampled to full resolution, then Gaussian smoothed.
/// Samples that fold are scaled down uniformly until they do not.
pub fn random_elastic_field_with_rng<R: Rng + ?Sized>(
    cfg: &ElasticDeformConfig,
    height: usize,
    width: usize,
    rng: &mut R,
) -> Result<DeformationField> {
    cfg.validate()?;
    let mut field = DeformationField::identity(height, width)?.into_displacements();
    if cfg.max_displacement == 0.0 {
        return DeformationField::new(field);
    }
    let s = cfg.control_grid_spacing;
    let nr = ((height - 1) as f64 / s).ceil() as usize + 1;
    let nc = ((width - 1) as f64 / s).ceil() as usize + 1;
    let kernel = gaussian_kernel(cfg.smoothing_sigma);
    for axis in 0..2 {
        let ctrl = Array2::from_shape_fn((nr, nc), |_| {
            rng.random_range(-cfg.max_displacement..=cfg.max_displacement)
        });
        let up = Array2::from_shape_fn((height, width), |(r, c)| {
            let (gr, gc) = (r as f64 / s, c as f64 / s);
            let (r0, c0) = ((gr.floor() as usize).min(nr - 1), (gc.floor() as usize).min(nc - 1));
            let (r1, c1) = ((r0 + 1).min(nr - 1), (c0 + 1).min(nc - 1));
            let (wr, wc) = (gr - r0 as f64, gc - c0 as f64);
            (1.0 - wr) * ((1.0 - wc) * ctrl[[r0, c0]] + wc * ctrl[[r0, c1]])
                + wr * ((1.0 - wc) * ctrl[[r1, c0]] + wc * ctrl[[r1, c1]])
        });
        let smooth = convolve_separable(up.view(), &kernel);
        field.index_axis_mut(Axis(0), axis).assign(&smooth);
    }
    // Shrink folding samples until every determinant is positive.
    let mut field = DeformationField::new(field)?;
    while jacobian_stats(&field).fraction_nonpositive > 0.0 {
        log::debug!("elastic sample folds; shrinking by 0.9");
        field = DeformationField::new(field.into_displacements() * 0.9)?;
    }
    Ok(field)
}

/// Random elastic field seeded from `cfg.seed`.
pub fn random_elastic_field(cfg: &ElasticDeformConfig, height: usize, width: usize) -> Result<DeformationField> {
    random_elastic_field_with_rng(cfg, height, width, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

/// Otsu threshold over a 256-bin histogram of the value range.
pub fn otsu_threshold(a: ArrayView2<'_, f64>) -> f64 {
    let (lo, hi) = a
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if hi <= lo {
        return lo;
    }
    const BINS: usize = 256;
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0usize; BINS];
    for &v in a.iter() {
        hist[(((v - lo) / width) as usize).min(BINS - 1)] += 1;
    }
    let total = a.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &n)| i as f64 * n as f64).sum();
    let (mut w0, mut sum0, mut best, mut best_t) = (0.0, 0.0, -1.0, 0usize);
    for (t, &n) in hist.iter().enumerate() {
        w0 += n as f64;
        sum0 += t as f64 * n as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    lo + (best_t + 1) as f64 * width
}

/// Foreground membership: mask labels > 0 when a mask is given, otherwise
/// pixels at or above the Otsu threshold.
pub fn foreground(img: ArrayView2<'_, f64>, mask: Option<&MaskGrid>) -> Result<Array2<bool>> {
    match mask {
        Some(m) => {
            if m.shape() != img.dim() {
                return Err(Error::ShapeMismatch(format!(
                    "foreground mask {:?} vs image {:?}",
                    m.shape(),
                    img.dim()
                )));
            }
            Ok(m.labels().mapv(|l| l > 0))
        }
        None => {
            let t = otsu_threshold(img);
            let (lo, hi) = img
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
            if hi <= lo {
                return Ok(Array2::from_elem(img.dim(), false));
            }
            Ok(img.mapv(|v| v >= t))
        }
    }
}

/// `cos(I * pi / 255)` on foreground pixels; background passes through.
pub fn intensity_remap(img: ArrayView2<'_, f64>, fg: &Array2<bool>) -> Array2<f64> {
    let mut out = img.to_owned();
    ndarray::Zip::from(&mut out).and(fg).for_each(|v, &f| {
        if f {
            *v = (*v * PI / 255.0).cos();
        }
    });
    out
}

/// Min-max rescale to `[-1, 1]`. A constant input maps to all `-1`; the flag
/// reports that case.
pub fn minmax_normalize(a: ArrayView2<'_, f64>) -> (Array2<f64>, bool) {
    let (lo, hi) = a
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if hi <= lo {
        return (Array2::from_elem(a.dim(), -1.0), true);
    }
    (a.mapv(|v| (2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)), false)
}

/// Output of [`synthesize_modality`].
#[derive(Debug, Clone)]
pub struct SynthesizedImage {
    pub image: ImageGrid,
    /// The elastic deformation applied (pull-back), i.e. the field that
    /// registers the input onto `image`.
    pub field: DeformationField,
}

/// Simulates a second modality: foreground intensity remap, 3x3 blur, random
/// elastic deformation, then renormalization to `[-1, 1]`.
///
/// `img` must use the 8-bit intensity convention. `blur_kernel` may be 3
/// (binomial blur) or 1 (no blur).
pub fn synthesize_modality<R: Rng + ?Sized>(
    img: &ImageGrid,
    fg_mask: Option<&MaskGrid>,
    blur_kernel: usize,
    elastic: &ElasticDeformConfig,
    rng: &mut R,
) -> Result<SynthesizedImage> {
    if img.range() != ValueRange::Intensity8 {
        return Err(Error::InvalidArgument(
            "synthesize_modality expects 8-bit intensities".into(),
        ));
    }
    let fg = foreground(img.data().view(), fg_mask)?;
    let remapped = intensity_remap(img.data().view(), &fg);
    let blurred = match blur_kernel {
        3 => gaussian_blur3(remapped.view()),
        1 => remapped,
        k => {
            return Err(Error::InvalidArgument(format!(
                "unsupported blur kernel size {k} (expected 1 or 3)"
            )))
        }
    };
    let (h, w) = img.shape();
    let field = random_elastic_field_with_rng(elastic, h, w, rng)?;
    let deformed = warp_array(blurred.view(), &field, Interpolation::Bilinear)?;
    let (normalized, degenerate) = minmax_normalize(deformed.view());
    if degenerate {
        log::warn!("synthesized image is constant; normalized to -1");
    }
    Ok(SynthesizedImage {
        image: ImageGrid::normalized(normalized, format!("{}-synth", img.modality()))?,
        field,
    })
}

/// Normalized image back to the 8-bit intensity convention.
pub fn to_intensity8(img: &ImageGrid) -> Result<ImageGrid> {
    match img.range() {
        ValueRange::Intensity8 => Ok(img.clone()),
        ValueRange::Normalized => ImageGrid::new(
            img.data().mapv(|v| (v + 1.0) * 127.5),
            ValueRange::Intensity8,
            img.modality(),
        ),
    }
}

/// Bilinear resize with pixel-centre alignment.
fn resize_bilinear(a: ArrayView2<'_, f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = a.dim();
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    Array2::from_shape_fn((out_h, out_w), |(r, c)| {
        let y = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let x = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (wy, wx) = (y - y0 as f64, x - x0 as f64);
        (1.0 - wy) * ((1.0 - wx) * a[[y0, x0]] + wx * a[[y0, x1]])
            + wy * ((1.0 - wx) * a[[y1, x0]] + wx * a[[y1, x1]])
    })
}

/// Centres `a` on a square canvas filled with `fill`.
fn pad_square<T: Copy>(a: ArrayView2<'_, T>, fill: T) -> Array2<T> {
    let (h, w) = a.dim();
    let n = h.max(w);
    let (top, left) = ((n - h) / 2, (n - w) / 2);
    let mut out = Array2::from_elem((n, n), fill);
    out.slice_mut(ndarray::s![top..top + h, left..left + w]).assign(&a);
    out
}

/// Pads a raw slice to a square (with its minimum), resizes it to
/// `target_size` and min-max normalizes it to `[-1, 1]`.
pub fn preprocess_slice(raw: ArrayView2<'_, f64>, target_size: usize) -> Result<ImageGrid> {
    if raw.is_empty() || target_size == 0 {
        return Err(Error::InvalidArgument("empty slice or zero target size".into()));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("raw slice".into()));
    }
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let square = pad_square(raw, min);
    let resized = if square.dim() == (target_size, target_size) {
        square
    } else {
        resize_bilinear(square.view(), target_size, target_size)
    };
    let (normalized, degenerate) = minmax_normalize(resized.view());
    if degenerate {
        log::warn!("constant slice normalized to -1");
    }
    ImageGrid::normalized(normalized, "")
}

/// Label-map counterpart of [`preprocess_slice`]: zero padding and
/// nearest-neighbour resizing.
pub fn preprocess_mask(raw: ArrayView2<'_, u16>, target_size: usize) -> Result<MaskGrid> {
    if raw.is_empty() || target_size == 0 {
        return Err(Error::InvalidArgument("empty mask or zero target size".into()));
    }
    let square = pad_square(raw, 0);
    let n = square.nrows();
    let scale = n as f64 / target_size as f64;
    let labels = Array2::from_shape_fn((target_size, target_size), |(r, c)| {
        let y = (((r as f64 + 0.5) * scale) as usize).min(n - 1);
        let x = (((c as f64 + 0.5) * scale) as usize).min(n - 1);
        square[[y, x]]
    });
    MaskGrid::new(labels)
}

struct Ellipse {
    cr: f64,
    cc: f64,
    ar: f64,
    ac: f64,
    angle: f64,
}

impl Ellipse {
    fn random<R: Rng + ?Sized>(rng: &mut R, cr: f64, cc: f64, rmin: f64, rmax: f64) -> Self {
        Self {
            cr,
            cc,
            ar: rng.random_range(rmin..rmax),
            ac: rng.random_range(rmin..rmax),
            angle: rng.random_range(0.0..PI),
        }
    }

    fn contains(&self, r: f64, c: f64) -> bool {
        let (dr, dc) = (r - self.cr, c - self.cc);
        let (s, co) = self.angle.sin_cos();
        let u = co * dr + s * dc;
        let v = -s * dr + co * dc;
        (u / self.ar).powi(2) + (v / self.ac).powi(2) <= 1.0
    }
}

/// Textured random ellipses on a dark background: a large "body" (label 1)
/// containing two smaller structures (labels 2 and 3). Returns the 8-bit
/// image and its label map.
const TEXTURE_AMPLITUDE: f64 = 18.0;

pub fn generate_shapes_image<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Result<(ImageGrid, MaskGrid)> {
    let n = size as f64;
    let mid = n / 2.0;
    let cr = mid + rng.random_range(-0.05..0.05) * n;
    let cc = mid + rng.random_range(-0.05..0.05) * n;
    let body = Ellipse::random(rng, cr, cc, 0.30 * n, 0.40 * n);
    let organ = |rng: &mut R, rmin: f64, rmax: f64| {
        // keep organs well inside the body
        let t = rng.random_range(0.0..2.0 * PI);
        let rho = rng.random_range(0.0..0.35);
        let cr = body.cr + rho * body.ar.min(body.ac) * t.sin();
        let cc = body.cc + rho * body.ar.min(body.ac) * t.cos();
        Ellipse::random(rng, cr, cc, rmin * n, rmax * n)
    };
    let organs = [organ(rng, 0.08, 0.15), organ(rng, 0.06, 0.12)];
    let base = [rng.random_range(95.0..125.0), rng.random_range(185.0..215.0), rng.random_range(35.0..60.0)];
    // smooth random texture, unit std, correlation length ~n/32
    let raw = Array2::from_shape_fn((size, size), |_| rng.random_range(-1.0..1.0));
    let mut texture = convolve_separable(raw.view(), &gaussian_kernel(n / 32.0));
    let sd = texture.std(0.0).max(1e-12);
    texture.mapv_inplace(|v| v / sd);

    let mut labels = Array2::<u16>::zeros((size, size));
    let mut data = Array2::<f64>::zeros((size, size));
    for r in 0..size {
        for c in 0..size {
            let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
            let mut label = 0;
            if body.contains(y, x) {
                label = 1;
                // later organs win where they overlap
                for (k, o) in organs.iter().enumerate() {
                    if o.contains(y, x) {
                        label = k as u16 + 2;
                    }
                }
            }
            labels[[r, c]] = label;
            if label > 0 {
                let noise = rng.random_range(-4.0..4.0);
                data[[r, c]] = (base[label as usize - 1] + TEXTURE_AMPLITUDE * texture[[r, c]] + noise).clamp(0.0, 255.0);
            }
        }
    }
    Ok((
        ImageGrid::new(data, ValueRange::Intensity8, "shapes-a")?,
        MaskGrid::new(labels)?,
    ))
}

fn shapes_pair<R: Rng + ?Sized>(name: String, size: usize, elastic: &ElasticDeformConfig, rng: &mut R) -> Result<PairRecord> {
    let (img8, mask) = generate_shapes_image(size, rng)?;
    let synth = synthesize_modality(&img8, Some(&mask), 3, elastic, rng)?;
    let target_mask = warp_mask(&mask, &synth.field)?;
    let (source, _) = minmax_normalize(img8.data().view());
    let record = PairRecord {
        name,
        source: ImageGrid::normalized(source, "shapes-a")?,
        target: synth.image.with_modality("shapes-b"),
        source_mask: Some(mask),
        target_mask: Some(target_mask),
        gt_field: Some(synth.field),
        meta: PairMeta {
            modality_source: "shapes-a".into(),
            modality_target: "shapes-b".into(),
            spacing_mm: [1.0, 1.0],
            layout_version: LAYOUT_VERSION,
        },
    };
    record.validate()?;
    Ok(record)
}

/// `n_pairs` synthetic pairs with known deformations. The target of each
/// pair is its source passed through [`synthesize_modality`].
pub fn generate_shapes_dataset(
    n_pairs: usize,
    size: usize,
    elastic: &ElasticDeformConfig,
    seed: u64,
) -> Result<PairedDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_split(Split::Train, n_pairs, size, elastic, &mut rng)
}

fn generate_split(
    split: Split,
    n_pairs: usize,
    size: usize,
    elastic: &ElasticDeformConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PairedDataset> {
    if size < 8 {
        return Err(Error::InvalidArgument(format!("shapes size {size} too small")));
    }
    let records = (0..n_pairs)
        .map(|i| shapes_pair(format!("pair_{i:04}"), size, elastic, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(PairedDataset { split, records })
}

/// Train/val/test shapes splits drawn sequentially from one seeded stream.
pub fn generate_shapes_splits(
    counts: [usize; 3],
    size: usize,
    elastic: &ElasticDeformConfig,
    seed: u64,
) -> Result<DatasetSplits> {
    if counts[0] == 0 {
        return Err(Error::InvalidArgument("need at least one training pair".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(DatasetSplits {
        train: generate_split(Split::Train, counts[0], size, elastic, &mut rng)?,
        val: generate_split(Split::Val, counts[1], size, elastic, &mut rng)?,
        test: generate_split(Split::Test, counts[2], size, elastic, &mut rng)?,
    })
}

fn write_png16(path: &Path, h: usize, w: usize, data: Vec<u16>) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, data).expect("buffer matches dimensions");
    buf.save(path)?;
    Ok(())
}

fn read_png16(path: &Path) -> Result<Array2<u16>> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), img.into_raw())
        .map_err(|e| Error::dataset(path, e.to_string()))
}

/// Saves a normalized image as 16-bit grayscale.
pub fn save_image_png(img: &ImageGrid, path: &Path) -> Result<()> {
    let (h, w) = img.shape();
    let v = img
        .data()
        .iter()
        .map(|&x| ((x.clamp(-1.0, 1.0) + 1.0) * 0.5 * 65535.0).round() as u16)
        .collect();
    write_png16(path, h, w, v)
}

/// Loads a grayscale PNG (8 or 16 bit) as a normalized image; full-scale
/// black maps to -1 and full-scale white to 1.
pub fn load_image_png(path: &Path, modality: &str) -> Result<ImageGrid> {
    let raw = read_png16(path)?;
    ImageGrid::normalized(raw.mapv(|v| v as f64 / 65535.0 * 2.0 - 1.0), modality)
}

pub fn save_mask_png(mask: &MaskGrid, path: &Path) -> Result<()> {
    let (h, w) = mask.shape();
    write_png16(path, h, w, mask.labels().iter().copied().collect())
}

pub fn load_mask_png(path: &Path) -> Result<MaskGrid> {
    MaskGrid::new(read_png16(path)?)
}

pub fn save_field_npy(field: &DeformationField, path: &Path) -> Result<()> {
    ndarray_npy::write_npy(path, field.displacements())?;
    Ok(())
}

pub fn load_field_npy(path: &Path) -> Result<DeformationField> {
    let a: Array3<f64> = ndarray_npy::read_npy(path)?;
    DeformationField::new(a)
}

fn pair_dir(root: &Path, split: Split, index: usize) -> PathBuf {
    root.join(split.as_str()).join(format!("pair_{index:04}"))
}

/// Writes every record of `ds` under `root/<split>/pair_%04d/`.
pub fn save_dataset(ds: &PairedDataset, root: &Path) -> Result<()> {
    for (i, r) in ds.records.iter().enumerate() {
        let dir = pair_dir(root, ds.split, i);
        fs::create_dir_all(&dir)?;
        save_image_png(&r.source, &dir.join("source.png"))?;
        save_image_png(&r.target, &dir.join("target.png"))?;
        if let Some(m) = &r.source_mask {
            save_mask_png(m, &dir.join("source_mask.png"))?;
        }
        if let Some(m) = &r.target_mask {
            save_mask_png(m, &dir.join("target_mask.png"))?;
        }
        if let Some(f) = &r.gt_field {
            save_field_npy(f, &dir.join("gt_field.npy"))?;
        }
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&r.meta)?)?;
    }
    Ok(())
}

pub fn save_splits(splits: &DatasetSplits, root: &Path) -> Result<()> {
    for s in Split::ALL {
        save_dataset(splits.get(s), root)?;
    }
    Ok(())
}

fn load_pair(dir: &Path, name: String, layout_version: u32) -> Result<PairRecord> {
    let meta_path = dir.join("meta.json");
    let meta: PairMeta = serde_json::from_str(
        &fs::read_to_string(&meta_path).map_err(|e| Error::dataset(&meta_path, e.to_string()))?,
    )?;
    if meta.layout_version != layout_version {
        return Err(Error::dataset(
            &meta_path,
            format!("layout_version {} does not match requested {layout_version}", meta.layout_version),
        ));
    }
    let required = |file: &str| -> Result<PathBuf> {
        let p = dir.join(file);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::dataset(&p, "missing file"))
        }
    };
    let optional = |file: &str| Some(dir.join(file)).filter(|p| p.is_file());
    let record = PairRecord {
        source: load_image_png(&required("source.png")?, &meta.modality_source)?,
        target: load_image_png(&required("target.png")?, &meta.modality_target)?,
        source_mask: optional("source_mask.png").map(|p| load_mask_png(&p)).transpose()?,
        target_mask: optional("target_mask.png").map(|p| load_mask_png(&p)).transpose()?,
        gt_field: optional("gt_field.npy").map(|p| load_field_npy(&p)).transpose()?,
        name,
        meta,
    };
    record.validate().map_err(|e| Error::dataset(dir, e.to_string()))?;
    Ok(record)
}

/// Loads one split in directory-name order.
pub fn load_dataset(root: &Path, split: Split, layout_version: u32) -> Result<PairedDataset> {
    if layout_version != LAYOUT_VERSION {
        return Err(Error::dataset(root, format!("unknown layout version {layout_version}")));
    }
    let dir = root.join(split.as_str());
    if !dir.is_dir() {
        return Err(Error::dataset(&dir, "split directory not found"));
    }
    let mut names: Vec<String> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.starts_with("pair_"))
        .collect();
    names.sort();
    let records = names
        .into_iter()
        .map(|n| load_pair(&dir.join(&n), n, layout_version))
        .collect::<Result<Vec<_>>>()?;
    Ok(PairedDataset { split, records })
}

/// Loads all three splits; absent split directories load as empty.
pub fn load_splits(root: &Path) -> Result<DatasetSplits> {
    let load = |s: Split| {
        if root.join(s.as_str()).is_dir() {
            load_dataset(root, s, LAYOUT_VERSION)
        } else {
            Ok(PairedDataset {
                split: s,
                records: Vec::new(),
            })
        }
    };
    Ok(DatasetSplits {
        train: load(Split::Train)?,
        val: load(Split::Val)?,
        test: load(Split::Test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dice;

    #[test]
    fn cos_endpoints() {
        let a = ndarray::array![[0.0, 255.0, 127.5]];
        let fg = Array2::from_elem((1, 3), true);
        let out = intensity_remap(a.view(), &fg);
        assert_eq!(out[[0, 0]], 1.0);
        assert_eq!(out[[0, 1]], -1.0);
        assert!(out[[0, 2]].abs() < 1e-15);
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let a = Array2::from_elem((6, 5), (128.0 * PI / 255.0).cos());
        let b = gaussian_blur3(a.view());
        for v in b.iter() {
            assert!((v - (128.0 * PI / 255.0).cos()).abs() < 1e-15);
        }
    }

    #[test]
    fn elastic_zero_amplitude_is_identity() {
        let cfg = ElasticDeformConfig {
            max_displacement: 0.0,
            ..ElasticDeformConfig::for_size(64)
        };
        let f = random_elastic_field(&cfg, 64, 64).unwrap();
        assert!(f.displacements().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn elastic_config_rejects_large_amplitude() {
        let cfg = ElasticDeformConfig {
            control_grid_spacing: 4.0,
            max_displacement: 4.0,
            smoothing_sigma: 1.0,
            seed: 0,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn elastic_fields_bounded_and_fold_free() {
        let base = ElasticDeformConfig::for_size(64);
        for seed in 0..100 {
            let cfg = ElasticDeformConfig {
                max_displacement: base.control_grid_spacing / 2.0 - 1e-9,
                seed,
                ..base.clone()
            };
            let f = random_elastic_field(&cfg, 64, 64).unwrap();
            assert!(f.max_abs_component() <= cfg.max_displacement + 1e-12);
            assert_eq!(jacobian_stats(&f).fraction_nonpositive, 0.0, "seed {seed}");
        }
    }

    #[test]
    fn preprocess_pads_and_resizes() {
        let raw = Array2::from_shape_fn((192, 160), |(r, c)| (r * 3 + c) as f64);
        let img = preprocess_slice(raw.view(), 256).unwrap();
        assert_eq!(img.shape(), (256, 256));
        let raw = Array2::from_shape_fn((256, 256), |(r, c)| (r as f64 - c as f64).sin());
        let img = preprocess_slice(raw.view(), 256).unwrap();
        let min = img.data().iter().copied().fold(f64::INFINITY, f64::min);
        let max = img.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((min, max), (-1.0, 1.0));
        let flat = preprocess_slice(Array2::from_elem((10, 10), 3.0).view(), 16).unwrap();
        assert!(flat.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn background_untouched_by_remap() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (img, mask) = generate_shapes_image(32, &mut rng).unwrap();
        let fg = foreground(img.data().view(), Some(&mask)).unwrap();
        let out = intensity_remap(img.data().view(), &fg);
        for ((o, i), f) in out.iter().zip(img.data().iter()).zip(fg.iter()) {
            if !f {
                assert_eq!(o, i);
            }
        }
    }

    #[test]
    fn otsu_splits_two_levels() {
        let a = Array2::from_shape_fn((10, 10), |(r, _)| if r < 5 { 10.0 } else { 200.0 });
        let t = otsu_threshold(a.view());
        assert!(t > 10.0 && t <= 200.0);
        let fg = foreground(a.view(), None).unwrap();
        assert_eq!(fg.iter().filter(|&&f| f).count(), 50);
    }

    #[test]
    fn shapes_dataset_is_deterministic_and_consistent() {
        let cfg = ElasticDeformConfig::for_size(32);
        let a = generate_shapes_dataset(3, 32, &cfg, 7).unwrap();
        let b = generate_shapes_dataset(3, 32, &cfg, 7).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a, b);
        for r in &a.records {
            let warped = warp_mask(r.source_mask.as_ref().unwrap(), r.gt_field.as_ref().unwrap()).unwrap();
            assert_eq!(&warped, r.target_mask.as_ref().unwrap());
            assert_eq!(r.source_mask.as_ref().unwrap().foreground_labels().len(), 3);
        }
    }

    #[test]
    fn shapes_are_initially_misaligned() {
        let cfg = ElasticDeformConfig::for_size(64);
        let ds = generate_shapes_dataset(4, 64, &cfg, 1).unwrap();
        let mean: f64 = ds
            .records
            .iter()
            .map(|r| {
                let (s, t) = (r.source_mask.as_ref().unwrap(), r.target_mask.as_ref().unwrap());
                (1..=3).map(|l| dice(s, t, l).unwrap()).sum::<f64>() / 3.0
            })
            .sum::<f64>()
            / 4.0;
        assert!(mean < 1.0);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ElasticDeformConfig::for_size(32);
        let ds = generate_shapes_dataset(3, 32, &cfg, 3).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path(), Split::Train, LAYOUT_VERSION).unwrap();
        assert_eq!(loaded.len(), 3);
        let again = load_dataset(dir.path(), Split::Train, LAYOUT_VERSION).unwrap();
        assert_eq!(loaded.checksum(), again.checksum());
        for (a, b) in ds.records.iter().zip(&loaded.records) {
            assert_eq!(a.source_mask, b.source_mask);
            assert_eq!(a.gt_field, b.gt_field);
            for (x, y) in a.source.data().iter().zip(b.source.data().iter()) {
                assert!((x - y).abs() <= 1.0 / 65535.0);
            }
        }
        assert!(load_dataset(dir.path(), Split::Train, 2).is_err());
        assert!(load_dataset(dir.path(), Split::Val, LAYOUT_VERSION).is_err());
    }

    #[test]
    fn mismatched_mask_names_the_pair() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_shapes_dataset(2, 16, &ElasticDeformConfig::for_size(16), 3).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let bad = MaskGrid::new(Array2::zeros((8, 8))).unwrap();
        save_mask_png(&bad, &dir.path().join("train/pair_0001/source_mask.png")).unwrap();
        let err = load_dataset(dir.path(), Split::Train, LAYOUT_VERSION).unwrap_err();
        assert!(err.to_string().contains("pair_0001"), "{err}");
    }

    #[test]
    fn missing_target_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_shapes_dataset(1, 16, &ElasticDeformConfig::for_size(16), 3).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        fs::remove_file(dir.path().join("train/pair_0000/target.png")).unwrap();
        assert!(load_dataset(dir.path(), Split::Train, LAYOUT_VERSION).is_err());
    }
}
