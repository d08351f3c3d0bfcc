//! Overlap and surface-distance evaluation of registered label maps.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{jacobian_stats, warp_mask, DeformationField, JacobianStats, MaskGrid};

/// Physical size of a pixel along rows and columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub row: f64,
    pub col: f64,
}

impl Spacing {
    pub const UNIT: Spacing = Spacing { row: 1.0, col: 1.0 };

    pub fn isotropic(s: f64) -> Self {
        Self { row: s, col: s }
    }

    pub fn scaled(self, s: f64) -> Self {
        Self {
            row: self.row * s,
            col: self.col * s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    Px,
    Mm,
}

impl Units {
    pub fn as_str(self) -> &'static str {
        match self {
            Units::Px => "px",
            Units::Mm => "mm",
        }
    }
}

fn check_same_shape(a: &MaskGrid, b: &MaskGrid) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "masks are {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Dice overlap of the pixels carrying `label`. Two empty sets score 1.
pub fn dice(a: &MaskGrid, b: &MaskGrid, label: u16) -> Result<f64> {
    check_same_shape(a, b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels().iter().zip(b.labels().iter()) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Set pixels with at least one 8-neighbour outside the set (the image
/// border counts as outside).
pub fn boundary(mask: &MaskGrid, label: u16) -> Array2<bool> {
    let m = mask.labels();
    let (h, w) = m.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        if m[[r, c]] != label {
            return false;
        }
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                if rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 {
                    return true;
                }
                if m[[rr as usize, cc as usize]] != label {
                    return true;
                }
            }
        }
        false
    })
}

/// One pass of the lower-envelope squared distance transform along a line:
/// `out[p] = min_q weight * (p - q)^2 + f[q]`.
fn edt_1d(f: &[f64], weight: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            let p = v[k as usize];
            let s = ((f[q] + weight * (q * q) as f64) - (f[p] + weight * (p * p) as f64))
                / (2.0 * weight * (q as f64 - p as f64));
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            z[k as usize + 1] = f64::INFINITY;
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut j = 0usize;
    for (p, o) in out.iter_mut().enumerate() {
        while z[j + 1] < p as f64 {
            j += 1;
        }
        let q = v[j];
        let d = p as f64 - q as f64;
        *o = weight * d * d + f[q];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `true`
/// pixel of `features`, with anisotropic spacing.
fn squared_distance_transform(features: &Array2<bool>, spacing: Spacing) -> Array2<f64> {
    let (h, w) = features.dim();
    let mut cols = Array2::from_elem((h, w), f64::INFINITY);
    let mut line = vec![0f64; h];
    let mut out = vec![0f64; h];
    for c in 0..w {
        for r in 0..h {
            line[r] = if features[[r, c]] { 0.0 } else { f64::INFINITY };
        }
        edt_1d(&line, spacing.row * spacing.row, &mut out);
        for r in 0..h {
            cols[[r, c]] = out[r];
        }
    }
    let mut result = Array2::zeros((h, w));
    let mut line = vec![0f64; w];
    let mut out = vec![0f64; w];
    for r in 0..h {
        for c in 0..w {
            line[c] = cols[[r, c]];
        }
        edt_1d(&line, spacing.col * spacing.col, &mut out);
        for c in 0..w {
            result[[r, c]] = out[c];
        }
    }
    result
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &mut [f64], pct: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty sample");
    values.sort_by(|a, b| a.total_cmp(b));
    let rank = pct / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    values[lo] + (rank - lo as f64) * (values[hi] - values[lo])
}

fn directed_boundary_distances(from: &Array2<bool>, to_sq_dt: &Array2<f64>) -> Vec<f64> {
    from.iter()
        .zip(to_sq_dt.iter())
        .filter(|(&b, _)| b)
        .map(|(_, &d)| d.sqrt())
        .collect()
}

/// 95th-percentile symmetric Hausdorff distance between the boundaries of the
/// `label` regions: the larger of the two directed 95th percentiles.
pub fn hd95(a: &MaskGrid, b: &MaskGrid, label: u16, spacing: Spacing) -> Result<f64> {
    hd_percentile(a, b, label, spacing, 95.0)
}

pub fn hd_percentile(a: &MaskGrid, b: &MaskGrid, label: u16, spacing: Spacing, pct: f64) -> Result<f64> {
    check_same_shape(a, b)?;
    if a.count(label) == 0 || b.count(label) == 0 {
        return Err(Error::InvalidArgument(format!(
            "label {label} is empty in at least one mask; HD95 undefined"
        )));
    }
    let ba = boundary(a, label);
    let bb = boundary(b, label);
    let mut ab = directed_boundary_distances(&ba, &squared_distance_transform(&bb, spacing));
    let mut ba_d = directed_boundary_distances(&bb, &squared_distance_transform(&ba, spacing));
    Ok(percentile(&mut ab, pct).max(percentile(&mut ba_d, pct)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: u16,
    pub dice: f64,
    /// `None` when the label is missing from either mask.
    pub hd95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub pair: String,
    pub labels: Vec<LabelMetrics>,
    pub jacobian: JacobianStats,
}

impl PairMetrics {
    pub fn mean_dice(&self) -> f64 {
        if self.labels.is_empty() {
            return 1.0;
        }
        self.labels.iter().map(|l| l.dice).sum::<f64>() / self.labels.len() as f64
    }

    /// Mean over labels with a defined HD95.
    pub fn mean_hd95(&self) -> Option<f64> {
        let v: Vec<f64> = self.labels.iter().filter_map(|l| l.hd95).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Warps the source mask with `field` (nearest neighbour) and scores it
/// against the target mask for every foreground label of either mask.
pub fn evaluate_pair(
    pair: impl Into<String>,
    source_mask: &MaskGrid,
    target_mask: &MaskGrid,
    field: &DeformationField,
    spacing: Spacing,
) -> Result<PairMetrics> {
    check_same_shape(source_mask, target_mask)?;
    let warped = warp_mask(source_mask, field)?;
    let mut labels: Vec<u16> = source_mask
        .foreground_labels()
        .union(&target_mask.foreground_labels())
        .copied()
        .collect();
    labels.sort_unstable();
    let labels = labels
        .into_iter()
        .map(|label| {
            Ok(LabelMetrics {
                label,
                dice: dice(&warped, target_mask, label)?,
                hd95: hd95(&warped, target_mask, label, spacing).ok(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PairMetrics {
        pair: pair.into(),
        labels,
        jacobian: jacobian_stats(field),
    })
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub dsc: Summary,
    pub hd95: Option<Summary>,
    pub hd95_missing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub units: Units,
    pub dsc: Summary,
    /// Over pairs with at least one defined HD95.
    pub hd95: Option<Summary>,
    /// Pairs whose HD95 was undefined for every label.
    pub hd95_missing_pairs: usize,
    pub per_label: BTreeMap<u16, LabelSummary>,
    pub mean_fraction_nonpositive_jacobian: f64,
    pub min_jacobian_det: f64,
    pub pairs: Vec<PairMetrics>,
}

pub fn aggregate(reports: &[PairMetrics], units: Units) -> Result<EvalReport> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("cannot aggregate zero reports".into()));
    }
    let dsc: Vec<f64> = reports.iter().map(PairMetrics::mean_dice).collect();
    let hd: Vec<f64> = reports.iter().filter_map(PairMetrics::mean_hd95).collect();
    let mut per_label_values: BTreeMap<u16, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for r in reports {
        for l in &r.labels {
            let e = per_label_values.entry(l.label).or_default();
            e.0.push(l.dice);
            match l.hd95 {
                Some(h) => e.1.push(h),
                None => e.2 += 1,
            }
        }
    }
    let per_label = per_label_values
        .into_iter()
        .map(|(label, (d, h, missing))| {
            (
                label,
                LabelSummary {
                    dsc: Summary::of(&d).expect("label seen at least once"),
                    hd95: Summary::of(&h),
                    hd95_missing: missing,
                },
            )
        })
        .collect();
    let n = reports.len() as f64;
    Ok(EvalReport {
        units,
        dsc: Summary::of(&dsc).expect("non-empty"),
        hd95: Summary::of(&hd),
        hd95_missing_pairs: reports.len() - hd.len(),
        per_label,
        mean_fraction_nonpositive_jacobian: reports.iter().map(|r| r.jacobian.fraction_nonpositive).sum::<f64>() / n,
        min_jacobian_det: reports
            .iter()
            .map(|r| r.jacobian.min_det)
            .fold(f64::INFINITY, f64::min),
        pairs: reports.to_vec(),
    })
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    pair: &'a str,
    label: u16,
    dice: f64,
    hd95: Option<f64>,
    units: &'static str,
}

/// Writes `report.json` and `report.csv` (one row per pair per label) into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    let mut w = csv::Writer::from_path(dir.join("report.csv"))?;
    for p in &report.pairs {
        for l in &p.labels {
            w.serialize(CsvRow {
                pair: &p.pair,
                label: l.label,
                dice: l.dice,
                hd95: l.hd95,
                units: report.units.as_str(),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}
