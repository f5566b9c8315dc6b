//! Overlap and surface-distance metrics, and worst-slice selection.
//!
//! Distances are measured between boundary voxels: a foreground voxel is on
//! the boundary when one of its face neighbours (6 in 3D, 4 within a slice)
//! is background or outside the grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::volume::{Dims3, MaskVolume, PredictionVolume, Spacing};

fn check_same(p: &MaskVolume, y: &MaskVolume) -> Result<()> {
    if p.dims != y.dims {
        return Err(Error::Shape(format!(
            "mask dims differ: {:?} vs {:?}",
            p.dims, y.dims
        )));
    }
    Ok(())
}

fn counts(p: &[bool], y: &[bool]) -> (usize, usize, usize) {
    let mut both = 0;
    let mut np = 0;
    let mut ny = 0;
    for (&a, &b) in p.iter().zip(y) {
        np += a as usize;
        ny += b as usize;
        both += (a && b) as usize;
    }
    (np, ny, both)
}

fn dice_counts(p: &[bool], y: &[bool]) -> f64 {
    let (np, ny, both) = counts(p, y);
    if np + ny == 0 {
        1.0
    } else {
        2.0 * both as f64 / (np + ny) as f64
    }
}

/// Dice similarity; 1 when both masks are empty.
pub fn dsc(p: &MaskVolume, y: &MaskVolume) -> Result<f64> {
    check_same(p, y)?;
    Ok(dice_counts(&p.data, &y.data))
}

/// `|P ∩ Y| / |Y|`.
pub fn sensitivity(p: &MaskVolume, y: &MaskVolume) -> Result<f64> {
    check_same(p, y)?;
    let (_, ny, both) = counts(&p.data, &y.data);
    if ny == 0 {
        return Err(Error::Validation("sensitivity undefined for an empty reference".into()));
    }
    Ok(both as f64 / ny as f64)
}

/// `|P^c ∩ Y^c| / |Y^c|`.
pub fn specificity(p: &MaskVolume, y: &MaskVolume) -> Result<f64> {
    check_same(p, y)?;
    let n = p.data.len();
    let (np, ny, both) = counts(&p.data, &y.data);
    let neg = n - ny;
    if neg == 0 {
        return Err(Error::Validation("specificity undefined for a full reference".into()));
    }
    Ok((n + both - np - ny) as f64 / neg as f64)
}

/// Diagonal of the voxel grid in millimetres.
pub fn grid_diagonal(dims: Dims3, spacing: Spacing) -> f64 {
    let d = dims.d as f64 * spacing[0];
    let h = dims.h as f64 * spacing[1];
    let w = dims.w as f64 * spacing[2];
    (d * d + h * h + w * w).sqrt()
}

/// Boundary voxels of `mask` on a `(d, h, w)` grid.
pub fn surface(mask: &[bool], dims: Dims3) -> Vec<bool> {
    let Dims3 { d, h, w } = dims;
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = dims.index(z, y, x);
                if !mask[i] {
                    continue;
                }
                let inside = |dz: isize, dy: isize, dx: isize| {
                    let (zz, yy, xx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                    zz >= 0
                        && yy >= 0
                        && xx >= 0
                        && (zz as usize) < d
                        && (yy as usize) < h
                        && (xx as usize) < w
                        && mask[dims.index(zz as usize, yy as usize, xx as usize)]
                };
                let interior = (d == 1 || (inside(-1, 0, 0) && inside(1, 0, 0)))
                    && inside(0, -1, 0)
                    && inside(0, 1, 0)
                    && inside(0, 0, -1)
                    && inside(0, 0, 1);
                out[i] = !interior;
            }
        }
    }
    out
}

/// Squared distance transform along one line of samples with spacing `s`.
fn edt_line(f: &mut [f64], s: f64, v: &mut Vec<usize>, zb: &mut Vec<f64>, out: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    zb.clear();
    let pos = |q: usize| q as f64 * s;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    zb.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let (xq, xp) = (pos(q), pos(p));
                    let x = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
                    if x <= *zb.last().unwrap() {
                        v.pop();
                        zb.pop();
                    } else {
                        v.push(q);
                        zb.push(x);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        return;
    }
    out.clear();
    let mut k = 0;
    for q in 0..n {
        let xq = pos(q);
        while k + 1 < v.len() && zb[k + 1] < xq {
            k += 1;
        }
        let dx = xq - pos(v[k]);
        out.push(dx * dx + f[v[k]]);
    }
    f.copy_from_slice(out);
}

/// Squared Euclidean distance (mm²) from every voxel to the nearest `true`
/// voxel of `seeds`; infinite when `seeds` is empty.
pub fn squared_distance_map(seeds: &[bool], dims: Dims3, spacing: Spacing) -> Vec<f64> {
    let mut g: Vec<f64> = seeds.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let Dims3 { d, h, w } = dims;
    let (mut v, mut zb, mut out) = (Vec::new(), Vec::new(), Vec::new());
    let mut line = Vec::new();
    // x lines are contiguous.
    for row in g.chunks_mut(w) {
        edt_line(row, spacing[2], &mut v, &mut zb, &mut out);
    }
    for z in 0..d {
        for x in 0..w {
            line.clear();
            line.extend((0..h).map(|y| g[dims.index(z, y, x)]));
            edt_line(&mut line, spacing[1], &mut v, &mut zb, &mut out);
            for y in 0..h {
                g[dims.index(z, y, x)] = line[y];
            }
        }
    }
    if d > 1 {
        for y in 0..h {
            for x in 0..w {
                line.clear();
                line.extend((0..d).map(|z| g[dims.index(z, y, x)]));
                edt_line(&mut line, spacing[0], &mut v, &mut zb, &mut out);
                for z in 0..d {
                    g[dims.index(z, y, x)] = line[z];
                }
            }
        }
    }
    g
}

/// Distances from each boundary voxel of one mask to the boundary of the
/// other, both directions pooled. `None` when exactly one mask is empty.
fn pooled_surface_distances(p: &[bool], y: &[bool], dims: Dims3, spacing: Spacing) -> Option<Vec<f64>> {
    let sp = surface(p, dims);
    let sy = surface(y, dims);
    let (ep, ey) = (!sp.contains(&true), !sy.contains(&true));
    if ep && ey {
        return Some(Vec::new());
    }
    if ep || ey {
        return None;
    }
    let to_y = squared_distance_map(&sy, dims, spacing);
    let to_p = squared_distance_map(&sp, dims, spacing);
    let mut out = Vec::new();
    out.extend(sp.iter().zip(&to_y).filter(|(s, _)| **s).map(|(_, d)| d.sqrt()));
    out.extend(sy.iter().zip(&to_p).filter(|(s, _)| **s).map(|(_, d)| d.sqrt()));
    Some(out)
}

/// Linear-interpolated percentile `q` in `[0, 100]`; sorts in place.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    values[lo] + (values[hi] - values[lo]) * t
}

/// 95th percentile of pooled boundary distances in mm. Zero when both masks
/// are empty; the grid diagonal when exactly one is.
pub fn hd95(p: &MaskVolume, y: &MaskVolume, spacing: Spacing) -> Result<f64> {
    check_same(p, y)?;
    Ok(match pooled_surface_distances(&p.data, &y.data, p.dims, spacing) {
        Some(mut d) => percentile(&mut d, 95.0),
        None => grid_diagonal(p.dims, spacing),
    })
}

/// Full Hausdorff distance between the boundaries of two masks on one
/// grid. `None` when both are empty; the grid diagonal when one is.
pub fn hausdorff(p: &[bool], y: &[bool], dims: Dims3, spacing: Spacing) -> Option<f64> {
    if !p.contains(&true) && !y.contains(&true) {
        return None;
    }
    Some(match pooled_surface_distances(p, y, dims, spacing) {
        Some(d) => d.into_iter().fold(0.0, f64::max),
        None => grid_diagonal(dims, spacing),
    })
}

fn slice_dims(dims: Dims3) -> Dims3 {
    Dims3::new(1, dims.h, dims.w)
}

/// Per-slice 2D Dice.
pub fn per_slice_dsc(p: &MaskVolume, y: &MaskVolume) -> Result<Vec<f64>> {
    check_same(p, y)?;
    Ok((0..p.dims.d).map(|z| dice_counts(p.axial(z), y.axial(z))).collect())
}

/// Per-slice 2D Hausdorff distance in mm; `None` for doubly empty slices.
pub fn per_slice_hd(p: &MaskVolume, y: &MaskVolume, spacing: Spacing) -> Result<Vec<Option<f64>>> {
    check_same(p, y)?;
    let dims = slice_dims(p.dims);
    Ok(exec::map_range(p.dims.d, |z| hausdorff(p.axial(z), y.axial(z), dims, spacing)))
}

/// Axial slice with the largest 2D Hausdorff distance between the binarised
/// prediction and the label; ties go to the lowest index.
pub fn worst_slice(pred: &PredictionVolume, label: &MaskVolume) -> Result<usize> {
    if pred.dims != label.dims {
        return Err(Error::Shape("prediction and label dims differ".into()));
    }
    let p = pred.binarize(label.spacing);
    worst_slice_of(&per_slice_hd(&p, label, label.spacing)?)
}

/// [`worst_slice`] restricted to slices not listed in `exclude`.
pub fn worst_slice_excluding(pred: &PredictionVolume, label: &MaskVolume, exclude: &[usize]) -> Result<usize> {
    if pred.dims != label.dims {
        return Err(Error::Shape("prediction and label dims differ".into()));
    }
    let p = pred.binarize(label.spacing);
    let mut hd = per_slice_hd(&p, label, label.spacing)?;
    for &z in exclude {
        if let Some(h) = hd.get_mut(z) {
            *h = None;
        }
    }
    worst_slice_of(&hd)
}

/// Arg-max over per-slice distances, ignoring `None`; ties to the lowest index.
pub fn worst_slice_of(hd: &[Option<f64>]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (z, h) in hd.iter().enumerate() {
        if let Some(h) = *h {
            if best.map_or(true, |(_, b)| h > b) {
                best = Some((z, h));
            }
        }
    }
    best.map(|(z, _)| z)
        .ok_or_else(|| Error::Validation("prediction and label are empty on every slice".into()))
}

/// Summary of one prediction against a reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dsc: f64,
    pub hd95_mm: f64,
    /// `None` when the reference is empty.
    pub sensitivity: Option<f64>,
    /// `None` when the reference covers the whole grid.
    pub specificity: Option<f64>,
    pub per_slice_dsc: Vec<f64>,
    pub per_slice_hd_mm: Vec<Option<f64>>,
}

impl MetricReport {
    pub fn compute(p: &MaskVolume, y: &MaskVolume) -> Result<Self> {
        check_same(p, y)?;
        Ok(Self {
            dsc: dsc(p, y)?,
            hd95_mm: hd95(p, y, y.spacing)?,
            sensitivity: sensitivity(p, y).ok(),
            specificity: specificity(p, y).ok(),
            per_slice_dsc: per_slice_dsc(p, y)?,
            per_slice_hd_mm: per_slice_hd(p, y, y.spacing)?,
        })
    }

    /// Metrics restricted to the given axial slices.
    pub fn compute_on(p: &MaskVolume, y: &MaskVolume, slices: &[usize]) -> Result<Self> {
        check_same(p, y)?;
        if let Some(&z) = slices.iter().find(|&&z| z >= p.dims.d) {
            return Err(Error::OutOfRange { index: z, extent: p.dims.d });
        }
        let mut sorted = slices.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let dims = Dims3::new(sorted.len(), p.dims.h, p.dims.w);
        let gather = |m: &MaskVolume| MaskVolume {
            dims,
            data: sorted.iter().flat_map(|&z| m.axial(z).iter().copied()).collect(),
            spacing: m.spacing,
        };
        Self::compute(&gather(p), &gather(y))
    }
}
