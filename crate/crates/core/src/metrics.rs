//! Overlap, surface distance and volume-change metrics for registered pairs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::edt::edt_squared;
use crate::error::{Error, Result};
use crate::registration::{jac_det_grid, warp_mask, warp_mask_onto, RegResult};
use crate::volume::{label, Frame, LabelMask, Vec3};

/// Structures reported in a [`MetricReport`], in output order.
pub const STRUCTURES: [(&str, u8); 3] = [("LV", label::LV_POOL), ("MYO", label::MYO), ("RV", label::RV_POOL)];

fn check_grid(a: &LabelMask, b: &LabelMask) -> Result<()> {
    if !a.geometry().same_grid(b.geometry()) {
        return Err(Error::Geometry("masks must share a grid".into()));
    }
    Ok(())
}

/// `2|A∩B| / (|A| + |B|)`, 1 when both are empty.
pub fn dice(a: &LabelMask, b: &LabelMask, code: u8) -> Result<f64> {
    check_grid(a, b)?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.labels().iter().zip(b.labels()) {
        na += usize::from(x == code);
        nb += usize::from(y == code);
        both += usize::from(x == code && y == code);
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Voxels of `code` with at least one face neighbour outside the set. Axes
/// with a single voxel have no neighbours along them.
pub fn boundary(mask: &LabelMask, code: u8) -> Vec<bool> {
    let geom = mask.geometry();
    let dims = geom.dims();
    let labels = mask.labels();
    (0..labels.len())
        .map(|n| {
            if labels[n] != code {
                return false;
            }
            let v = geom.unravel(n);
            (0..3).any(|a| {
                if dims[a] == 1 {
                    return false;
                }
                [-1isize, 1].iter().any(|&d| {
                    let x = v[a] as isize + d;
                    if x < 0 || x >= dims[a] as isize {
                        return true;
                    }
                    let mut w = v;
                    w[a] = x as usize;
                    labels[geom.linear_index(w[0], w[1], w[2])] != code
                })
            })
        })
        .collect()
}

/// Symmetric Hausdorff distance in mm between the boundaries of `code` in the
/// two masks.
pub fn hausdorff(a: &LabelMask, b: &LabelMask, code: u8) -> Result<f64> {
    check_grid(a, b)?;
    let ba = boundary(a, code);
    let bb = boundary(b, code);
    if !ba.iter().any(|&x| x) || !bb.iter().any(|&x| x) {
        return Err(Error::Degenerate(format!("label {code} is empty in one of the masks")));
    }
    let geom = a.geometry();
    let (dims, spacing) = (geom.dims(), geom.spacing());
    let da = edt_squared(&ba, dims, spacing);
    let db = edt_squared(&bb, dims, spacing);
    let directed = |from: &[bool], to: &[f64]| {
        from.iter()
            .zip(to)
            .filter(|(&f, _)| f)
            .map(|(_, &d)| d)
            .fold(0.0f64, f64::max)
    };
    Ok(directed(&ba, &db).max(directed(&bb, &da)).sqrt())
}

/// Mean `|det − 1|` over voxels of `code`.
pub fn jacobian_stats(dets: &[f64], mask: &LabelMask, code: u8) -> Result<f64> {
    if dets.len() != mask.labels().len() {
        return Err(Error::Config("one determinant per voxel is required".into()));
    }
    let (sum, n) = dets
        .iter()
        .zip(mask.labels())
        .filter(|(_, &l)| l == code)
        .fold((0.0, 0usize), |(s, n), (d, _)| (s + (d - 1.0).abs(), n + 1));
    if n == 0 {
        return Err(Error::Degenerate(format!("label {code} is empty")));
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureMetrics {
    pub structure: String,
    pub dsc_sax: f64,
    pub dsc_4ch: Option<f64>,
    pub jac_abs_dev: Option<f64>,
    pub hd_mm: Option<f64>,
    pub voxels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<StructureMetrics>,
    /// Hausdorff distance averaged over the structures where it is defined.
    pub hd_avg: Option<f64>,
}

impl MetricReport {
    pub fn row(&self, structure: &str) -> Option<&StructureMetrics> {
        self.rows.iter().find(|r| r.structure == structure)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["structure", "dsc_sax", "dsc_4ch", "jac_abs_dev", "hd_mm"])?;
        let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
        for r in &self.rows {
            w.write_record([r.structure.clone(), fmt(r.dsc_sax), opt(r.dsc_4ch), opt(r.jac_abs_dev), opt(r.hd_mm)])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Fixed-width formatting shared by the CSV writers.
pub fn fmt(v: f64) -> String {
    format!("{v:.9}")
}

/// Compares two mask sets of a pair: the warped moving masks against the
/// fixed ones, with determinants sampled at fixed-frame voxel centres.
pub fn evaluate_masks(
    warped_sax: &LabelMask,
    fixed_sax: &LabelMask,
    ch4: Option<(&LabelMask, &LabelMask)>,
    dets: Option<&[f64]>,
) -> Result<MetricReport> {
    let mut rows = Vec::new();
    let mut hd = Vec::new();
    for (name, code) in STRUCTURES {
        let voxels = fixed_sax.count(code);
        if voxels == 0 && warped_sax.count(code) == 0 {
            continue;
        }
        let hd_mm = hausdorff(warped_sax, fixed_sax, code).ok();
        hd.extend(hd_mm);
        rows.push(StructureMetrics {
            structure: name.into(),
            dsc_sax: dice(warped_sax, fixed_sax, code)?,
            dsc_4ch: ch4.map(|(w, f)| dice(w, f, code)).transpose()?,
            jac_abs_dev: match dets {
                Some(d) if voxels > 0 => Some(jacobian_stats(d, fixed_sax, code)?),
                _ => None,
            },
            hd_mm,
            voxels,
        });
    }
    let hd_avg = (!hd.is_empty()).then(|| hd.iter().sum::<f64>() / hd.len() as f64);
    Ok(MetricReport { rows, hd_avg })
}

/// Metrics of a trained pair: SAX and (optionally) 4CH moving masks warped
/// into the fixed frame.
pub fn evaluate_pair(
    result: &RegResult,
    fixed_sax: &Frame,
    moving_sax: &Frame,
    ch4: Option<(&Frame, &Frame)>,
) -> Result<MetricReport> {
    let warped = warp_mask(&moving_sax.mask, &result.params, &result.frame)?;
    let warped_4ch = ch4
        .map(|(fixed, moving)| warp_mask_onto(&moving.mask, &result.params, &result.frame, fixed.mask.geometry()))
        .transpose()?;
    let geom = fixed_sax.mask.geometry();
    let points: Vec<Vec3> = (0..geom.len())
        .map(|n| {
            let [i, j, k] = geom.unravel(n);
            geom.center_of(i, j, k)
        })
        .collect();
    let dets = jac_det_grid(&result.params, &result.frame, &points);
    let pair_4ch = match (&warped_4ch, ch4) {
        (Some(w), Some((fixed, _))) => Some((w, &fixed.mask)),
        _ => None,
    };
    evaluate_masks(&warped, &fixed_sax.mask, pair_4ch, Some(&dets))
}

/// Baseline metrics with no registration (moving masks compared directly).
pub fn evaluate_unregistered(fixed_sax: &Frame, moving_sax: &Frame, ch4: Option<(&Frame, &Frame)>) -> Result<MetricReport> {
    evaluate_masks(&moving_sax.mask, &fixed_sax.mask, ch4.map(|(f, m)| (&m.mask, &f.mask)), None)
}
