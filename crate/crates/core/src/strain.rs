//! Radial and circumferential strain from deformation gradients.
//!
//! Strain is Lagrangian: it is evaluated at end-diastolic voxel centres and
//! projected onto directions built from the end-diastolic mask.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::edt::edt_squared;
use crate::error::{Error, Result};
use crate::metrics::fmt as fmt_num;
use crate::registration::{deformation_gradients, rv_contour_band, RegResult};
use crate::volume::{label, LabelMask, Mat3, Vec3};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrainMeasure {
    /// `½(FᵀF − I)`
    #[default]
    GreenLagrange,
    /// `½(F + Fᵀ) − I`
    Engineering,
}

pub fn green_lagrange(f: &Mat3) -> Mat3 {
    0.5 * (f.transpose() * f - Mat3::identity())
}

pub fn engineering_strain(f: &Mat3) -> Mat3 {
    0.5 * (f + f.transpose()) - Mat3::identity()
}

pub fn strain_tensor(f: &Mat3, measure: StrainMeasure) -> Mat3 {
    match measure {
        StrainMeasure::GreenLagrange => green_lagrange(f),
        StrainMeasure::Engineering => engineering_strain(f),
    }
}

/// `eᵀ E e`
pub fn project_strain(e: &Mat3, dir: &Vec3) -> f64 {
    dir.dot(&(e * dir))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Structure {
    #[serde(rename = "LV")]
    Lv,
    #[serde(rename = "RV")]
    Rv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Radial,
    Circumferential,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Basal,
    Mid,
    Apical,
    Global,
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Structure::Lv => "LV",
            Structure::Rv => "RV",
        })
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Radial => "radial",
            Component::Circumferential => "circumferential",
        })
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Segment::Basal => "basal",
            Segment::Mid => "mid",
            Segment::Apical => "apical",
            Segment::Global => "global",
        })
    }
}

/// Radial and circumferential unit vectors at evaluation voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectionField {
    /// Linear voxel indices on the mask grid.
    pub voxels: Vec<usize>,
    /// Voxel centres in world coordinates.
    pub points: Vec<Vec3>,
    pub slices: Vec<usize>,
    pub radial: Vec<Vec3>,
    pub circumferential: Vec<Vec3>,
    /// Slices that had evaluation voxels but no usable reference.
    pub skipped_slices: usize,
}

impl DirectionField {
    fn empty() -> Self {
        Self {
            voxels: Vec::new(),
            points: Vec::new(),
            slices: Vec::new(),
            radial: Vec::new(),
            circumferential: Vec::new(),
            skipped_slices: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    fn push(&mut self, n: usize, p: Vec3, k: usize, normal: &Vec3, radial: Vec3) {
        let e_r = (radial - normal * normal.dot(&radial)).normalize();
        self.voxels.push(n);
        self.points.push(p);
        self.slices.push(k);
        self.circumferential.push(normal.cross(&e_r));
        self.radial.push(e_r);
    }
}

fn slice_normal(mask: &LabelMask) -> Vec3 {
    mask.geometry().direction().column(2).into_owned().normalize()
}

/// Polar directions about the per-slice LV pool centroid at each MYO voxel.
pub fn lv_polar_dirs(mask: &LabelMask) -> DirectionField {
    let geom = mask.geometry();
    let [nx, ny, nz] = geom.dims();
    let normal = slice_normal(mask);
    let mut field = DirectionField::empty();
    for k in 0..nz {
        let mut sum = Vec3::zeros();
        let mut count = 0usize;
        let mut myo = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                match mask.get(i, j, k) {
                    label::LV_POOL => {
                        sum += geom.center_of(i, j, k);
                        count += 1;
                    }
                    label::MYO => myo.push((geom.linear_index(i, j, k), geom.center_of(i, j, k))),
                    _ => {}
                }
            }
        }
        if myo.is_empty() {
            continue;
        }
        if count == 0 {
            field.skipped_slices += 1;
            continue;
        }
        let c = sum / count as f64;
        for (n, p) in myo {
            let d = p - c;
            if (d - normal * normal.dot(&d)).norm() < 1e-9 {
                continue;
            }
            field.push(n, p, k, &normal, d);
        }
    }
    if field.skipped_slices > 0 {
        log::warn!("{} slice(s) with myocardium but no LV pool skipped", field.skipped_slices);
    }
    field
}

/// Signed in-plane distance to the RV pool boundary per slice, negative inside.
fn rv_signed_distance(mask: &LabelMask) -> Vec<f64> {
    let geom = mask.geometry();
    let [nx, ny, nz] = geom.dims();
    let sp = geom.spacing();
    let plane = nx * ny;
    let mut out = vec![0.0; mask.labels().len()];
    for k in 0..nz {
        let slab = &mask.labels()[k * plane..(k + 1) * plane];
        let inside: Vec<bool> = slab.iter().map(|&l| l == label::RV_POOL).collect();
        if !inside.iter().any(|&x| x) {
            continue;
        }
        let outside: Vec<bool> = inside.iter().map(|&x| !x).collect();
        let to_in = edt_squared(&inside, [nx, ny, 1], [sp[0], sp[1], 1.0]);
        let to_out = edt_squared(&outside, [nx, ny, 1], [sp[0], sp[1], 1.0]);
        let raw: Vec<f64> = (0..plane)
            .map(|p| {
                let d = if inside[p] { -to_out[p].sqrt() } else { to_in[p].sqrt() };
                if d.is_finite() {
                    d
                } else {
                    0.0
                }
            })
            .collect();
        // Smoothing removes the staircase of the voxelized contour.
        let smooth = gaussian_2d(&raw, nx, ny, RV_NORMAL_SIGMA);
        out[k * plane..(k + 1) * plane].copy_from_slice(&smooth);
    }
    out
}

/// In-plane smoothing width for the RV distance map, in voxels.
const RV_NORMAL_SIGMA: f64 = 2.0;

/// Separable Gaussian blur with clamped edges.
fn gaussian_2d(v: &[f64], nx: usize, ny: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|o| (-(o * o) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let pass = |src: &[f64], along_x: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for j in 0..ny {
            for i in 0..nx {
                let mut acc = 0.0;
                for (o, w) in (-radius..=radius).zip(&kernel) {
                    let (ci, cj) = if along_x {
                        ((i as isize + o).clamp(0, nx as isize - 1) as usize, j)
                    } else {
                        (i, (j as isize + o).clamp(0, ny as isize - 1) as usize)
                    };
                    acc += w * src[cj * nx + ci];
                }
                out[j * nx + i] = acc / norm;
            }
        }
        out
    };
    pass(&pass(v, true), false)
}

/// Outward normals of the RV pool contour on its one-voxel boundary band.
pub fn rv_dirs(mask: &LabelMask) -> Result<DirectionField> {
    if mask.count(label::RV_POOL) == 0 {
        return Err(Error::Degenerate("RV pool is empty".into()));
    }
    let geom = mask.geometry();
    let [nx, ny, _] = geom.dims();
    let sp = geom.spacing();
    let dir = geom.direction();
    let normal = slice_normal(mask);
    let sdf = rv_signed_distance(mask);
    let band = rv_contour_band(mask);
    let at = |i: usize, j: usize, k: usize| sdf[geom.linear_index(i, j, k)];
    let mut field = DirectionField::empty();
    for (n, _) in band.iter().enumerate().filter(|(_, &b)| b) {
        let [i, j, k] = geom.unravel(n);
        // Sobel-weighted central differences in index space, then to mm.
        let mut g = [0.0f64; 2];
        for (axis, gv) in g.iter_mut().enumerate() {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for off in -1isize..=1 {
                let w = if off == 0 { 2.0 } else { 1.0 };
                let (pi, pj) = if axis == 0 { (0, off) } else { (off, 0) };
                let (ci, cj) = (i as isize + pi, j as isize + pj);
                if ci < 0 || cj < 0 || ci >= nx as isize || cj >= ny as isize {
                    continue;
                }
                let (ci, cj) = (ci as usize, cj as usize);
                let (lo, hi) = if axis == 0 {
                    (ci.saturating_sub(1), (ci + 1).min(nx - 1))
                } else {
                    (cj.saturating_sub(1), (cj + 1).min(ny - 1))
                };
                if hi == lo {
                    continue;
                }
                let d = if axis == 0 {
                    at(hi, cj, k) - at(lo, cj, k)
                } else {
                    at(ci, hi, k) - at(ci, lo, k)
                };
                acc += w * d / ((hi - lo) as f64 * sp[axis]);
                wsum += w;
            }
            if wsum > 0.0 {
                *gv = acc / wsum;
            }
        }
        let world = dir.column(0) * g[0] + dir.column(1) * g[1];
        if world.norm() < 1e-12 {
            continue;
        }
        field.push(n, geom.center_of(i, j, k), k, &normal, world);
    }
    Ok(field)
}

/// Basal, mid and apical slice indices of the myocardium.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceSegments {
    pub basal: Vec<usize>,
    pub mid: Vec<usize>,
    pub apical: Vec<usize>,
}

impl SliceSegments {
    pub fn segment_of(&self, slice: usize) -> Option<Segment> {
        if self.basal.contains(&slice) {
            Some(Segment::Basal)
        } else if self.mid.contains(&slice) {
            Some(Segment::Mid)
        } else if self.apical.contains(&slice) {
            Some(Segment::Apical)
        } else {
            None
        }
    }
}

/// Splits the slices containing myocardium into thirds along the stack; the
/// remainder goes to the middle third, and the basal end is the one whose
/// third has the larger LV pool area.
pub fn segment_slices(mask: &LabelMask) -> Result<SliceSegments> {
    let [nx, ny, nz] = mask.geometry().dims();
    let plane = nx * ny;
    let slab = |k: usize| &mask.labels()[k * plane..(k + 1) * plane];
    let slices: Vec<usize> = (0..nz).filter(|&k| slab(k).contains(&label::MYO)).collect();
    if slices.len() < 3 {
        return Err(Error::Degenerate(format!(
            "myocardium on {} slice(s); at least 3 are needed for segments",
            slices.len()
        )));
    }
    let third = slices.len() / 3;
    let first = slices[..third].to_vec();
    let last = slices[slices.len() - third..].to_vec();
    let mid = slices[third..slices.len() - third].to_vec();
    let area = |ks: &[usize]| -> usize { ks.iter().map(|&k| slab(k).iter().filter(|&&l| l == label::LV_POOL).count()).sum() };
    let (basal, apical) = if area(&last) > area(&first) { (last, first) } else { (first, last) };
    Ok(SliceSegments { basal, mid, apical })
}

/// Everything strain evaluation needs from the end-diastolic mask.
#[derive(Clone, Debug)]
pub struct StrainSetup {
    pub lv: DirectionField,
    pub rv: Option<DirectionField>,
    pub segments: SliceSegments,
    pub measure: StrainMeasure,
}

impl StrainSetup {
    /// RV directions are included when the mask has an RV pool.
    pub fn from_mask(mask: &LabelMask, measure: StrainMeasure) -> Result<Self> {
        let segments = segment_slices(mask)?;
        let lv = lv_polar_dirs(mask);
        if lv.is_empty() {
            return Err(Error::Degenerate("no LV myocardium voxels with a usable centroid".into()));
        }
        let rv = if mask.count(label::RV_POOL) > 0 { Some(rv_dirs(mask)?) } else { None };
        Ok(Self { lv, rv, segments, measure })
    }

    fn fields(&self) -> Vec<(Structure, &DirectionField)> {
        let mut out = vec![(Structure::Lv, &self.lv)];
        if let Some(rv) = &self.rv {
            out.push((Structure::Rv, rv));
        }
        out
    }

    /// Segment means for one time point given `F` at the evaluation points of
    /// each structure.
    fn means(&self, f_of: &mut dyn FnMut(&[Vec3]) -> Result<Vec<Mat3>>) -> Result<BTreeMap<(Structure, Component, Segment), f64>> {
        let mut out = BTreeMap::new();
        for (structure, field) in self.fields() {
            let fs = f_of(&field.points)?;
            if fs.len() != field.len() {
                return Err(Error::Config("one deformation gradient per point is required".into()));
            }
            let mut sums: BTreeMap<(Component, Segment), (f64, usize)> = BTreeMap::new();
            for (idx, f) in fs.iter().enumerate() {
                let Some(seg) = self.segments.segment_of(field.slices[idx]) else {
                    continue;
                };
                let e = strain_tensor(f, self.measure);
                for (comp, dir) in [
                    (Component::Radial, &field.radial[idx]),
                    (Component::Circumferential, &field.circumferential[idx]),
                ] {
                    let v = project_strain(&e, dir);
                    for s in [seg, Segment::Global] {
                        let acc = sums.entry((comp, s)).or_insert((0.0, 0));
                        acc.0 += v;
                        acc.1 += 1;
                    }
                }
            }
            for ((comp, seg), (sum, n)) in sums {
                out.insert((structure, comp, seg), sum / n as f64);
            }
        }
        Ok(out)
    }

    /// Curves over `n_times` time points; `f_at(t, points)` supplies `F`.
    pub fn curves_with(
        &self,
        n_times: usize,
        mut f_at: impl FnMut(usize, &[Vec3]) -> Result<Vec<Mat3>>,
    ) -> Result<Vec<StrainCurve>> {
        let mut table: BTreeMap<(Structure, Component, Segment), Vec<f64>> = BTreeMap::new();
        for t in 0..n_times {
            let means = self.means(&mut |pts| f_at(t, pts))?;
            for (key, v) in means {
                if !v.is_finite() {
                    return Err(Error::Numerical {
                        iteration: t,
                        term: format!("{} {} {}", key.0, key.1, key.2),
                        msg: format!("strain value {v}"),
                    });
                }
                table.entry(key).or_default().push(v);
            }
        }
        Ok(table
            .into_iter()
            .filter(|(_, v)| v.len() == n_times)
            .map(|((structure, component, segment), values)| StrainCurve {
                structure,
                component,
                segment,
                times: (0..n_times).collect(),
                values,
            })
            .collect())
    }
}

/// Per-time segment-mean strain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrainCurve {
    pub structure: Structure,
    pub component: Component,
    pub segment: Segment,
    pub times: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeakStrain {
    pub structure: Structure,
    pub component: Component,
    pub segment: Segment,
    pub peak: f64,
    pub time_index: usize,
}

/// Curves from trained pairs. Time points without a result (the reference
/// frame) use the identity.
pub fn strain_curves(results: &[RegResult], n_times: usize, setup: &StrainSetup) -> Result<Vec<StrainCurve>> {
    let by_time: BTreeMap<usize, &RegResult> = results.iter().map(|r| (r.moving_index, r)).collect();
    setup.curves_with(n_times, |t, pts| {
        Ok(match by_time.get(&t) {
            Some(r) => deformation_gradients(&r.params, &r.frame, pts),
            None => vec![Mat3::identity(); pts.len()],
        })
    })
}

/// Signed extremum: maximum for radial, minimum for circumferential; ties go
/// to the earliest time.
pub fn peak_strain(curve: &StrainCurve) -> Result<PeakStrain> {
    if curve.values.is_empty() {
        return Err(Error::Degenerate("empty strain curve".into()));
    }
    let better = |a: f64, b: f64| match curve.component {
        Component::Radial => a > b,
        Component::Circumferential => a < b,
    };
    let mut best = 0;
    for (i, &v) in curve.values.iter().enumerate() {
        if better(v, curve.values[best]) {
            best = i;
        }
    }
    Ok(PeakStrain {
        structure: curve.structure,
        component: curve.component,
        segment: curve.segment,
        peak: curve.values[best],
        time_index: curve.times[best],
    })
}

pub fn write_curves_csv(path: impl AsRef<Path>, curves: &[StrainCurve]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["time_index", "structure", "component", "segment", "value"])?;
    for c in curves {
        for (t, v) in c.times.iter().zip(&c.values) {
            w.write_record([
                t.to_string(),
                c.structure.to_string(),
                c.component.to_string(),
                c.segment.to_string(),
                fmt_num(*v),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_peaks_csv(path: impl AsRef<Path>, peaks: &[PeakStrain]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["structure", "component", "segment", "peak", "time_index"])?;
    for p in peaks {
        w.write_record([
            p.structure.to_string(),
            p.component.to_string(),
            p.segment.to_string(),
            fmt_num(p.peak),
            p.time_index.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
