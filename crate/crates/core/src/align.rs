//! Rigid in-plane alignment of short-axis slices against the long-axis views.
//!
//! Each slice gets a translation `(tx, ty)` in millimetres along the first two
//! axes of the stack. Applying translations moves slice content by `+t`; the
//! aligned stack is therefore sampled at `x − t`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{ncc, nmi_parzen_in_range, soft_dice};
use crate::optim::AdamState;
use crate::volume::{label, Frame, Geometry, LabelMask, PlaneImage, Vec3, ViewSet, Volume3D};

/// Per-slice in-plane translations in mm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceTranslations {
    shifts: Vec<[f64; 2]>,
}

impl SliceTranslations {
    pub fn new(shifts: Vec<[f64; 2]>) -> Result<Self> {
        if shifts.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite slice translation".into()));
        }
        Ok(Self { shifts })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            shifts: vec![[0.0; 2]; n],
        }
    }

    pub fn shifts(&self) -> &[[f64; 2]] {
        &self.shifts
    }

    pub fn len(&self) -> usize {
        self.shifts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shifts.is_empty()
    }

    pub fn negated(&self) -> Self {
        Self {
            shifts: self.shifts.iter().map(|s| [-s[0], -s[1]]).collect(),
        }
    }

    /// Writes `slice_index,tx_mm,ty_mm`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["slice_index", "tx_mm", "ty_mm"])?;
        for (k, s) in self.shifts.iter().enumerate() {
            w.write_record([k.to_string(), s[0].to_string(), s[1].to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path.as_ref())?;
        let mut rows: Vec<(usize, [f64; 2])> = Vec::new();
        for rec in r.deserialize() {
            let (k, tx, ty): (usize, f64, f64) = rec?;
            rows.push((k, [tx, ty]));
        }
        rows.sort_by_key(|r| r.0);
        if rows.iter().enumerate().any(|(i, r)| r.0 != i) {
            return Err(Error::Config("shift file must list every slice index once".into()));
        }
        Self::new(rows.into_iter().map(|r| r.1).collect())
    }
}

/// How the NMI term is scaled against the NCC term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "value")]
pub enum NmiScale {
    /// `s = |NCC₀| / (|NMI₀| + 1e-12)` at iteration 0, then frozen.
    Auto,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub iterations: usize,
    pub lr: f64,
    pub nmi_scale: NmiScale,
    pub nmi_bins: usize,
    pub nmi_sigma: f64,
    /// Bound on each translation component, mm.
    pub max_shift: f64,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr: 0.01,
            nmi_scale: NmiScale::Auto,
            nmi_bins: 32,
            nmi_sigma: 1.0,
            max_shift: 20.0,
            seed: 0,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || !(self.lr > 0.0) || !(self.max_shift >= 0.0) {
            return Err(Error::Config("alignment needs iterations ≥ 1, lr > 0, max_shift ≥ 0".into()));
        }
        Ok(())
    }
}

/// Bilinear lookup in one slice at continuous in-plane index `(x, y)`.
/// Returns value and index-space gradient, or `None` outside.
fn bilinear(data: &[f32], nx: usize, ny: usize, k: usize, x: f64, y: f64) -> Option<(f64, f64, f64)> {
    const TOL: f64 = 1e-9;
    let locate = |v: f64, n: usize| -> Option<(usize, f64)> {
        if n == 1 {
            return Some((0, 0.0));
        }
        let last = (n - 1) as f64;
        if !(v >= -TOL && v <= last + TOL) {
            return None;
        }
        let v = v.clamp(0.0, last);
        let b = (v.floor() as usize).min(n - 2);
        Some((b, v - b as f64))
    };
    let (i0, fx) = locate(x, nx)?;
    let (j0, fy) = locate(y, ny)?;
    let di = usize::from(nx > 1);
    let dj = if ny > 1 { nx } else { 0 };
    let base = k * nx * ny + j0 * nx + i0;
    let c00 = data[base] as f64;
    let c10 = data[base + di] as f64;
    let c01 = data[base + dj] as f64;
    let c11 = data[base + di + dj] as f64;
    let c0 = c00 + fx * (c10 - c00);
    let c1 = c01 + fx * (c11 - c01);
    let v = c0 + fy * (c1 - c0);
    let gx = (1.0 - fy) * (c10 - c00) + fy * (c11 - c01);
    let gy = c1 - c0;
    Some((v, gx, gy))
}

/// Index-space offset of a translation along the slice axes.
fn index_shift(geom: &Geometry, t: &[f64; 2]) -> (f64, f64) {
    let s = geom.spacing();
    (t[0] / s[0], t[1] / s[1])
}

/// Where each long-axis pixel falls in the stack: continuous in-plane index
/// and the two contributing slices with their blend weights.
#[derive(Clone, Debug)]
struct PixelMap {
    x: f64,
    y: f64,
    slices: [(usize, f64); 2],
}

fn map_plane(stack: &Geometry, plane: &Geometry) -> Vec<Option<PixelMap>> {
    let nz = stack.dims()[2];
    (0..plane.len())
        .map(|n| {
            let [i, j, k] = plane.unravel(n);
            let idx = stack.world_to_voxel(&plane.center_of(i, j, k));
            let kz = idx.z;
            let tol = 1e-9;
            if nz == 1 {
                return Some(PixelMap {
                    x: idx.x,
                    y: idx.y,
                    slices: [(0, 1.0), (0, 0.0)],
                });
            }
            if !(kz >= -tol && kz <= (nz - 1) as f64 + tol) {
                return None;
            }
            let kz = kz.clamp(0.0, (nz - 1) as f64);
            let k0 = (kz.floor() as usize).min(nz - 2);
            let f = kz - k0 as f64;
            Some(PixelMap {
                x: idx.x,
                y: idx.y,
                slices: [(k0, 1.0 - f), (k0 + 1, f)],
            })
        })
        .collect()
}

/// Warped value at one pixel with `d value / d t` for the contributing slices.
fn warp_pixel(data: &[f32], geom: &Geometry, trans: &SliceTranslations, m: &PixelMap) -> Option<(f64, [(usize, f64, f64); 2])> {
    let [nx, ny, _] = geom.dims();
    let s = geom.spacing();
    let mut v = 0.0;
    let mut grads = [(0, 0.0, 0.0); 2];
    for (slot, &(k, w)) in m.slices.iter().enumerate() {
        let (dx, dy) = index_shift(geom, &trans.shifts[k]);
        let (val, gx, gy) = bilinear(data, nx, ny, k, m.x - dx, m.y - dy)?;
        v += w * val;
        grads[slot] = (k, -w * gx / s[0], -w * gy / s[1]);
    }
    Some((v, grads))
}

/// Samples the translated stack at every pixel of a long-axis plane. Each
/// pixel blends its two neighbouring slices linearly in the slice index, each
/// slice sampled bilinearly at its own inverse shift.
pub fn warp_stack_to_lax(sax: &Volume3D, trans: &SliceTranslations, plane: &Geometry) -> Result<PlaneImage> {
    check_count(sax.geometry(), trans)?;
    let maps = map_plane(sax.geometry(), plane);
    let mut values = Vec::with_capacity(maps.len());
    let mut inside = Vec::with_capacity(maps.len());
    for m in &maps {
        match m.as_ref().and_then(|m| warp_pixel(sax.data(), sax.geometry(), trans, m)) {
            Some((v, _)) => {
                values.push(v);
                inside.push(true);
            }
            None => {
                values.push(0.0);
                inside.push(false);
            }
        }
    }
    Ok(PlaneImage {
        geom: plane.clone(),
        values,
        inside,
    })
}

fn check_count(geom: &Geometry, trans: &SliceTranslations) -> Result<()> {
    if trans.len() != geom.dims()[2] {
        return Err(Error::Config(format!(
            "{} translations for {} slices",
            trans.len(),
            geom.dims()[2]
        )));
    }
    Ok(())
}

/// Resamples every slice in-plane by its translation (bilinear; zero outside).
pub fn apply_translations(vol: &Volume3D, trans: &SliceTranslations) -> Result<Volume3D> {
    let geom = vol.geometry();
    check_count(geom, trans)?;
    let [nx, ny, nz] = geom.dims();
    let mut out = Vec::with_capacity(geom.len());
    for k in 0..nz {
        let (dx, dy) = index_shift(geom, &trans.shifts[k]);
        for j in 0..ny {
            for i in 0..nx {
                let v = bilinear(vol.data(), nx, ny, k, i as f64 - dx, j as f64 - dy).map_or(0.0, |r| r.0);
                out.push(v as f32);
            }
        }
    }
    Volume3D::new(geom.clone(), out)
}

/// Label counterpart of [`apply_translations`] (nearest neighbour; background outside).
pub fn apply_translations_mask(mask: &LabelMask, trans: &SliceTranslations) -> Result<LabelMask> {
    let geom = mask.geometry();
    check_count(geom, trans)?;
    let [nx, ny, nz] = geom.dims();
    let mut out = Vec::with_capacity(geom.len());
    for k in 0..nz {
        let (dx, dy) = index_shift(geom, &trans.shifts[k]);
        for j in 0..ny {
            for i in 0..nx {
                let x = (i as f64 - dx).round();
                let y = (j as f64 - dy).round();
                let l = if x >= 0.0 && y >= 0.0 && x < nx as f64 && y < ny as f64 {
                    mask.get(x as usize, y as usize, k)
                } else {
                    label::BACKGROUND
                };
                out.push(l);
            }
        }
    }
    LabelMask::new(geom.clone(), out)
}

/// Per-view values of the four alignment terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ViewTerms {
    /// `−NCC` over the myocardium.
    pub ncc: f64,
    /// `−s · NMI` over the myocardium.
    pub nmi: f64,
    /// `1 − Dice` of the LV blood pool.
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignLoss {
    pub total: f64,
    /// Terms for the 2CH and 4CH references, in that order.
    pub views: Vec<ViewTerms>,
    /// Unscaled `−NMI` per view (for choosing the scale).
    pub raw_nmi: Vec<f64>,
    pub grad: Vec<[f64; 2]>,
}

/// Everything about one reference view that does not depend on the shifts.
struct Reference<'a> {
    frame: &'a Frame,
    maps: Vec<Option<PixelMap>>,
}

/// Precomputed inputs of the alignment objective.
pub struct AlignProblem<'a> {
    sax: &'a Frame,
    lv_indicator: Volume3D,
    refs: Vec<Reference<'a>>,
    bins: usize,
    sigma: f64,
    /// Joint intensity range of stack and references, fixed for the NMI.
    range: (f64, f64),
}

impl<'a> AlignProblem<'a> {
    /// `refs` are the long-axis frames (2CH, 4CH) at the same time point.
    pub fn new(sax: &'a Frame, refs: &[&'a Frame], cfg: &AlignConfig) -> Result<Self> {
        let mut out = Vec::new();
        for (v, f) in refs.iter().enumerate() {
            if f.mask.count(label::MYO) == 0 {
                return Err(Error::Config(format!("reference view {v} has an empty myocardium mask")));
            }
            out.push(Reference {
                frame: f,
                maps: map_plane(sax.image.geometry(), f.image.geometry()),
            });
        }
        let range = std::iter::once(sax)
            .chain(refs.iter().copied())
            .flat_map(|f| f.image.data().iter())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v as f64), hi.max(v as f64))
            });
        Ok(Self {
            range,
            sax,
            lv_indicator: sax.mask.indicator(label::LV_POOL),
            refs: out,
            bins: cfg.nmi_bins,
            sigma: cfg.nmi_sigma,
        })
    }

    pub fn num_slices(&self) -> usize {
        self.sax.image.geometry().dims()[2]
    }

    /// Objective and its gradient with respect to every translation.
    pub fn loss(&self, trans: &SliceTranslations, nmi_scale: f64) -> Result<AlignLoss> {
        let geom = self.sax.image.geometry();
        check_count(geom, trans)?;
        let mut grad = vec![[0.0; 2]; trans.len()];
        let mut views = Vec::new();
        let mut raw_nmi = Vec::new();
        let mut total = 0.0;
        let accumulate = |grad: &mut Vec<[f64; 2]>, g: &[(usize, f64, f64); 2], scale: f64| {
            for &(k, dx, dy) in g {
                grad[k][0] += scale * dx;
                grad[k][1] += scale * dy;
            }
        };
        for r in &self.refs {
            let lax_img = r.frame.image.data();
            let lax_mask = r.frame.mask.labels();
            // Image terms over the long-axis myocardium.
            let mut a = Vec::new();
            let mut b = Vec::new();
            let mut gb = Vec::new();
            // Segmentation term over every pixel covered by the stack.
            let mut p = Vec::new();
            let mut q = Vec::new();
            let mut gp = Vec::new();
            for (n, m) in r.maps.iter().enumerate() {
                let Some(m) = m else { continue };
                let Some((v, g)) = warp_pixel(self.sax.image.data(), geom, trans, m) else {
                    continue;
                };
                let Some((lv, glv)) = warp_pixel(self.lv_indicator.data(), geom, trans, m) else {
                    continue;
                };
                if lax_mask[n] == label::MYO {
                    a.push(lax_img[n] as f64);
                    b.push(v);
                    gb.push(g);
                }
                p.push(lv);
                q.push(if lax_mask[n] == label::LV_POOL { 1.0 } else { 0.0 });
                gp.push(glv);
            }
            let c = ncc(&a, &b)?;
            let nm = nmi_parzen_in_range(&a, &b, self.bins, self.sigma, self.range)?;
            let d = soft_dice(&p, &q)?;
            for (i, g) in gb.iter().enumerate() {
                accumulate(&mut grad, g, -c.grad_b[i] - nmi_scale * nm.grad_b[i]);
            }
            for (i, g) in gp.iter().enumerate() {
                accumulate(&mut grad, g, -d.grad_a[i]);
            }
            let terms = ViewTerms {
                ncc: -c.value,
                nmi: -nmi_scale * nm.value,
                dice: 1.0 - d.value,
            };
            total += terms.ncc + terms.nmi + terms.dice;
            views.push(terms);
            raw_nmi.push(-nm.value);
        }
        Ok(AlignLoss {
            total,
            views,
            raw_nmi,
            grad,
        })
    }

    /// The automatic NMI scale at the given translations.
    pub fn auto_scale(&self, trans: &SliceTranslations) -> Result<f64> {
        let l = self.loss(trans, 1.0)?;
        let ncc_sum: f64 = l.views.iter().map(|v| v.ncc).sum();
        let nmi_sum: f64 = l.raw_nmi.iter().sum();
        Ok(ncc_sum.abs() / (nmi_sum.abs() + 1e-12))
    }
}

/// Convenience wrapper around [`AlignProblem::loss`].
pub fn alignment_loss(
    trans: &SliceTranslations,
    sax: &Frame,
    refs: &[&Frame],
    cfg: &AlignConfig,
    nmi_scale: f64,
) -> Result<AlignLoss> {
    AlignProblem::new(sax, refs, cfg)?.loss(trans, nmi_scale)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignResult {
    pub translations: SliceTranslations,
    pub loss_trace: Vec<f64>,
    pub nmi_scale: f64,
}

/// Optimizes per-slice translations with Adam at the end-diastolic frame.
pub fn align_stack(views: &ViewSet, cfg: &AlignConfig) -> Result<AlignResult> {
    cfg.validate()?;
    let ch2 = views
        .ch2
        .as_ref()
        .ok_or_else(|| Error::Config("slice alignment needs the 2CH view".into()))?;
    let t = views.sax.ed_index();
    align_frames(views.sax.frame(t), &[ch2.frame(t), views.ch4.frame(t)], cfg)
}

/// [`align_stack`] on explicit frames.
pub fn align_frames(sax: &Frame, refs: &[&Frame], cfg: &AlignConfig) -> Result<AlignResult> {
    cfg.validate()?;
    let problem = AlignProblem::new(sax, refs, cfg)?;
    let nz = problem.num_slices();
    let mut trans = SliceTranslations::zeros(nz);
    let scale = match cfg.nmi_scale {
        NmiScale::Auto => problem.auto_scale(&trans)?,
        NmiScale::Fixed(s) => s,
    };
    let mut adam = AdamState::new(&[2 * nz]);
    let names = ["slice translations".to_string()];
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut flat = vec![0.0f64; 2 * nz];
    for it in 0..cfg.iterations {
        let l = problem.loss(&trans, scale)?;
        if !l.total.is_finite() {
            return Err(Error::Numerical {
                iteration: it,
                term: "alignment loss".into(),
                msg: format!("loss = {}", l.total),
            });
        }
        trace.push(l.total);
        let g: Vec<f64> = l.grad.iter().flatten().copied().collect();
        adam.step(&names, &mut [&mut flat[..]], &[&g[..]], cfg.lr)
            .map_err(|e| Error::Numerical {
                iteration: it,
                term: "alignment gradient".into(),
                msg: e.to_string(),
            })?;
        for v in flat.iter_mut() {
            *v = v.clamp(-cfg.max_shift, cfg.max_shift);
        }
        trans = SliceTranslations::new(flat.chunks(2).map(|c| [c[0], c[1]]).collect())?;
    }
    log::debug!(
        "alignment: loss {:.5} -> {:.5}",
        trace.first().copied().unwrap_or(f64::NAN),
        trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(AlignResult {
        translations: trans,
        loss_trace: trace,
        nmi_scale: scale,
    })
}

/// World-space displacement of slice content for a translation.
pub fn world_shift(geom: &Geometry, t: &[f64; 2]) -> Vec3 {
    geom.direction().column(0) * t[0] + geom.direction().column(1) * t[1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::CineSeries;

    fn pattern_stack() -> Volume3D {
        let g = Geometry::axis_aligned([40, 36, 5], [1.5, 2.0, 6.0], [-30.0, -35.0, -12.0]).unwrap();
        Volume3D::from_fn(g, |p| ((p.x * 0.21).sin() + (p.y * 0.17).cos() + 0.01 * p.z) as f32).unwrap()
    }

    fn oblique_plane() -> Geometry {
        // Vertical plane containing z, rotated 30° about z.
        let a = 30f64.to_radians();
        let u = Vec3::new(a.cos(), a.sin(), 0.0);
        let w = Vec3::z();
        let n = u.cross(&w);
        let dir = crate::volume::Mat3::from_columns(&[u, w, n]);
        let origin = -15.0 * u - 10.0 * w;
        Geometry::new([30, 20, 1], [1.0, 1.0, 1.0], origin.into(), dir).unwrap()
    }

    #[test]
    fn zero_shift_matches_plain_resampling() {
        let v = pattern_stack();
        let plane = oblique_plane();
        let w = warp_stack_to_lax(&v, &SliceTranslations::zeros(5), &plane).unwrap();
        let r = v.resample_to(&plane);
        assert_eq!(w.inside, r.inside);
        for (a, b) in w.values.iter().zip(&r.values) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_shift_moves_the_pattern() {
        let v = pattern_stack();
        let plane = oblique_plane();
        let t = [2.5, -1.5];
        let w = warp_stack_to_lax(&v, &SliceTranslations::new(vec![t; 5]).unwrap(), &plane).unwrap();
        // Oracle: the pattern is separable in z, so the warped value equals the
        // unshifted stack sampled at x − t.
        let mut checked = 0;
        for n in 0..plane.len() {
            let [i, j, _] = plane.unravel(n);
            let p = plane.center_of(i, j, 0);
            let q = p - Vec3::new(t[0], t[1], 0.0);
            let (expect, inside) = v.sample_trilinear(&q);
            if inside && w.inside[n] && (i > 2 && i < 27) {
                assert!((w.values[n] - expect).abs() < 1e-5, "{} vs {}", w.values[n], expect);
                checked += 1;
            }
        }
        assert!(checked > 200);
    }

    #[test]
    fn translations_round_trip_and_lattice_shift() {
        let v = pattern_stack();
        assert_eq!(apply_translations(&v, &SliceTranslations::zeros(5)).unwrap(), v);
        // One voxel in x is 1.5 mm.
        let shifted = apply_translations(&v, &SliceTranslations::new(vec![[3.0, 2.0]; 5]).unwrap()).unwrap();
        for k in 0..5 {
            for j in 1..35 {
                for i in 2..40 {
                    assert_eq!(shifted.get(i, j, k), v.get(i - 2, j - 1, k));
                }
            }
        }
        // Smooth content: two bilinear passes stay within 1e-2.
        let smooth = Volume3D::from_fn(v.geometry().clone(), |p| ((p.x * 0.05).sin() + (p.y * 0.04).cos()) as f32).unwrap();
        let t = SliceTranslations::new(vec![[0.7, -1.3], [0.2, 0.4], [-1.1, 0.0], [0.0, 0.9], [1.4, -0.6]]).unwrap();
        let back = apply_translations(&apply_translations(&smooth, &t).unwrap(), &t.negated()).unwrap();
        for k in 0..5 {
            for j in 3..33 {
                for i in 3..37 {
                    assert!((back.get(i, j, k) - smooth.get(i, j, k)).abs() < 1e-2);
                }
            }
        }
    }

    #[test]
    fn mask_translation_keeps_labels() {
        let g = Geometry::axis_aligned([10, 10, 3], [1.0; 3], [0.0; 3]).unwrap();
        let m = LabelMask::from_fn(g, |p| if p.x < 3.0 { 1 } else if p.y < 4.0 { 2 } else { 0 }).unwrap();
        let t = SliceTranslations::new(vec![[1.4, -2.2], [0.0, 0.0], [3.0, 1.0]]).unwrap();
        let out = apply_translations_mask(&m, &t).unwrap();
        assert!(out.labels().iter().all(|l| [0, 1, 2].contains(l)));
        assert_eq!(out.get(5, 5, 1), m.get(5, 5, 1));
        assert_eq!(out.get(5, 5, 2), m.get(2, 4, 2));
    }

    #[test]
    fn shifts_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = SliceTranslations::new(vec![[0.1, -2.5], [3.0, 1.0 / 3.0]]).unwrap();
        let p = dir.path().join("shifts.csv");
        t.write_csv(&p).unwrap();
        assert_eq!(SliceTranslations::read_csv(&p).unwrap(), t);
    }

    fn phantom_frames() -> (crate::volume::ViewSet, crate::phantom::GroundTruth) {
        let cfg = crate::phantom::PhantomConfig {
            dims: [48, 48, 8],
            spacing: [2.5, 2.5, 11.0],
            phases: 3,
            ..Default::default()
        };
        crate::phantom::make_phantom(&cfg).unwrap()
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let (views, _) = phantom_frames();
        let t = views.sax.ed_index();
        let ch2 = views.ch2.as_ref().unwrap().frame(t);
        let refs = [ch2, views.ch4.frame(t)];
        let cfg = AlignConfig::default();
        let problem = AlignProblem::new(views.sax.frame(t), &refs, &cfg).unwrap();
        let trans = SliceTranslations::new((0..8).map(|k| [0.3 * k as f64 - 1.0, 0.77 - 0.2 * k as f64]).collect()).unwrap();
        let l = problem.loss(&trans, 0.7).unwrap();
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for k in 1..7 {
            for c in 0..2 {
                let mut plus = trans.shifts().to_vec();
                let mut minus = trans.shifts().to_vec();
                plus[k][c] += h;
                minus[k][c] -= h;
                let lp = problem.loss(&SliceTranslations::new(plus).unwrap(), 0.7).unwrap().total;
                let lm = problem.loss(&SliceTranslations::new(minus).unwrap(), 0.7).unwrap().total;
                let fd = (lp - lm) / (2.0 * h);
                let an = l.grad[k][c];
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn auto_scale_balances_terms() {
        let (views, _) = phantom_frames();
        let t = views.sax.ed_index();
        let ch2 = views.ch2.as_ref().unwrap().frame(t);
        let cfg = AlignConfig::default();
        let problem = AlignProblem::new(views.sax.frame(t), &[ch2, views.ch4.frame(t)], &cfg).unwrap();
        let zero = SliceTranslations::zeros(8);
        let s = problem.auto_scale(&zero).unwrap();
        let l = problem.loss(&zero, s).unwrap();
        let ratio = l.views.iter().map(|v| v.nmi).sum::<f64>().abs() / l.views.iter().map(|v| v.ncc).sum::<f64>().abs();
        assert!((0.5..=2.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn empty_reference_myocardium_is_rejected() {
        let (views, _) = phantom_frames();
        let f = views.ch4.frame(0);
        let empty = Frame::new(f.image.clone(), LabelMask::new(f.mask.geometry().clone(), vec![0; f.mask.labels().len()]).unwrap()).unwrap();
        let err = AlignProblem::new(views.sax.frame(0), &[&empty], &AlignConfig::default()).err().unwrap();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn aligned_phantom_sits_near_the_minimum() {
        let (views, _) = phantom_frames();
        let t = views.sax.ed_index();
        let ch2 = views.ch2.as_ref().unwrap().frame(t);
        let cfg = AlignConfig::default();
        let problem = AlignProblem::new(views.sax.frame(t), &[ch2, views.ch4.frame(t)], &cfg).unwrap();
        let s = problem.auto_scale(&SliceTranslations::zeros(8)).unwrap();
        let at_zero = problem.loss(&SliceTranslations::zeros(8), s).unwrap().total;
        let mut best = f64::INFINITY;
        for dx in [-2.0, -1.0, 0.0, 1.0, 2.0] {
            for dy in [-2.0, -1.0, 0.0, 1.0, 2.0] {
                let l = problem.loss(&SliceTranslations::new(vec![[dx, dy]; 8]).unwrap(), s).unwrap().total;
                best = best.min(l);
            }
        }
        assert!(at_zero - best <= 1e-3, "zero {at_zero}, best {best}");
    }

    #[test]
    fn recovers_a_single_slice_shift() {
        let (views, _) = phantom_frames();
        let t = views.sax.ed_index();
        let mut shifts = vec![[0.0; 2]; 8];
        shifts[4] = [3.0, -2.0];
        let inj = SliceTranslations::new(shifts).unwrap();
        let f = views.sax.frame(t);
        let moved = Frame::new(apply_translations(&f.image, &inj).unwrap(), apply_translations_mask(&f.mask, &inj).unwrap()).unwrap();
        let ch2 = views.ch2.as_ref().unwrap().frame(t);
        let cfg = AlignConfig {
            iterations: 600,
            ..Default::default()
        };
        let r = align_frames(&moved, &[ch2, views.ch4.frame(t)], &cfg).unwrap();
        let est = r.translations.shifts()[4];
        assert!((est[0] + 3.0).hypot(est[1] - 2.0) < 1.0, "{est:?}");
        assert!(r.loss_trace.last().unwrap() <= &r.loss_trace[0]);
        let _ = CineSeries::new;
    }
}
