//! Synthetic cine acquisition with a closed-form, area-preserving contraction.
//!
//! The left ventricle is a tapered cylinder along world z centred on the
//! z axis. At phase `t` a material point at end-diastolic radius `R` (inside
//! the wall) moves to `r = sqrt(R² − c(t))` in its slice plane, so every
//! annulus keeps its area and `det F = 1` in the myocardium. The blood pool is
//! scaled uniformly; beyond `taper_radius` the contraction fades out with a
//! quintic over `taper_width`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::align::{apply_translations, SliceTranslations};
use crate::error::{Error, Result};
use crate::volume::{label, CineSeries, Frame, Geometry, LabelMask, Mat3, Vec3, ViewSet, Volume3D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// Short-axis grid size.
    pub dims: [usize; 3],
    /// Short-axis voxel spacing in mm.
    pub spacing: [f64; 3],
    /// End-diastolic inner and outer wall radii at the base, mm.
    pub r_in: f64,
    pub r_out: f64,
    /// Radius scale at the apex relative to the base (linear along the axis).
    pub apex_scale: f64,
    /// Half length of the ventricle along z, mm; the base sits at `-half_length`.
    pub half_length: f64,
    /// Peak contraction `c_max` in mm².
    pub c_max: f64,
    pub phases: usize,
    pub texture_seed: u64,
    pub texture_waves: usize,
    pub texture_min_wavelength: f64,
    pub texture_max_wavelength: f64,
    pub texture_amplitude: f64,
    pub rv_enable: bool,
    pub taper_radius: f64,
    pub taper_width: f64,
    /// Pixel spacing of the long-axis planes, mm.
    pub lax_spacing: f64,
    /// Standard deviation of additive Gaussian intensity noise (0 disables).
    pub noise_sigma: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [64, 64, 12],
            spacing: [2.0, 2.0, 8.0],
            r_in: 20.0,
            r_out: 30.0,
            apex_scale: 0.75,
            half_length: 40.0,
            c_max: 120.0,
            phases: 10,
            texture_seed: 1,
            texture_waves: 24,
            texture_min_wavelength: 8.0,
            texture_max_wavelength: 20.0,
            texture_amplitude: 0.15,
            rv_enable: true,
            taper_radius: 36.0,
            taper_width: 10.0,
            lax_spacing: 2.0,
            noise_sigma: 0.0,
        }
    }
}

/// Geometry of the right-ventricular crescent, relative to the local LV scale.
const RV_CENTER_OFFSET: f64 = 12.0;
const RV_RADIUS: f64 = 16.0;
const RV_GAP: f64 = 3.0;
/// Width of the smooth intensity transitions at structure boundaries, mm.
const EDGE_WIDTH: f64 = 0.75;

const INTENSITY_BACKGROUND: f64 = 0.5;
const INTENSITY_MYO: f64 = 0.25;
const INTENSITY_LV: f64 = 1.0;
const INTENSITY_RV: f64 = 0.9;

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.r_in > 0.0 && self.r_in < self.r_out && self.r_out < self.taper_radius) {
            return bad(format!(
                "need 0 < r_in < r_out < taper_radius, got {} / {} / {}",
                self.r_in, self.r_out, self.taper_radius
            ));
        }
        if !(self.apex_scale > 0.0 && self.apex_scale <= 1.0) {
            return bad(format!("apex_scale must be in (0, 1], got {}", self.apex_scale));
        }
        let r_in_min = self.r_in * self.apex_scale;
        if !(self.c_max >= 0.0 && self.c_max < r_in_min * r_in_min) {
            return bad(format!(
                "c_max must be in [0, {}) (smallest inner radius squared), got {}",
                r_in_min * r_in_min,
                self.c_max
            ));
        }
        if self.phases < 3 {
            return bad(format!("need at least 3 phases, got {}", self.phases));
        }
        if self.taper_width <= 0.0 || self.half_length <= 0.0 || self.lax_spacing <= 0.0 {
            return bad("taper_width, half_length and lax_spacing must be positive".into());
        }
        if self.texture_min_wavelength <= 0.0 || self.texture_max_wavelength < self.texture_min_wavelength {
            return bad("invalid texture wavelength range".into());
        }
        if self.noise_sigma < 0.0 {
            return bad("noise_sigma must be non-negative".into());
        }
        Ok(())
    }

    pub fn ed_index(&self) -> usize {
        self.phases - 1
    }

    pub fn es_index(&self) -> usize {
        (self.phases - 1) / 2
    }

    /// Contraction `c(t) = c_max sin²(π t / (T − 1))`.
    pub fn contraction(&self, t: usize) -> f64 {
        if t % (self.phases - 1) == 0 {
            return 0.0;
        }
        let s = (PI * t as f64 / (self.phases - 1) as f64).sin();
        self.c_max * s * s
    }

    /// Radius scale at height `z`: 1 at the base, `apex_scale` at the apex.
    pub fn radius_scale(&self, z: f64) -> f64 {
        let f = ((z + self.half_length) / (2.0 * self.half_length)).clamp(0.0, 1.0);
        1.0 + (self.apex_scale - 1.0) * f
    }

    pub fn sax_geometry(&self) -> Result<Geometry> {
        let origin = [0, 1, 2].map(|a| -0.5 * (self.dims[a] - 1) as f64 * self.spacing[a]);
        Geometry::axis_aligned(self.dims, self.spacing, origin)
    }

    /// Long-axis plane containing the ventricle axis; `four_chamber` selects the
    /// plane `y = 0` (four-chamber, both ventricles) or else `x = 0`.
    fn lax_geometry(&self, four_chamber: bool) -> Result<Geometry> {
        let s = self.lax_spacing;
        let (in_plane_extent, in_plane_axis) = if four_chamber {
            ((self.dims[0] - 1) as f64 * self.spacing[0], Vec3::x())
        } else {
            ((self.dims[1] - 1) as f64 * self.spacing[1], Vec3::y())
        };
        let z_extent = (self.dims[2] - 1) as f64 * self.spacing[2];
        let nh = (in_plane_extent / s).round() as usize + 1;
        let nv = (z_extent / s).round() as usize + 1;
        let up = Vec3::z();
        let normal = in_plane_axis.cross(&up);
        let direction = Mat3::from_columns(&[in_plane_axis, up, normal]);
        let corner = -0.5 * (nh - 1) as f64 * s * in_plane_axis - 0.5 * (nv - 1) as f64 * s * up;
        Geometry::new([nh, nv, 1], [s, s, 1.0], corner.into(), direction)
    }

    pub fn ch4_geometry(&self) -> Result<Geometry> {
        self.lax_geometry(true)
    }

    pub fn ch2_geometry(&self) -> Result<Geometry> {
        self.lax_geometry(false)
    }
}

/// One plane wave of the texture; `k` in cycles per mm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub k: [f64; 3],
    pub phase: f64,
}

fn smoothstep5(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * x * (x * (6.0 * x - 15.0) + 10.0)
}

fn smoothstep5_deriv(x: f64) -> f64 {
    if !(0.0..=1.0).contains(&x) {
        return 0.0;
    }
    30.0 * x * x * (x - 1.0) * (x - 1.0)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Which part of the in-plane radial map a point falls in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Zone {
    Pool,
    Wall,
    Taper,
    Static,
}

/// Everything needed to evaluate the phantom in closed form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: PhantomConfig,
    pub waves: Vec<Wave>,
    /// `c(t)` for every phase, mm².
    pub contraction: Vec<f64>,
    pub ed_index: usize,
    pub es_index: usize,
    /// Injected per-slice in-plane shifts (mm), if any.
    pub shifts: Option<Vec<[f64; 2]>>,
}

impl GroundTruth {
    pub fn new(config: PhantomConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.texture_seed);
        // Keep the z wavelength well above the slice spacing so the texture is
        // not aliased by the coarse through-plane sampling.
        let kz_max = 1.0 / (4.0 * config.spacing[2].max(config.texture_min_wavelength));
        let waves = (0..config.texture_waves)
            .map(|_| {
                let lambda = rng.random_range(config.texture_min_wavelength..=config.texture_max_wavelength);
                let theta = rng.random_range(0.0..2.0 * PI);
                let kz = rng.random_range(-kz_max..=kz_max);
                Wave {
                    k: [theta.cos() / lambda, theta.sin() / lambda, kz],
                    phase: rng.random_range(0.0..2.0 * PI),
                }
            })
            .collect();
        let contraction = (0..config.phases).map(|t| config.contraction(t)).collect();
        Ok(Self {
            ed_index: config.ed_index(),
            es_index: config.es_index(),
            config,
            waves,
            contraction,
            shifts: None,
        })
    }

    fn c(&self, t: usize) -> f64 {
        self.contraction[t]
    }

    fn r_in_at(&self, z: f64) -> f64 {
        self.config.r_in * self.config.radius_scale(z)
    }

    fn r_out_at(&self, z: f64) -> f64 {
        self.config.r_out * self.config.radius_scale(z)
    }

    /// Taper weight `w(R)` and its derivative.
    fn taper(&self, big_r: f64) -> (f64, f64) {
        let rt = self.config.taper_radius;
        let tw = self.config.taper_width;
        if big_r <= rt {
            (1.0, 0.0)
        } else if big_r >= rt + tw {
            (0.0, 0.0)
        } else {
            let x = (big_r - rt) / tw;
            (1.0 - smoothstep5(x), -smoothstep5_deriv(x) / tw)
        }
    }

    fn zone(&self, big_r: f64, z: f64) -> Zone {
        let rt = self.config.taper_radius;
        if big_r < self.r_in_at(z) {
            Zone::Pool
        } else if big_r <= rt {
            Zone::Wall
        } else if big_r < rt + self.config.taper_width {
            Zone::Taper
        } else {
            Zone::Static
        }
    }

    /// Spatial radius at phase `t` of the material radius `R`, with `dr/dR`.
    fn radial_map(&self, big_r: f64, z: f64, t: usize) -> (f64, f64) {
        let c = self.c(t);
        match self.zone(big_r, z) {
            Zone::Pool => {
                let r_in = self.r_in_at(z);
                let s = (r_in * r_in - c).sqrt() / r_in;
                (big_r * s, s)
            }
            Zone::Wall => {
                let r = (big_r * big_r - c).sqrt();
                (r, big_r / r)
            }
            Zone::Taper => {
                let (w, dw) = self.taper(big_r);
                let r = (big_r * big_r - c * w).sqrt();
                (r, (2.0 * big_r - c * dw) / (2.0 * r))
            }
            Zone::Static => (big_r, 1.0),
        }
    }

    /// Material radius whose image at phase `t` is the spatial radius `r`.
    fn radial_inverse(&self, r: f64, z: f64, t: usize) -> f64 {
        let c = self.c(t);
        let r_in = self.r_in_at(z);
        let r_in_t = (r_in * r_in - c).sqrt();
        if r < r_in_t {
            return r * r_in / r_in_t;
        }
        let rt = self.config.taper_radius;
        if r * r <= rt * rt - c {
            return (r * r + c).sqrt();
        }
        let outer = rt + self.config.taper_width;
        if r >= outer {
            return r;
        }
        // Taper band: r(R) is increasing, solve by bisection.
        let (mut lo, mut hi) = (rt, outer);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if self.radial_map(mid, z, t).0 < r {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// `∂r/∂z` at fixed material radius (non-zero only in the tapered pool).
    fn radial_map_dz(&self, big_r: f64, z: f64, t: usize) -> f64 {
        let cfg = &self.config;
        let c = self.c(t);
        if self.zone(big_r, z) != Zone::Pool || c == 0.0 || z.abs() >= cfg.half_length {
            return 0.0;
        }
        let r_in = self.r_in_at(z);
        let dr_in = cfg.r_in * (cfg.apex_scale - 1.0) / (2.0 * cfg.half_length);
        let root = (r_in * r_in - c).sqrt();
        big_r * c / (r_in * r_in * root) * dr_in
    }

    /// Position at phase `t` of the end-diastolic material point `x`.
    pub fn forward_map(&self, t: usize, x: &Vec3) -> Vec3 {
        let big_r = x.x.hypot(x.y);
        if big_r == 0.0 || self.c(t) == 0.0 {
            return *x;
        }
        let (r, _) = self.radial_map(big_r, x.z, t);
        Vec3::new(x.x * r / big_r, x.y * r / big_r, x.z)
    }

    /// End-diastolic material point found at `p` at phase `t`.
    pub fn material(&self, t: usize, p: &Vec3) -> Vec3 {
        let r = p.x.hypot(p.y);
        if r == 0.0 || self.c(t) == 0.0 {
            return *p;
        }
        let big_r = self.radial_inverse(r, p.z, t);
        Vec3::new(p.x * big_r / r, p.y * big_r / r, p.z)
    }

    /// Analytic deformation gradient `∂φ_t/∂x` at the end-diastolic point `x`.
    pub fn deformation_gradient(&self, t: usize, x: &Vec3) -> Mat3 {
        let big_r = x.x.hypot(x.y);
        let mut f = Mat3::identity();
        if self.c(t) == 0.0 {
            return f;
        }
        let (r, dr) = self.radial_map(big_r, x.z, t);
        if big_r == 0.0 {
            f[(0, 0)] = dr;
            f[(1, 1)] = dr;
            return f;
        }
        let ratio = r / big_r;
        let e = [x.x / big_r, x.y / big_r];
        for a in 0..2 {
            for b in 0..2 {
                let delta = if a == b { 1.0 } else { 0.0 };
                f[(a, b)] = ratio * (delta - e[a] * e[b]) + dr * e[a] * e[b];
            }
        }
        let drz = self.radial_map_dz(big_r, x.z, t);
        f[(0, 2)] = e[0] * drz;
        f[(1, 2)] = e[1] * drz;
        f
    }

    /// True when the end-diastolic point lies in the myocardial annulus.
    pub fn in_annulus(&self, x: &Vec3) -> bool {
        let big_r = x.x.hypot(x.y);
        x.z.abs() <= self.config.half_length && big_r >= self.r_in_at(x.z) && big_r <= self.r_out_at(x.z)
    }

    /// Closed-form `(E_RR, E_CC)` at the end-diastolic point `x`.
    pub fn analytic_strain(&self, t: usize, x: &Vec3) -> Result<(f64, f64)> {
        if !self.in_annulus(x) {
            return Err(Error::Config(format!("point {x:?} is outside the myocardial annulus")));
        }
        let big_r2 = x.x * x.x + x.y * x.y;
        Ok(annulus_strain(big_r2.sqrt(), self.c(t)))
    }

    /// Label of the end-diastolic material point `x`.
    pub fn material_label(&self, x: &Vec3) -> u8 {
        if x.z.abs() > self.config.half_length {
            return label::BACKGROUND;
        }
        let s = self.config.radius_scale(x.z);
        let big_r = x.x.hypot(x.y);
        if big_r < self.config.r_in * s {
            label::LV_POOL
        } else if big_r < self.config.r_out * s {
            label::MYO
        } else if self.config.rv_enable && self.rv_signed_depth(x) > 0.0 {
            label::RV_POOL
        } else {
            label::BACKGROUND
        }
    }

    /// Positive inside the RV crescent (distance-like, mm).
    fn rv_signed_depth(&self, x: &Vec3) -> f64 {
        let s = self.config.radius_scale(x.z);
        let cx = -(self.config.r_out + RV_CENTER_OFFSET) * s;
        let disk = RV_RADIUS * s - (x.x - cx).hypot(x.y);
        let gap = x.x.hypot(x.y) - (self.config.r_out + RV_GAP) * s;
        disk.min(gap)
    }

    fn texture(&self, x: &Vec3) -> f64 {
        let sum: f64 = self
            .waves
            .iter()
            .map(|w| (2.0 * PI * (w.k[0] * x.x + w.k[1] * x.y + w.k[2] * x.z) + w.phase).cos())
            .sum();
        sum / (0.5 * self.waves.len().max(1) as f64).sqrt()
    }

    /// Noise-free intensity of the end-diastolic material point `x`.
    pub fn material_intensity(&self, x: &Vec3) -> f64 {
        let cfg = &self.config;
        let s = cfg.radius_scale(x.z);
        let big_r = x.x.hypot(x.y);
        let in_z = logistic((cfg.half_length - x.z.abs()) / EDGE_WIDTH);
        let inside_wall = logistic((cfg.r_out * s - big_r) / EDGE_WIDTH) * in_z;
        let pool = logistic((cfg.r_in * s - big_r) / EDGE_WIDTH) * in_z;
        let mut v = INTENSITY_BACKGROUND
            + (INTENSITY_MYO - INTENSITY_BACKGROUND) * inside_wall
            + (INTENSITY_LV - INTENSITY_MYO) * pool;
        if cfg.rv_enable {
            let rv = logistic(self.rv_signed_depth(x) / EDGE_WIDTH) * in_z;
            v += (INTENSITY_RV - INTENSITY_BACKGROUND) * rv;
        }
        v + cfg.texture_amplitude * self.texture(x)
    }

    pub fn label_at(&self, t: usize, p: &Vec3) -> u8 {
        self.material_label(&self.material(t, p))
    }

    pub fn intensity_at(&self, t: usize, p: &Vec3) -> f64 {
        self.material_intensity(&self.material(t, p))
    }

    /// Image and mask of phase `t` on an arbitrary grid.
    pub fn render(&self, t: usize, geom: &Geometry, noise_seed: Option<u64>) -> Result<Frame> {
        let n = geom.len();
        let mut values = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for idx in 0..n {
            let [i, j, k] = geom.unravel(idx);
            let x = self.material(t, &geom.center_of(i, j, k));
            values.push(self.material_intensity(&x));
            labels.push(self.material_label(&x));
        }
        if let (Some(seed), true) = (noise_seed, self.config.noise_sigma > 0.0) {
            let normal = Normal::new(0.0, self.config.noise_sigma)
                .map_err(|e| Error::Config(format!("noise: {e}")))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            values.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
        let image = Volume3D::new(geom.clone(), values.into_iter().map(|v| v as f32).collect())?;
        let mask = LabelMask::new(geom.clone(), labels)?;
        Frame::new(image, mask)
    }

    fn render_series(&self, geom: &Geometry, view: u64) -> Result<CineSeries> {
        let frames = (0..self.config.phases)
            .map(|t| {
                let seed = self.config.texture_seed ^ (view << 32) ^ (t as u64 + 1).wrapping_mul(0x9E37_79B9);
                self.render(t, geom, Some(seed))
            })
            .collect::<Result<Vec<_>>>()?;
        CineSeries::new(frames, self.ed_index, self.es_index)
    }
}

/// `(E_RR, E_CC)` of the area-preserving map at material radius `R` under
/// contraction `c`.
pub fn annulus_strain(big_r: f64, c: f64) -> (f64, f64) {
    let big_r2 = big_r * big_r;
    let r2 = big_r2 - c;
    (0.5 * (big_r2 / r2 - 1.0), 0.5 * (r2 / big_r2 - 1.0))
}

/// Generates the short-axis stack and both long-axis views for every phase.
pub fn make_phantom(cfg: &PhantomConfig) -> Result<(ViewSet, GroundTruth)> {
    let gt = GroundTruth::new(cfg.clone())?;
    let sax = gt.render_series(&cfg.sax_geometry()?, 0)?;
    let ch4 = gt.render_series(&cfg.ch4_geometry()?, 1)?;
    let ch2 = gt.render_series(&cfg.ch2_geometry()?, 2)?;
    Ok((ViewSet::new(sax, ch4, Some(ch2))?, gt))
}

/// Shifts every short-axis slice by a random in-plane offset drawn from
/// `U(−max_shift, max_shift)²`, identically for all time points.
pub fn inject_misalignment(
    sax: &CineSeries,
    seed: u64,
    max_shift: f64,
) -> Result<(CineSeries, SliceTranslations)> {
    if !(max_shift >= 0.0) {
        return Err(Error::Config(format!("max_shift must be non-negative, got {max_shift}")));
    }
    let nz = sax.geometry().dims()[2];
    if max_shift == 0.0 {
        return Ok((sax.clone(), SliceTranslations::zeros(nz)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shifts = (0..nz)
        .map(|_| {
            [
                rng.random_range(-max_shift..=max_shift),
                rng.random_range(-max_shift..=max_shift),
            ]
        })
        .collect();
    let trans = SliceTranslations::new(shifts)?;
    let out = sax.try_map(|f| {
        Frame::new(
            apply_translations(&f.image, &trans)?,
            crate::align::apply_translations_mask(&f.mask, &trans)?,
        )
    })?;
    Ok((out, trans))
}

/// Keeps slices `0, k, 2k, …` and multiplies the slice spacing by `k`.
pub fn decimate(vol: &Volume3D, k: usize) -> Result<Volume3D> {
    let (geom, keep) = decimated_geometry(vol.geometry(), k)?;
    let plane = geom.dims()[0] * geom.dims()[1];
    let mut data = Vec::with_capacity(geom.len());
    for &z in &keep {
        data.extend_from_slice(&vol.data()[z * plane..(z + 1) * plane]);
    }
    Volume3D::new(geom, data)
}

pub fn decimate_mask(mask: &LabelMask, k: usize) -> Result<LabelMask> {
    let (geom, keep) = decimated_geometry(mask.geometry(), k)?;
    let plane = geom.dims()[0] * geom.dims()[1];
    let mut labels = Vec::with_capacity(geom.len());
    for &z in &keep {
        labels.extend_from_slice(&mask.labels()[z * plane..(z + 1) * plane]);
    }
    LabelMask::new(geom, labels)
}

pub fn decimate_series(series: &CineSeries, k: usize) -> Result<CineSeries> {
    series.try_map(|f| Frame::new(decimate(&f.image, k)?, decimate_mask(&f.mask, k)?))
}

fn decimated_geometry(geom: &Geometry, k: usize) -> Result<(Geometry, Vec<usize>)> {
    if k == 0 {
        return Err(Error::Config("decimation factor must be at least 1".into()));
    }
    let nz = geom.dims()[2];
    let keep: Vec<usize> = (0..nz).step_by(k).collect();
    if keep.len() < 2 {
        return Err(Error::Config(format!(
            "decimating {nz} slices by {k} leaves fewer than two"
        )));
    }
    let g = geom.with_slices(keep.len(), geom.spacing()[2] * k as f64)?;
    Ok((g, keep))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> PhantomConfig {
        PhantomConfig {
            dims: [48, 48, 6],
            spacing: [2.5, 2.5, 16.0],
            phases: 5,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn contraction_cycle_is_closed() {
        let cfg = PhantomConfig::default();
        assert_eq!(cfg.contraction(0), 0.0);
        assert!(cfg.contraction(cfg.phases - 1).abs() < 1e-9);
        let es = cfg.es_index();
        assert!((cfg.contraction(es) - cfg.c_max * (PI * 4.0 / 9.0).sin().powi(2)).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = PhantomConfig::default();
        cfg.c_max = 300.0;
        assert!(cfg.validate().is_err());
        let mut cfg = PhantomConfig::default();
        cfg.r_out = 40.0;
        assert!(cfg.validate().is_err());
        let mut cfg = PhantomConfig::default();
        cfg.phases = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn closed_form_strain_example() {
        let (err, ecc) = annulus_strain(20.0, 36.0);
        assert!((err - (400.0 / 364.0 - 1.0) / 2.0).abs() < 1e-15);
        assert!((err - 0.04945).abs() < 1e-5);
        assert!((ecc + 0.045).abs() < 1e-15);
        assert_eq!(annulus_strain(25.0, 0.0), (0.0, 0.0));
    }

    #[test]
    fn analytic_strain_signs_and_domain() {
        let gt = GroundTruth::new(PhantomConfig::default()).unwrap();
        let x = Vec3::new(24.0, 3.0, -30.0);
        for t in 1..gt.config.phases - 1 {
            let (err, ecc) = gt.analytic_strain(t, &x).unwrap();
            assert!(err > 0.0 && ecc < 0.0);
        }
        assert_eq!(gt.analytic_strain(0, &x).unwrap(), (0.0, 0.0));
        assert!(gt.analytic_strain(3, &Vec3::new(5.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn phase_zero_is_identity() {
        let gt = GroundTruth::new(PhantomConfig::default()).unwrap();
        for p in [Vec3::new(10.0, -3.0, 5.0), Vec3::new(-30.0, 22.0, -39.0), Vec3::new(41.0, 0.5, 0.0)] {
            assert_eq!(gt.forward_map(0, &p), p);
            assert!((gt.material(0, &p) - p).norm() < 1e-12);
            assert!((gt.deformation_gradient(0, &p) - Mat3::identity()).norm() < 1e-12);
        }
    }

    #[test]
    fn map_is_area_preserving_in_the_wall() {
        let gt = GroundTruth::new(PhantomConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let z = rng.random_range(-40.0..40.0);
            let s = gt.config.radius_scale(z);
            let big_r = rng.random_range(gt.config.r_in * s..gt.config.r_out * s);
            let th = rng.random_range(0.0..2.0 * PI);
            let x = Vec3::new(big_r * th.cos(), big_r * th.sin(), z);
            for t in 0..gt.config.phases {
                assert!((gt.deformation_gradient(t, &x).determinant() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn material_round_trip() {
        let gt = GroundTruth::new(PhantomConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let x = Vec3::new(
                rng.random_range(-60.0..60.0),
                rng.random_range(-60.0..60.0),
                rng.random_range(-44.0..44.0),
            );
            for t in [1, 4, 7] {
                let back = gt.material(t, &gt.forward_map(t, &x));
                assert!((back - x).norm() < 1e-9, "{x:?} t={t}");
            }
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let gt = GroundTruth::new(PhantomConfig::default()).unwrap();
        let h = 1e-5;
        for x in [Vec3::new(12.0, 5.0, 0.0), Vec3::new(-22.0, 14.0, 10.0), Vec3::new(30.0, -25.0, -5.0)] {
            let f = gt.deformation_gradient(4, &x);
            let mut fd = Mat3::zeros();
            for c in 0..3 {
                let mut e = Vec3::zeros();
                e[c] = h;
                let d = (gt.forward_map(4, &(x + e)) - gt.forward_map(4, &(x - e))) / (2.0 * h);
                fd.set_column(c, &d);
            }
            assert!((f - fd).norm() < 1e-6, "{x:?}");
        }
    }

    #[test]
    fn masks_follow_the_map() {
        let (views, gt) = make_phantom(&small_cfg()).unwrap();
        let ed = views.sax.frame(gt.ed_index);
        let es = views.sax.frame(gt.es_index);
        assert!(ed.mask.count(label::MYO) > 0 && ed.mask.count(label::RV_POOL) > 0);
        // Contraction shrinks the pool and keeps the wall area.
        assert!(es.mask.count(label::LV_POOL) < ed.mask.count(label::LV_POOL));
        let myo = |m: &LabelMask| m.count(label::MYO) as f64;
        assert!((myo(&es.mask) / myo(&ed.mask) - 1.0).abs() < 0.05);
        // The first frame equals the last (closed cycle).
        assert_eq!(views.sax.frame(0).mask, ed.mask);
        assert!(views.ch4.frame(0).mask.count(label::MYO) > 0);
        assert!(views.ch2.as_ref().unwrap().frame(0).mask.count(label::MYO) > 0);
        assert_eq!(views.ch4.frame(0).mask.count(label::RV_POOL) > 0, true);
        assert_eq!(views.ch2.as_ref().unwrap().frame(0).mask.count(label::RV_POOL), 0);
    }

    #[test]
    fn lax_planes_agree_with_the_stack() {
        let cfg = PhantomConfig::default();
        let gt = GroundTruth::new(cfg.clone()).unwrap();
        let sax = cfg.sax_geometry().unwrap();
        let ch4 = cfg.ch4_geometry().unwrap();
        let (lo, hi) = sax.center_bounds();
        let (plo, phi) = ch4.center_bounds();
        assert!((plo.z - lo.z).abs() < 1e-9 && (phi.z - hi.z).abs() < 1e-9);
        assert!(plo.y == 0.0 && phi.y == 0.0);
        let p = ch4.center_of(10, 20, 0);
        assert_eq!(gt.label_at(3, &p), gt.material_label(&gt.material(3, &p)));
    }

    #[test]
    fn decimate_basics() {
        let g = Geometry::axis_aligned([2, 2, 85], [1.0, 1.0, 1.0], [0.0; 3]).unwrap();
        let v = Volume3D::from_fn(g, |p| p.z as f32).unwrap();
        let d = decimate(&v, 6).unwrap();
        assert_eq!(d.geometry().dims(), [2, 2, 15]);
        assert_eq!(d.geometry().spacing()[2], 6.0);
        assert_eq!(d.get(1, 1, 14), 84.0);
        assert_eq!(decimate(&v, 1).unwrap(), v);
        assert!(decimate(&v, 85).is_err());
    }

    #[test]
    fn zero_misalignment_is_identity() {
        let (views, _) = make_phantom(&small_cfg()).unwrap();
        let (out, t) = inject_misalignment(&views.sax, 3, 0.0).unwrap();
        assert!(t.shifts().iter().all(|s| *s == [0.0, 0.0]));
        assert_eq!(out.frame(2).image, views.sax.frame(2).image);
        let (_, t) = inject_misalignment(&views.sax, 3, 4.0).unwrap();
        assert!(t.shifts().iter().all(|s| s[0].abs() <= 4.0 && s[1].abs() <= 4.0));
        assert!(t.shifts().iter().any(|s| s[0] != 0.0));
    }
}
