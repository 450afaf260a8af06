//! Volumetric data model: grid geometry, intensity volumes, label masks and
//! the canonical coordinate frame shared by all views.
//!
//! Conventions used everywhere in the crate:
//! - voxel data is stored x-fastest: `i + nx * (j + ny * k)`;
//! - voxel indices refer to voxel *centers*, so index `(0,0,0)` sits at `origin`;
//! - world coordinates are millimeters, `p = origin + direction * (spacing ⊙ idx)`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const ORTHO_TOL: f64 = 1e-6;
const INSIDE_TOL: f64 = 1e-9;

/// Label codes of a segmentation.
pub mod label {
    pub const BACKGROUND: u8 = 0;
    pub const LV_POOL: u8 = 1;
    pub const MYO: u8 = 2;
    pub const RV_POOL: u8 = 3;
    pub const MAX: u8 = 3;
}

/// Grid geometry: voxel counts, spacing, origin and direction cosines.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: Vec3,
    direction: Mat3,
    world_to_index: Mat3,
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3], direction: Mat3) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Geometry(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Geometry(format!("spacing must be positive, got {spacing:?}")));
        }
        if origin.iter().any(|v| !v.is_finite()) || direction.iter().any(|v| !v.is_finite()) {
            return Err(Error::Geometry("non-finite origin or direction".into()));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot = direction.column(i).dot(&direction.column(j));
                let target = if i == j { 1.0 } else { 0.0 };
                if (dot - target).abs() >= ORTHO_TOL {
                    return Err(Error::Geometry(format!(
                        "direction columns {i},{j} not orthonormal (dot = {dot})"
                    )));
                }
            }
        }
        let scale = Mat3::from_diagonal(&Vec3::from(spacing));
        let index_to_world = direction * scale;
        let world_to_index = index_to_world
            .try_inverse()
            .ok_or_else(|| Error::Geometry("singular direction matrix".into()))?;
        Ok(Self {
            dims,
            spacing,
            origin: Vec3::from(origin),
            direction,
            world_to_index,
        })
    }

    /// Axis-aligned geometry with identity direction.
    pub fn axis_aligned(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        Self::new(dims, spacing, origin, Mat3::identity())
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn direction(&self) -> &Mat3 {
        &self.direction
    }

    /// Derivative of the continuous index with respect to the world point.
    pub fn world_to_index_matrix(&self) -> &Mat3 {
        &self.world_to_index
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn unravel(&self, n: usize) -> [usize; 3] {
        let i = n % self.dims[0];
        let j = (n / self.dims[0]) % self.dims[1];
        let k = n / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    pub fn voxel_to_world(&self, idx: &Vec3) -> Vec3 {
        let scaled = Vec3::new(
            idx.x * self.spacing[0],
            idx.y * self.spacing[1],
            idx.z * self.spacing[2],
        );
        self.origin + self.direction * scaled
    }

    pub fn world_to_voxel(&self, p: &Vec3) -> Vec3 {
        self.world_to_index * (p - self.origin)
    }

    /// World position of an integer voxel center.
    pub fn center_of(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.voxel_to_world(&Vec3::new(i as f64, j as f64, k as f64))
    }

    /// Same grid with a different number of slices / slice spacing.
    pub(crate) fn with_slices(&self, nz: usize, spacing_z: f64) -> Result<Self> {
        Self::new(
            [self.dims[0], self.dims[1], nz],
            [self.spacing[0], self.spacing[1], spacing_z],
            self.origin.into(),
            self.direction,
        )
    }

    /// World-space bounding box (min, max) of the voxel centers.
    pub fn center_bounds(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for c in 0..8 {
            let idx = Vec3::new(
                if c & 1 == 0 { 0.0 } else { (self.dims[0] - 1) as f64 },
                if c & 2 == 0 { 0.0 } else { (self.dims[1] - 1) as f64 },
                if c & 4 == 0 { 0.0 } else { (self.dims[2] - 1) as f64 },
            );
            let p = self.voxel_to_world(&idx);
            lo = lo.inf(&p);
            hi = hi.sup(&p);
        }
        (lo, hi)
    }

    /// Geometry equality up to floating-point noise in the derived fields.
    pub fn same_grid(&self, other: &Geometry) -> bool {
        self.dims == other.dims
            && self.spacing == other.spacing
            && self.origin == other.origin
            && self.direction == other.direction
    }
}

/// Result of a differentiable sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub value: f64,
    /// Gradient with respect to the world point (per mm).
    pub grad: Vec3,
    pub inside: bool,
}

impl Sample {
    const OUTSIDE: Sample = Sample {
        value: 0.0,
        grad: Vec3::new(0.0, 0.0, 0.0),
        inside: false,
    };
}

/// Locates a continuous coordinate along one axis: (base index, fraction, inside).
///
/// Singleton axes are "projected": every coordinate maps onto the only plane,
/// which is how single-slice views are looked up from displaced 3D points.
#[inline]
fn locate(x: f64, n: usize) -> Option<(usize, f64)> {
    if n == 1 {
        return Some((0, 0.0));
    }
    let last = (n - 1) as f64;
    if !(x >= -INSIDE_TOL && x <= last + INSIDE_TOL) {
        return None;
    }
    let x = x.clamp(0.0, last);
    let base = (x.floor() as usize).min(n - 2);
    Some((base, x - base as f64))
}

/// Trilinear interpolation in index space; returns value, index-space gradient
/// and inside flag.
pub(crate) fn trilinear_index<T: Copy + Into<f64>>(
    data: &[T],
    dims: [usize; 3],
    idx: &Vec3,
) -> Option<(f64, Vec3)> {
    let (i0, fx) = locate(idx.x, dims[0])?;
    let (j0, fy) = locate(idx.y, dims[1])?;
    let (k0, fz) = locate(idx.z, dims[2])?;
    let step = |n: usize| usize::from(n > 1);
    let (di, dj, dk) = (step(dims[0]), step(dims[1]) * dims[0], step(dims[2]) * dims[0] * dims[1]);
    let base = i0 + dims[0] * (j0 + dims[1] * k0);
    let v = |o: usize| -> f64 { data[base + o].into() };
    let c000 = v(0);
    let c100 = v(di);
    let c010 = v(dj);
    let c110 = v(di + dj);
    let c001 = v(dk);
    let c101 = v(di + dk);
    let c011 = v(dj + dk);
    let c111 = v(di + dj + dk);

    let c00 = c000 + fx * (c100 - c000);
    let c10 = c010 + fx * (c110 - c010);
    let c01 = c001 + fx * (c101 - c001);
    let c11 = c011 + fx * (c111 - c011);
    let c0 = c00 + fy * (c10 - c00);
    let c1 = c01 + fy * (c11 - c01);
    let value = c0 + fz * (c1 - c0);

    let mut grad = Vec3::zeros();
    if dims[0] > 1 {
        let a = (c100 - c000) * (1.0 - fy) + (c110 - c010) * fy;
        let b = (c101 - c001) * (1.0 - fy) + (c111 - c011) * fy;
        grad.x = a * (1.0 - fz) + b * fz;
    }
    if dims[1] > 1 {
        grad.y = (c10 - c00) * (1.0 - fz) + (c11 - c01) * fz;
    }
    if dims[2] > 1 {
        grad.z = c1 - c0;
    }
    Some((value, grad))
}

/// A 3D scalar image with geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    geom: Geometry,
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(geom: Geometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != geom.len() {
            return Err(Error::Payload(format!(
                "data length {} does not match grid size {}",
                data.len(),
                geom.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Payload("non-finite intensity".into()));
        }
        Ok(Self { geom, data })
    }

    pub fn zeros(geom: Geometry) -> Self {
        let n = geom.len();
        Self { geom, data: vec![0.0; n] }
    }

    pub fn from_fn(geom: Geometry, mut f: impl FnMut(Vec3) -> f32) -> Result<Self> {
        let [nx, ny, nz] = geom.dims();
        let mut data = Vec::with_capacity(geom.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(geom.center_of(i, j, k)));
                }
            }
        }
        Self::new(geom, data)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.geom.linear_index(i, j, k)]
    }

    /// Trilinear sample at a world point; zero and `false` outside the grid.
    pub fn sample_trilinear(&self, p: &Vec3) -> (f64, bool) {
        let idx = self.geom.world_to_voxel(p);
        match trilinear_index(&self.data, self.geom.dims, &idx) {
            Some((v, _)) => (v, true),
            None => (0.0, false),
        }
    }

    /// Trilinear sample with its gradient with respect to the world point.
    pub fn sample_with_grad(&self, p: &Vec3) -> Sample {
        let idx = self.geom.world_to_voxel(p);
        match trilinear_index(&self.data, self.geom.dims, &idx) {
            Some((value, g)) => Sample {
                value,
                grad: self.geom.world_to_index.transpose() * g,
                inside: true,
            },
            None => Sample::OUTSIDE,
        }
    }

    /// Samples this volume at every voxel center of `plane`.
    pub fn resample_to(&self, plane: &Geometry) -> PlaneImage {
        let [nx, ny, nz] = plane.dims();
        let mut values = Vec::with_capacity(plane.len());
        let mut inside = Vec::with_capacity(plane.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let (v, ok) = self.sample_trilinear(&plane.center_of(i, j, k));
                    values.push(v);
                    inside.push(ok);
                }
            }
        }
        PlaneImage {
            geom: plane.clone(),
            values,
            inside,
        }
    }
}

/// Output of [`Volume3D::resample_to`]: values plus per-voxel inside flags.
#[derive(Clone, Debug)]
pub struct PlaneImage {
    pub geom: Geometry,
    pub values: Vec<f64>,
    pub inside: Vec<bool>,
}

impl PlaneImage {
    pub fn to_volume(&self) -> Result<Volume3D> {
        Volume3D::new(self.geom.clone(), self.values.iter().map(|&v| v as f32).collect())
    }
}

/// A segmentation with codes from [`label`].
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    geom: Geometry,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(geom: Geometry, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != geom.len() {
            return Err(Error::Payload(format!(
                "label length {} does not match grid size {}",
                labels.len(),
                geom.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > label::MAX) {
            return Err(Error::Payload(format!("invalid label code {bad}")));
        }
        Ok(Self { geom, labels })
    }

    pub fn from_fn(geom: Geometry, mut f: impl FnMut(Vec3) -> u8) -> Result<Self> {
        let [nx, ny, nz] = geom.dims();
        let mut labels = Vec::with_capacity(geom.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    labels.push(f(geom.center_of(i, j, k)));
                }
            }
        }
        Self::new(geom, labels)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.labels[self.geom.linear_index(i, j, k)]
    }

    pub fn count(&self, code: u8) -> usize {
        self.labels.iter().filter(|&&l| l == code).count()
    }

    /// Binary indicator volume of one label, as floats (for soft sampling).
    pub fn indicator(&self, code: u8) -> Volume3D {
        Volume3D {
            geom: self.geom.clone(),
            data: self
                .labels
                .iter()
                .map(|&l| if l == code { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    /// Nearest-voxel label lookup; background outside the grid.
    pub fn sample_nearest(&self, p: &Vec3) -> u8 {
        let idx = self.geom.world_to_voxel(p);
        match self.nearest_index(&idx) {
            Some(n) => self.labels[n],
            None => label::BACKGROUND,
        }
    }

    pub(crate) fn nearest_index(&self, idx: &Vec3) -> Option<usize> {
        let mut v = [0usize; 3];
        for a in 0..3 {
            let n = self.geom.dims[a];
            if n == 1 {
                continue;
            }
            let r = idx[a].round();
            if r < 0.0 || r > (n - 1) as f64 || !r.is_finite() {
                return None;
            }
            v[a] = r as usize;
        }
        Some(self.geom.linear_index(v[0], v[1], v[2]))
    }
}

/// One cine time point: an image with its segmentation on the same grid.
#[derive(Clone, Debug)]
pub struct Frame {
    pub image: Volume3D,
    pub mask: LabelMask,
}

impl Frame {
    pub fn new(image: Volume3D, mask: LabelMask) -> Result<Self> {
        if !image.geometry().same_grid(mask.geometry()) {
            return Err(Error::Geometry("image and mask grids differ".into()));
        }
        Ok(Self { image, mask })
    }
}

/// Time-ordered frames of one view with the ED/ES indices.
#[derive(Clone, Debug)]
pub struct CineSeries {
    frames: Vec<Frame>,
    ed_index: usize,
    es_index: usize,
}

impl CineSeries {
    pub fn new(frames: Vec<Frame>, ed_index: usize, es_index: usize) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::Config("a cine series needs at least two frames".into()));
        }
        if ed_index >= frames.len() || es_index >= frames.len() {
            return Err(Error::Config(format!(
                "ed/es indices ({ed_index}, {es_index}) out of range for {} frames",
                frames.len()
            )));
        }
        let g0 = frames[0].image.geometry();
        if frames.iter().any(|f| !f.image.geometry().same_grid(g0)) {
            return Err(Error::Geometry("frames of a series must share one grid".into()));
        }
        Ok(Self {
            frames,
            ed_index,
            es_index,
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &Frame {
        &self.frames[t]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn ed_index(&self) -> usize {
        self.ed_index
    }

    pub fn es_index(&self) -> usize {
        self.es_index
    }

    pub fn geometry(&self) -> &Geometry {
        self.frames[0].image.geometry()
    }

    /// Applies `f` to every frame, keeping the time indices.
    pub fn try_map(&self, mut f: impl FnMut(&Frame) -> Result<Frame>) -> Result<Self> {
        let frames = self.frames.iter().map(&mut f).collect::<Result<Vec<_>>>()?;
        Self::new(frames, self.ed_index, self.es_index)
    }
}

/// The short-axis stack and the long-axis references of one acquisition.
#[derive(Clone, Debug)]
pub struct ViewSet {
    pub sax: CineSeries,
    pub ch4: CineSeries,
    pub ch2: Option<CineSeries>,
}

impl ViewSet {
    pub fn new(sax: CineSeries, ch4: CineSeries, ch2: Option<CineSeries>) -> Result<Self> {
        let consistent = |s: &CineSeries| {
            s.len() == sax.len() && s.ed_index() == sax.ed_index() && s.es_index() == sax.es_index()
        };
        if !consistent(&ch4) || !ch2.as_ref().map_or(true, consistent) {
            return Err(Error::Config(
                "all views need equal frame counts and matching ED/ES indices".into(),
            ));
        }
        Ok(Self { sax, ch4, ch2 })
    }

    pub fn len(&self) -> usize {
        self.sax.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sax.is_empty()
    }
}

/// Affine map between world millimeters and the canonical cube `[-1, 1]^3`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormalizedFrame {
    pub center: [f64; 3],
    pub half_extent: [f64; 3],
}

impl NormalizedFrame {
    pub fn new(center: [f64; 3], half_extent: [f64; 3]) -> Result<Self> {
        if half_extent.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::Geometry(format!(
                "half extents must be positive, got {half_extent:?}"
            )));
        }
        Ok(Self { center, half_extent })
    }

    /// Frame spanning the voxel-center bounding box of `geom`. Degenerate
    /// axes (single voxel) get half a voxel spacing as extent.
    pub fn from_geometry(geom: &Geometry) -> Self {
        let (lo, hi) = geom.center_bounds();
        let min_half = 0.5 * geom.spacing().iter().cloned().fold(f64::INFINITY, f64::min);
        let mut center = [0.0; 3];
        let mut half = [0.0; 3];
        for a in 0..3 {
            center[a] = 0.5 * (lo[a] + hi[a]);
            half[a] = (0.5 * (hi[a] - lo[a])).max(min_half);
        }
        Self {
            center,
            half_extent: half,
        }
    }

    pub fn to_canonical(&self, p: &Vec3) -> Vec3 {
        Vec3::new(
            (p.x - self.center[0]) / self.half_extent[0],
            (p.y - self.center[1]) / self.half_extent[1],
            (p.z - self.center[2]) / self.half_extent[2],
        )
    }

    pub fn to_world(&self, q: &Vec3) -> Vec3 {
        Vec3::new(
            q.x * self.half_extent[0] + self.center[0],
            q.y * self.half_extent[1] + self.center[1],
            q.z * self.half_extent[2] + self.center[2],
        )
    }

    /// Displacement in canonical units to millimeters.
    pub fn displacement_to_mm(&self, u: &Vec3) -> Vec3 {
        Vec3::new(
            u.x * self.half_extent[0],
            u.y * self.half_extent[1],
            u.z * self.half_extent[2],
        )
    }

    /// `∂u_mm/∂x_mm` from the canonical Jacobian `∂u/∂q`: `H J H⁻¹`.
    pub fn jacobian_to_mm(&self, j: &Mat3) -> Mat3 {
        let h = &self.half_extent;
        Mat3::from_fn(|r, c| j[(r, c)] * h[r] / h[c])
    }
}
