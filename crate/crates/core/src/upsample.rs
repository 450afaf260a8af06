//! Through-plane resolution increase. The default method blends neighbouring
//! slices linearly; other methods can be added behind [`UpsampleSpec`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{label, CineSeries, Frame, LabelMask, Volume3D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMethod {
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpsampleSpec {
    pub factor: usize,
    pub method: UpsampleMethod,
}

impl Default for UpsampleSpec {
    fn default() -> Self {
        Self {
            factor: 6,
            method: UpsampleMethod::Linear,
        }
    }
}

impl UpsampleSpec {
    pub fn linear(factor: usize) -> Self {
        Self {
            factor,
            method: UpsampleMethod::Linear,
        }
    }

    fn check(&self, nz: usize) -> Result<()> {
        if self.factor == 0 {
            return Err(Error::Config("upsampling factor must be at least 1".into()));
        }
        if self.factor > 1 && nz < 2 {
            return Err(Error::Config("upsampling needs at least two slices".into()));
        }
        Ok(())
    }

    /// Output slice count for `nz` input slices.
    pub fn output_slices(&self, nz: usize) -> usize {
        (nz - 1) * self.factor + 1
    }
}

/// For output slice `s`: lower input slice and blend weight of the upper one.
fn blend(s: usize, k: usize, nz: usize) -> (usize, f64) {
    let lower = (s / k).min(nz - 1);
    (lower, (s - lower * k) as f64 / k as f64)
}

/// `nz' = (nz − 1)·k + 1` slices at spacing `spacing_z / k`; original slices
/// are copied exactly to indices that are multiples of `k`.
pub fn upsample_through_plane(vol: &Volume3D, spec: &UpsampleSpec) -> Result<Volume3D> {
    let geom = vol.geometry();
    let [nx, ny, nz] = geom.dims();
    spec.check(nz)?;
    if spec.factor == 1 {
        return Ok(vol.clone());
    }
    let k = spec.factor;
    let out_nz = spec.output_slices(nz);
    let out_geom = geom.with_slices(out_nz, geom.spacing()[2] / k as f64)?;
    let plane = nx * ny;
    let src = vol.data();
    let mut data = Vec::with_capacity(plane * out_nz);
    for s in 0..out_nz {
        let (lo, w) = blend(s, k, nz);
        let a = &src[lo * plane..(lo + 1) * plane];
        if w == 0.0 {
            data.extend_from_slice(a);
        } else {
            let b = &src[(lo + 1) * plane..(lo + 2) * plane];
            data.extend(a.iter().zip(b).map(|(&x, &y)| ((1.0 - w) * x as f64 + w * y as f64) as f32));
        }
    }
    Volume3D::new(out_geom, data)
}

/// Label upsampling: one-hot channels blended linearly, then argmax with ties
/// going to the lowest label code.
pub fn upsample_mask(mask: &LabelMask, spec: &UpsampleSpec) -> Result<LabelMask> {
    let geom = mask.geometry();
    let [nx, ny, nz] = geom.dims();
    spec.check(nz)?;
    if spec.factor == 1 {
        return Ok(mask.clone());
    }
    let k = spec.factor;
    let out_nz = spec.output_slices(nz);
    let out_geom = geom.with_slices(out_nz, geom.spacing()[2] / k as f64)?;
    let plane = nx * ny;
    let src = mask.labels();
    let mut labels = Vec::with_capacity(plane * out_nz);
    for s in 0..out_nz {
        let (lo, w) = blend(s, k, nz);
        for p in 0..plane {
            let a = src[lo * plane + p];
            if w == 0.0 {
                labels.push(a);
                continue;
            }
            let b = src[(lo + 1) * plane + p];
            // Only the two contributing labels have non-zero weight.
            let mut score = [0.0f64; label::MAX as usize + 1];
            score[a as usize] += 1.0 - w;
            score[b as usize] += w;
            let mut best = 0;
            for (c, &v) in score.iter().enumerate() {
                if v > score[best] {
                    best = c;
                }
            }
            labels.push(best as u8);
        }
    }
    LabelMask::new(out_geom, labels)
}

pub fn upsample_series(series: &CineSeries, spec: &UpsampleSpec) -> Result<CineSeries> {
    series.try_map(|f| Frame::new(upsample_through_plane(&f.image, spec)?, upsample_mask(&f.mask, spec)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;
    use proptest::prelude::*;

    fn stack(nz: usize) -> Volume3D {
        let g = Geometry::axis_aligned([3, 4, nz], [1.0, 1.0, 6.0], [0.0, 0.0, -10.0]).unwrap();
        Volume3D::from_fn(g, |p| (p.x * 0.3 + p.y - 0.05 * p.z * p.z) as f32).unwrap()
    }

    #[test]
    fn fifteen_slices_by_six_gives_eighty_five() {
        let v = stack(15);
        let u = upsample_through_plane(&v, &UpsampleSpec::linear(6)).unwrap();
        assert_eq!(u.geometry().dims()[2], 85);
        assert_eq!(u.geometry().spacing()[2], 1.0);
        for k in 0..15 {
            for j in 0..4 {
                for i in 0..3 {
                    assert_eq!(u.get(i, j, 6 * k).to_bits(), v.get(i, j, k).to_bits());
                }
            }
        }
        let (lo, hi) = v.geometry().center_bounds();
        let (ulo, uhi) = u.geometry().center_bounds();
        assert_eq!(lo, ulo);
        assert!((hi - uhi).norm() < 1e-12);
    }

    #[test]
    fn factor_one_is_identity() {
        let v = stack(4);
        assert_eq!(upsample_through_plane(&v, &UpsampleSpec::linear(1)).unwrap(), v);
        let g = v.geometry().clone();
        let m = LabelMask::from_fn(g, |p| (p.x as u8) % 4).unwrap();
        assert_eq!(upsample_mask(&m, &UpsampleSpec::linear(1)).unwrap(), m);
    }

    #[test]
    fn midpoint_blend() {
        let g = Geometry::axis_aligned([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume3D::new(g, vec![0.0, 0.0, 0.0, 0.0, 6.0, 6.0, 6.0, 6.0]).unwrap();
        let u = upsample_through_plane(&v, &UpsampleSpec::linear(2)).unwrap();
        assert!((0..2).all(|j| (0..2).all(|i| u.get(i, j, 1) == 3.0)));
    }

    #[test]
    fn single_slice_is_rejected() {
        assert!(upsample_through_plane(&stack(1), &UpsampleSpec::linear(2)).is_err());
        assert!(upsample_through_plane(&stack(3), &UpsampleSpec::linear(0)).is_err());
    }

    #[test]
    fn constant_mask_stack_stays_constant() {
        let g = Geometry::axis_aligned([4, 4, 3], [1.0; 3], [0.0; 3]).unwrap();
        let m = LabelMask::from_fn(g, |p| ((p.x + 2.0 * p.y) as u8) % 4).unwrap();
        let u = upsample_mask(&m, &UpsampleSpec::linear(5)).unwrap();
        for k in 0..u.geometry().dims()[2] {
            for j in 0..4 {
                for i in 0..4 {
                    assert_eq!(u.get(i, j, k), m.get(i, j, 0));
                }
            }
        }
    }

    /// Oracle: full one-hot interpolation over all four channels.
    fn one_hot_argmax(a: u8, b: u8, w: f64) -> u8 {
        let mut best = (0u8, f64::NEG_INFINITY);
        for c in 0..=label::MAX {
            let v = (1.0 - w) * f64::from(u8::from(a == c)) + w * f64::from(u8::from(b == c));
            if v > best.1 {
                best = (c, v);
            }
        }
        best.0
    }

    proptest! {
        #[test]
        fn mask_matches_one_hot_oracle(labels in prop::collection::vec(0u8..4, 18), k in 1usize..7) {
            let g = Geometry::axis_aligned([3, 2, 3], [1.0; 3], [0.0; 3]).unwrap();
            let m = LabelMask::new(g, labels.clone()).unwrap();
            let u = upsample_mask(&m, &UpsampleSpec::linear(k)).unwrap();
            let present: std::collections::BTreeSet<u8> = labels.iter().copied().collect();
            for s in 0..u.geometry().dims()[2] {
                let (lo, w) = blend(s, k, 3);
                for p in 0..6 {
                    let a = labels[lo * 6 + p];
                    let b = if w > 0.0 { labels[(lo + 1) * 6 + p] } else { a };
                    prop_assert_eq!(u.labels()[s * 6 + p], one_hot_argmax(a, b, w));
                    prop_assert!(present.contains(&u.labels()[s * 6 + p]));
                }
            }
        }
    }
}
