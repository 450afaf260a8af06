//! MetaImage (`.mha`, single file with `ElementDataFile = LOCAL`) subset.
//!
//! Supported element types are `MET_FLOAT`, `MET_SHORT` and `MET_UCHAR`,
//! uncompressed. `TransformMatrix` lists the direction cosines axis by axis:
//! the first three numbers are the world direction of the first index axis.
//! Geometry is written with 9 significant digits.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Geometry, LabelMask, Mat3, Volume3D};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementType {
    Float,
    Short,
    UChar,
}

impl ElementType {
    fn tag(self) -> &'static str {
        match self {
            ElementType::Float => "MET_FLOAT",
            ElementType::Short => "MET_SHORT",
            ElementType::UChar => "MET_UCHAR",
        }
    }

    fn size(self) -> usize {
        match self {
            ElementType::Float => 4,
            ElementType::Short => 2,
            ElementType::UChar => 1,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "MET_FLOAT" => Some(ElementType::Float),
            "MET_SHORT" => Some(ElementType::Short),
            "MET_UCHAR" => Some(ElementType::UChar),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MetaData {
    Float(Vec<f32>),
    Short(Vec<i16>),
    UChar(Vec<u8>),
}

/// A decoded MetaImage: geometry plus typed payload.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaImage {
    pub geometry: Geometry,
    pub data: MetaData,
}

impl MetaImage {
    pub fn element_type(&self) -> ElementType {
        match self.data {
            MetaData::Float(_) => ElementType::Float,
            MetaData::Short(_) => ElementType::Short,
            MetaData::UChar(_) => ElementType::UChar,
        }
    }

    pub fn into_volume(self) -> Result<Volume3D> {
        let data = match self.data {
            MetaData::Float(v) => v,
            MetaData::Short(v) => v.into_iter().map(f32::from).collect(),
            MetaData::UChar(v) => v.into_iter().map(f32::from).collect(),
        };
        Volume3D::new(self.geometry, data)
    }

    pub fn into_mask(self) -> Result<LabelMask> {
        let labels = match self.data {
            MetaData::UChar(v) => v,
            MetaData::Short(v) => v
                .into_iter()
                .map(|x| u8::try_from(x).map_err(|_| Error::Payload(format!("label {x} out of range"))))
                .collect::<Result<_>>()?,
            MetaData::Float(v) => v
                .into_iter()
                .map(|x| {
                    if x.fract() == 0.0 && (0.0..=255.0).contains(&x) {
                        Ok(x as u8)
                    } else {
                        Err(Error::Payload(format!("label {x} is not an integer code")))
                    }
                })
                .collect::<Result<_>>()?,
        };
        LabelMask::new(self.geometry, labels)
    }
}

/// Rounds to 9 significant digits and prints the shortest exact decimal of that.
fn fmt_sig9(v: f64) -> String {
    let rounded: f64 = format!("{v:.8e}").parse().unwrap_or(v);
    let rounded = if rounded == 0.0 { 0.0 } else { rounded };
    format!("{rounded}")
}

fn join(vals: impl IntoIterator<Item = f64>) -> String {
    vals.into_iter().map(fmt_sig9).collect::<Vec<_>>().join(" ")
}

fn header_text(geom: &Geometry, et: ElementType) -> String {
    let d = geom.direction();
    let tm: Vec<f64> = (0..3).flat_map(|c| (0..3).map(move |r| d[(r, c)])).collect();
    let o = geom.origin();
    let [nx, ny, nz] = geom.dims();
    let mut h = String::new();
    h.push_str("ObjectType = Image\n");
    h.push_str("NDims = 3\n");
    h.push_str("BinaryData = True\n");
    h.push_str("BinaryDataByteOrderMSB = False\n");
    h.push_str("CompressedData = False\n");
    h.push_str(&format!("TransformMatrix = {}\n", join(tm)));
    h.push_str(&format!("Offset = {}\n", join([o.x, o.y, o.z])));
    h.push_str("CenterOfRotation = 0 0 0\n");
    h.push_str(&format!("ElementSpacing = {}\n", join(geom.spacing())));
    h.push_str(&format!("DimSize = {nx} {ny} {nz}\n"));
    h.push_str(&format!("ElementType = {}\n", et.tag()));
    h.push_str("ElementDataFile = LOCAL\n");
    h
}

pub fn encode(img: &MetaImage) -> Vec<u8> {
    let et = img.element_type();
    let mut out = header_text(&img.geometry, et).into_bytes();
    out.reserve(img.geometry.len() * et.size());
    match &img.data {
        MetaData::Float(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        MetaData::Short(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        MetaData::UChar(v) => out.extend_from_slice(v),
    }
    out
}

fn parse_floats(key: &str, value: &str, n: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = value
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::header(key, format!("cannot parse `{value}`: {e}")))?;
    if vals.len() != n {
        return Err(Error::header(key, format!("expected {n} values, found {}", vals.len())));
    }
    Ok(vals)
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::header(key, format!("expected True/False, found `{value}`"))),
    }
}

pub fn decode(bytes: &[u8]) -> Result<MetaImage> {
    let mut pos = 0;
    let mut ndims = None;
    let mut dims = None;
    let mut spacing = vec![1.0; 3];
    let mut offset = vec![0.0; 3];
    let mut tm: Option<Vec<f64>> = None;
    let mut etype = None;
    let mut msb = false;
    let mut found_data = false;

    while pos < bytes.len() {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|e| pos + e)
            .ok_or_else(|| Error::header("ElementDataFile", "header ended without ElementDataFile"))?;
        let line = std::str::from_utf8(&bytes[pos..end])
            .map_err(|_| Error::header("<line>", "non-ASCII header line"))?
            .trim_end_matches('\r');
        pos = end + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| Error::header(line.trim(), "expected `Key = Value`"))?;
        match key {
            "NDims" => {
                let n: usize = value
                    .parse()
                    .map_err(|_| Error::header(key, format!("cannot parse `{value}`")))?;
                if n != 3 {
                    return Err(Error::header(key, format!("only 3 dimensions supported, found {n}")));
                }
                ndims = Some(n);
            }
            "DimSize" => {
                let v: Vec<usize> = value
                    .split_whitespace()
                    .map(|t| t.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::header(key, format!("cannot parse `{value}`")))?;
                if v.len() != 3 {
                    return Err(Error::header(key, format!("expected 3 values, found {}", v.len())));
                }
                dims = Some([v[0], v[1], v[2]]);
            }
            "ElementSpacing" | "ElementSize" => spacing = parse_floats(key, value, 3)?,
            "Offset" | "Position" | "Origin" => offset = parse_floats(key, value, 3)?,
            "TransformMatrix" | "Rotation" | "Orientation" => tm = Some(parse_floats(key, value, 9)?),
            "ElementType" => {
                etype = Some(
                    ElementType::parse(value)
                        .ok_or_else(|| Error::header(key, format!("unsupported element type `{value}`")))?,
                )
            }
            "BinaryDataByteOrderMSB" | "ElementByteOrderMSB" => msb = parse_bool(key, value)?,
            "CompressedData" => {
                if parse_bool(key, value)? {
                    return Err(Error::header(key, "compressed payloads are not supported"));
                }
            }
            "BinaryData" => {
                if !parse_bool(key, value)? {
                    return Err(Error::header(key, "ASCII payloads are not supported"));
                }
            }
            "ElementNumberOfChannels" => {
                if value != "1" {
                    return Err(Error::header(key, "only scalar images are supported"));
                }
            }
            "ElementDataFile" => {
                if value != "LOCAL" {
                    return Err(Error::header(key, format!("only LOCAL data is supported, found `{value}`")));
                }
                found_data = true;
                break;
            }
            _ => {}
        }
    }
    if !found_data {
        return Err(Error::header("ElementDataFile", "missing"));
    }
    ndims.ok_or_else(|| Error::header("NDims", "missing"))?;
    let dims = dims.ok_or_else(|| Error::header("DimSize", "missing"))?;
    let et = etype.ok_or_else(|| Error::header("ElementType", "missing"))?;
    let direction = match tm {
        Some(v) => Mat3::from_fn(|r, c| v[3 * c + r]),
        None => Mat3::identity(),
    };
    let geometry = Geometry::new(dims, [spacing[0], spacing[1], spacing[2]], [offset[0], offset[1], offset[2]], direction)
        .map_err(|e| Error::header("TransformMatrix", e.to_string()))?;

    let payload = &bytes[pos..];
    let expected = geometry.len() * et.size();
    if payload.len() != expected {
        return Err(Error::Payload(format!(
            "DimSize implies {expected} bytes of {} data, found {}",
            et.tag(),
            payload.len()
        )));
    }
    let data = match et {
        ElementType::Float => MetaData::Float(
            payload
                .chunks_exact(4)
                .map(|c| {
                    let b = [c[0], c[1], c[2], c[3]];
                    if msb { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) }
                })
                .collect(),
        ),
        ElementType::Short => MetaData::Short(
            payload
                .chunks_exact(2)
                .map(|c| {
                    let b = [c[0], c[1]];
                    if msb { i16::from_be_bytes(b) } else { i16::from_le_bytes(b) }
                })
                .collect(),
        ),
        ElementType::UChar => MetaData::UChar(payload.to_vec()),
    };
    Ok(MetaImage { geometry, data })
}

pub fn read_mha(path: impl AsRef<Path>) -> Result<MetaImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_mha(img: &MetaImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    read_mha(path)?.into_volume()
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    read_mha(path)?.into_mask()
}

pub fn write_volume(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    write_mha(
        &MetaImage {
            geometry: vol.geometry().clone(),
            data: MetaData::Float(vol.data().to_vec()),
        },
        path,
    )
}

pub fn write_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    write_mha(
        &MetaImage {
            geometry: mask.geometry().clone(),
            data: MetaData::UChar(mask.labels().to_vec()),
        },
        path,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Vec3;
    use proptest::prelude::*;

    fn geom() -> Geometry {
        let d = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        Geometry::new([2, 2, 2], [1.25, 1.25, 8.0], [-10.5, 3.0, 0.125], d).unwrap()
    }

    #[test]
    fn float_volume_round_trips_bitwise() {
        let data = vec![0.0, -1.5, 3.25, f32::MIN_POSITIVE, 1e-30, 7.0, -0.0, 123456.78];
        let vol = Volume3D::new(geom(), data).unwrap();
        let bytes = encode(&MetaImage {
            geometry: vol.geometry().clone(),
            data: MetaData::Float(vol.data().to_vec()),
        });
        let back = decode(&bytes).unwrap().into_volume().unwrap();
        let a: Vec<u32> = vol.data().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = back.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(back.geometry(), vol.geometry());
    }

    #[test]
    fn mask_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.mha");
        let mask = LabelMask::new(geom(), vec![0, 1, 2, 3, 3, 2, 1, 0]).unwrap();
        write_mask(&mask, &path).unwrap();
        let first = fs::read(&path).unwrap();
        let back = read_mask(&path).unwrap();
        assert_eq!(back, mask);
        write_mask(&back, &path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
        assert!(String::from_utf8_lossy(&first).contains("ElementType = MET_UCHAR"));
    }

    #[test]
    fn short_payload_decodes() {
        let img = MetaImage {
            geometry: geom(),
            data: MetaData::Short(vec![-3, 0, 2, 1, 0, 0, 0, 1000]),
        };
        let vol = decode(&encode(&img)).unwrap().into_volume().unwrap();
        assert_eq!(vol.data()[0], -3.0);
        assert_eq!(vol.data()[7], 1000.0);
    }

    #[test]
    fn missing_dimsize_names_key() {
        let text = "ObjectType = Image\nNDims = 3\nElementType = MET_UCHAR\nElementDataFile = LOCAL\n";
        match decode(text.as_bytes()) {
            Err(Error::Header { key, .. }) => assert_eq!(key, "DimSize"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_values_name_key() {
        let text = "NDims = 3\nDimSize = 2 2 x\nElementType = MET_UCHAR\nElementDataFile = LOCAL\n";
        match decode(text.as_bytes()) {
            Err(Error::Header { key, .. }) => assert_eq!(key, "DimSize"),
            other => panic!("unexpected {other:?}"),
        }
        let text = "NDims = 3\nDimSize = 1 1 1\nElementType = MET_DOUBLE\nElementDataFile = LOCAL\n";
        assert!(matches!(decode(text.as_bytes()), Err(Error::Header { key, .. }) if key == "ElementType"));
    }

    #[test]
    fn payload_size_mismatch() {
        let mut bytes = encode(&MetaImage {
            geometry: geom(),
            data: MetaData::UChar(vec![0; 8]),
        });
        bytes.pop();
        assert!(matches!(decode(&bytes), Err(Error::Payload(_))));
    }

    #[test]
    fn geometry_text_has_nine_significant_digits() {
        assert_eq!(fmt_sig9(0.1 + 0.2), "0.3");
        assert_eq!(fmt_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig9(-0.0), "0");
        let g = Geometry::axis_aligned([1, 1, 1], [1.0 / 3.0, 1.0, 1.0], [100.0 / 7.0, 0.0, 0.0]).unwrap();
        let img = MetaImage {
            geometry: g,
            data: MetaData::Float(vec![1.0]),
        };
        let once = decode(&encode(&img)).unwrap();
        assert_eq!(encode(&once), encode(&decode(&encode(&once)).unwrap()));
        assert_eq!(once.geometry.origin(), Vec3::new(14.2857143, 0.0, 0.0));
    }

    proptest! {
        #[test]
        fn float_round_trip_any_payload(data in proptest::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 12)) {
            let g = Geometry::axis_aligned([3, 2, 2], [0.5, 2.0, 7.25], [1.0, -2.0, 3.5]).unwrap();
            let img = MetaImage { geometry: g, data: MetaData::Float(data) };
            let back = decode(&encode(&img)).unwrap();
            prop_assert_eq!(encode(&back), encode(&img));
        }
    }
}
