//! Single-file NIfTI-1, little-endian.
//!
//! Scalars are written as `float32` (intensities) or `int16` (labels);
//! `uint8` labels are accepted on read. Vector fields use `dim[0] = 5`,
//! `dim[5] = 3`, intent code 1007 and an `intent_name` of `svf` or
//! `displacement`, with the component axis slowest. Orientation is identity:
//! spacing comes from `pixdim[1..3]` and the origin from the qform offset.

use crate::error::{Error, Result};
use crate::grid::{GridGeometry, ScalarKind, ScalarVolume, VectorField};

use super::{Volume, VolumeKind};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

const INTENT_DISPVECT: i16 = 1006;
const INTENT_VECTOR: i16 = 1007;

mod offset {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const INTENT_CODE: usize = 68;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QOFFSET: usize = 268;
    pub const SROW: usize = 280;
    pub const INTENT_NAME: usize = 328;
    pub const MAGIC: usize = 344;
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn bytes<const N: usize>(&self, at: usize) -> [u8; N] {
        self.0[at..at + N].try_into().expect("header slice is in bounds")
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.bytes(at))
    }
    fn i32(&self, at: usize) -> i32 {
        i32::from_le_bytes(self.bytes(at))
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.bytes(at))
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn put(&mut self, at: usize, bytes: &[u8]) {
        self.0[at..at + bytes.len()].copy_from_slice(bytes);
    }
    fn i16(&mut self, at: usize, v: i16) {
        self.put(at, &v.to_le_bytes());
    }
    fn i32(&mut self, at: usize, v: i32) {
        self.put(at, &v.to_le_bytes());
    }
    fn f32(&mut self, at: usize, v: f32) {
        self.put(at, &v.to_le_bytes());
    }
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::Malformed(format!("NIfTI: {}", msg.into()))
}

/// Decodes a complete `.nii` file.
pub fn decode(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_SIZE {
        return Err(malformed(format!("{} bytes is shorter than the 348-byte header", bytes.len())));
    }
    let h = Reader(bytes);
    let sizeof_hdr = h.i32(offset::SIZEOF_HDR);
    if sizeof_hdr != HEADER_SIZE as i32 {
        if i32::from_be_bytes(h.bytes(offset::SIZEOF_HDR)) == HEADER_SIZE as i32 {
            return Err(Error::UnsupportedFormat(
                "NIfTI: big-endian file (sizeof_hdr is byte-swapped); only little-endian is supported".into(),
            ));
        }
        return Err(malformed(format!("sizeof_hdr is {sizeof_hdr}, expected 348")));
    }
    match &h.bytes::<4>(offset::MAGIC) {
        b"n+1\0" => {}
        b"ni1\0" => {
            return Err(Error::UnsupportedFormat(
                "NIfTI: magic 'ni1' (separate .hdr/.img pair) is not supported".into(),
            ))
        }
        other => return Err(malformed(format!("magic {other:?} is not 'n+1'"))),
    }

    let dim: Vec<i16> = (0..8).map(|a| h.i16(offset::DIM + 2 * a)).collect();
    let ndim = dim[0];
    if !(1..=7).contains(&ndim) {
        return Err(malformed(format!("dim[0] = {ndim} is outside 1..=7")));
    }
    let extent = |a: usize| -> Result<usize> {
        if a as i16 > ndim {
            return Ok(1);
        }
        match dim[a] {
            d if d >= 1 => Ok(d as usize),
            d => Err(malformed(format!("dim[{a}] = {d} is not positive"))),
        }
    };
    let dims = [extent(1)?, extent(2)?, extent(3)?];
    let (t, components) = (extent(4)?, extent(5)?);
    for a in 6..=7 {
        if extent(a)? != 1 {
            return Err(Error::UnsupportedFormat(format!(
                "NIfTI: dim[{a}] = {} (only 3-D volumes and 3-vectors)",
                dim[a]
            )));
        }
    }
    if t != 1 {
        return Err(Error::UnsupportedFormat(format!("NIfTI: dim[4] = {t}; time series are not supported")));
    }
    if components != 1 && components != 3 {
        return Err(Error::UnsupportedFormat(format!("NIfTI: dim[5] = {components}; only scalars and 3-vectors")));
    }

    let datatype = h.i16(offset::DATATYPE);
    let bitpix = h.i16(offset::BITPIX);
    let width = match datatype {
        DT_FLOAT32 => 4,
        DT_INT16 => 2,
        DT_UINT8 => 1,
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "NIfTI: datatype {other} (supported: 2 uint8, 4 int16, 16 float32)"
            )))
        }
    };
    if bitpix as usize != 8 * width {
        return Err(malformed(format!("bitpix {bitpix} does not match datatype {datatype}")));
    }
    if components == 3 && datatype != DT_FLOAT32 {
        return Err(Error::UnsupportedFormat("NIfTI: vector fields must be float32".into()));
    }

    let spacing = [1, 2, 3].map(|a| h.f32(offset::PIXDIM + 4 * a));
    let origin = if h.i16(offset::QFORM_CODE) > 0 {
        [0, 1, 2].map(|a| h.f32(offset::QOFFSET + 4 * a))
    } else if h.i16(offset::SFORM_CODE) > 0 {
        [0, 1, 2].map(|a| h.f32(offset::SROW + 16 * a + 12))
    } else {
        [0.0; 3]
    };
    let geometry = GridGeometry::new(dims, spacing, origin)?;

    let vox_offset = h.f32(offset::VOX_OFFSET);
    if !(vox_offset >= HEADER_SIZE as f32 && vox_offset.fract() == 0.0 && vox_offset < 1e9) {
        return Err(malformed(format!("vox_offset {vox_offset} is not a whole byte offset past the header")));
    }
    let start = vox_offset as usize;
    let payload_len = geometry
        .len()
        .checked_mul(components)
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| malformed("payload size overflows"))?;
    let expected = start.checked_add(payload_len).ok_or_else(|| malformed("payload size overflows"))?;
    if bytes.len() != expected {
        return Err(malformed(format!(
            "file has {} bytes but header implies {expected} ({} voxels × {components} × {width} bytes after offset {start})",
            bytes.len(),
            geometry.len()
        )));
    }
    let payload = &bytes[start..];
    let raw: Vec<f32> = match datatype {
        DT_FLOAT32 => payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
        DT_INT16 => payload.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f32).collect(),
        _ => payload.iter().map(|&b| b as f32).collect(),
    };
    let slope = h.f32(offset::SCL_SLOPE);
    let inter = h.f32(offset::SCL_INTER);
    let scaled = slope != 0.0 && slope.is_finite() && inter.is_finite() && (slope != 1.0 || inter != 0.0);
    let values: Vec<f32> = if scaled { raw.iter().map(|v| v * slope + inter).collect() } else { raw };

    if components == 3 {
        let intent = h.i16(offset::INTENT_CODE);
        if intent != INTENT_VECTOR && intent != INTENT_DISPVECT {
            return Err(Error::UnsupportedFormat(format!(
                "NIfTI: 5-D file with intent_code {intent} (expected 1006 or 1007 for vector fields)"
            )));
        }
        let name = h.bytes::<16>(offset::INTENT_NAME);
        let name = name.split(|&b| b == 0).next().unwrap_or_default();
        let kind = if name == b"svf" { VolumeKind::Svf } else { VolumeKind::Displacement };
        let n = geometry.len();
        let vectors = (0..n).map(|i| [values[i], values[n + i], values[2 * n + i]]).collect();
        return Ok(Volume::Field(VectorField::new(geometry, vectors)?, kind));
    }
    // scaled integer data is an intensity image, not a label map
    let kind = if datatype == DT_FLOAT32 || scaled { ScalarKind::Intensity } else { ScalarKind::Labels };
    let volume = ScalarVolume::new(geometry, values, kind).map_err(|e| match e {
        Error::InvalidArgument(m) => malformed(m),
        other => other,
    })?;
    Ok(Volume::Scalar(volume))
}

/// Encodes a volume as a complete `.nii` file.
pub fn encode(volume: &Volume) -> Result<Vec<u8>> {
    let geometry = *volume.geometry();
    let dims = geometry.dims;
    if dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::InvalidArgument(format!("NIfTI cannot hold dims {dims:?}")));
    }
    let (datatype, width, components) = match volume {
        Volume::Field(..) => (DT_FLOAT32, 4, 3),
        Volume::Scalar(s) if s.is_labels() => (DT_INT16, 2, 1),
        Volume::Scalar(_) => (DT_FLOAT32, 4, 1),
    };
    let mut w = Writer(vec![0u8; VOX_OFFSET + geometry.len() * components * width]);
    w.i32(offset::SIZEOF_HDR, HEADER_SIZE as i32);
    w.put(38, b"r");
    let mut dim = [1i16; 8];
    dim[0] = if components == 3 { 5 } else { 3 };
    for a in 0..3 {
        dim[a + 1] = dims[a] as i16;
    }
    dim[5] = components as i16;
    for (a, d) in dim.iter().enumerate() {
        w.i16(offset::DIM + 2 * a, *d);
    }
    w.i16(offset::DATATYPE, datatype);
    w.i16(offset::BITPIX, (8 * width) as i16);
    let mut pixdim = [1.0f32; 8];
    pixdim[1..4].copy_from_slice(&geometry.spacing);
    for (a, p) in pixdim.iter().enumerate() {
        w.f32(offset::PIXDIM + 4 * a, *p);
    }
    w.f32(offset::VOX_OFFSET, VOX_OFFSET as f32);
    w.f32(offset::SCL_SLOPE, 1.0);
    w.f32(offset::SCL_INTER, 0.0);
    // millimetres
    w.put(offset::XYZT_UNITS, &[2]);
    w.i16(offset::QFORM_CODE, 1);
    for a in 0..3 {
        w.f32(offset::QOFFSET + 4 * a, geometry.origin[a]);
    }
    w.put(offset::MAGIC, b"n+1\0");

    let body = &mut w.0[VOX_OFFSET..];
    match volume {
        Volume::Field(field, _) => {
            let n = geometry.len();
            for c in 0..3 {
                for (i, v) in field.vectors.iter().enumerate() {
                    let at = 4 * (c * n + i);
                    body[at..at + 4].copy_from_slice(&v[c].to_le_bytes());
                }
            }
        }
        Volume::Scalar(s) if s.is_labels() => {
            for (i, v) in s.values.iter().enumerate() {
                if *v > i16::MAX as f32 {
                    return Err(Error::InvalidArgument(format!("label {v} does not fit int16")));
                }
                body[2 * i..2 * i + 2].copy_from_slice(&(*v as i16).to_le_bytes());
            }
        }
        Volume::Scalar(s) => {
            for (i, v) in s.values.iter().enumerate() {
                body[4 * i..4 * i + 4].copy_from_slice(&v.to_le_bytes());
            }
        }
    }
    if let Volume::Field(_, kind) = volume {
        w.i16(offset::INTENT_CODE, INTENT_VECTOR);
        w.put(offset::INTENT_NAME, kind.as_str().as_bytes());
    }
    Ok(w.0)
}
