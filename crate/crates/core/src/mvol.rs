//! MVOL volume files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "MVOL"
//!      4     2  version (u16) = 1
//!      6     1  dtype (u8): 0 = f32, 1 = u8
//!      7     1  reserved (u8) = 0
//!      8    12  nx, ny, nz (u32)
//!     20    12  sx, sy, sz (f32, millimeters)
//!     32     *  nx*ny*nz elements, x-fastest
//! ```
//!
//! Intensity volumes use dtype 0; masks use dtype 1.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Dims, Volume};

pub const MAGIC: &[u8; 4] = b"MVOL";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 0,
    U8 = 1,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::U8 => "u8",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Header {
    pub dtype: Dtype,
    pub dims: Dims,
    pub voxel_size: [f32; 3],
}

fn write_header(out: &mut Vec<u8>, h: &Header) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(h.dtype as u8);
    out.push(0);
    for d in h.dims.as_array() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in h.voxel_size {
        out.extend_from_slice(&s.to_le_bytes());
    }
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

/// Parses and validates the header; returns it with the payload slice.
pub fn parse_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic { what: "volume file".into(), expected: "MVOL" });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::BadHeader(format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len())));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion { what: "MVOL", version });
    }
    let dtype = match bytes[6] {
        0 => Dtype::F32,
        1 => Dtype::U8,
        other => return Err(Error::BadHeader(format!("unknown dtype {other}"))),
    };
    if bytes[7] != 0 {
        return Err(Error::BadHeader(format!("reserved byte is {}", bytes[7])));
    }
    let raw = [u32_at(bytes, 8), u32_at(bytes, 12), u32_at(bytes, 16)];
    let dims = Dims::new(raw[0] as usize, raw[1] as usize, raw[2] as usize);
    dims.validate()?;
    let voxel_size = [f32_at(bytes, 20), f32_at(bytes, 24), f32_at(bytes, 28)];
    if !voxel_size.iter().all(|s| s.is_finite() && *s > 0.0) {
        return Err(Error::InvalidVoxelSize(voxel_size));
    }
    let payload = &bytes[HEADER_LEN..];
    let expected = dims.len() * dtype.size();
    if payload.len() < expected {
        return Err(Error::TruncatedPayload { expected, found: payload.len() });
    }
    if payload.len() > expected {
        return Err(Error::TrailingData(payload.len() - expected));
    }
    Ok((Header { dtype, dims, voxel_size }, payload))
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + v.data().len() * 4);
    write_header(&mut out, &Header { dtype: Dtype::F32, dims: v.dims(), voxel_size: v.voxel_size() });
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let (h, payload) = parse_header(bytes)?;
    if h.dtype != Dtype::F32 {
        return Err(Error::UnexpectedDtype { expected: Dtype::F32.name(), found: h.dtype as u8 });
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Volume::new(h.dims, h.voxel_size, data)
}

pub fn encode_mask(m: &BinaryMask) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + m.data().len());
    write_header(&mut out, &Header { dtype: Dtype::U8, dims: m.dims(), voxel_size: m.voxel_size() });
    out.extend_from_slice(m.data());
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<BinaryMask> {
    let (h, payload) = parse_header(bytes)?;
    if h.dtype != Dtype::U8 {
        return Err(Error::UnexpectedDtype { expected: Dtype::U8.name(), found: h.dtype as u8 });
    }
    BinaryMask::new(h.dims, h.voxel_size, payload.to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    decode_volume(&read(path.as_ref())?)
}

pub fn save_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    write(path.as_ref(), &encode_volume(v))
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    decode_mask(&read(path.as_ref())?)
}

pub fn save_mask(path: impl AsRef<Path>, m: &BinaryMask) -> Result<()> {
    write(path.as_ref(), &encode_mask(m))
}
