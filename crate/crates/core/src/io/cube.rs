//! Binary GaussianCube files.
//!
//! Layout, all little-endian: magic `GCUB`, `u32` version, `u32` n_v,
//! `u32` channels, six `f32` bounds (min xyz then max xyz), then
//! `n_v^3 * channels` `f32` features in cell order (x fastest).

use std::io::{Read, Write};

use thiserror::Error;

use crate::gaussian::{Aabb, CHANNELS};
use crate::ot::GaussianCube;

pub const MAGIC: [u8; 4] = *b"GCUB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 40;

#[derive(Debug, Error)]
pub enum CubeIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("byte 0: bad magic {found:?}, expected \"GCUB\"")]
    BadMagic { found: [u8; 4] },
    #[error("byte 4: unsupported version {found}, expected {VERSION}")]
    Version { found: u32 },
    #[error("byte {offset}: {message}")]
    BadHeader { offset: usize, message: String },
    #[error("truncated cube file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("byte {offset}: {extra} unexpected trailing bytes")]
    Trailing { offset: usize, extra: usize },
}

pub fn payload_len(n_v: usize) -> usize {
    n_v * n_v * n_v * CHANNELS * 4
}

/// Writes `cube` and returns the number of bytes written.
pub fn write_cube<W: Write>(cube: &GaussianCube, mut sink: W) -> Result<u64, CubeIoError> {
    let mut buf = Vec::with_capacity(HEADER_LEN + payload_len(cube.n_v));
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(cube.n_v as u32).to_le_bytes());
    buf.extend_from_slice(&(CHANNELS as u32).to_le_bytes());
    for v in cube.bounds.min.iter().chain(&cube.bounds.max) {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for v in &cube.features {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&buf)?;
    sink.flush()?;
    Ok(buf.len() as u64)
}

pub fn read_cube<R: Read>(mut source: R) -> Result<GaussianCube, CubeIoError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    parse_cube(&bytes)
}

pub fn parse_cube(bytes: &[u8]) -> Result<GaussianCube, CubeIoError> {
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    if bytes.len() >= 4 && bytes[0..4] != MAGIC {
        return Err(CubeIoError::BadMagic { found: bytes[0..4].try_into().unwrap() });
    }
    if bytes.len() < HEADER_LEN {
        return Err(CubeIoError::Truncated { expected: HEADER_LEN, actual: bytes.len() });
    }
    let version = u32_at(4);
    if version != VERSION {
        return Err(CubeIoError::Version { found: version });
    }
    let n_v = u32_at(8) as usize;
    if n_v == 0 {
        return Err(CubeIoError::BadHeader { offset: 8, message: "resolution is zero".into() });
    }
    let channels = u32_at(12) as usize;
    if channels != CHANNELS {
        return Err(CubeIoError::BadHeader {
            offset: 12,
            message: format!("{channels} channels, version 1 requires {CHANNELS}"),
        });
    }
    let b: Vec<f64> = (0..6).map(|k| f32_at(16 + 4 * k) as f64).collect();
    let bounds = Aabb::new([b[0], b[1], b[2]], [b[3], b[4], b[5]])
        .map_err(|e| CubeIoError::BadHeader { offset: 16, message: e.to_string() })?;
    let expected = HEADER_LEN + payload_len(n_v);
    if bytes.len() < expected {
        return Err(CubeIoError::Truncated { expected, actual: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(CubeIoError::Trailing { offset: expected, extra: bytes.len() - expected });
    }
    let features = bytes[HEADER_LEN..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(GaussianCube::new(n_v, bounds, features).expect("payload length checked"))
}
