//! Library-free raster formats.
//!
//! * F32R: `F32R`, u32 LE version (1), u32 LE height, u32 LE width, then
//!   height·width little-endian f32, row-major.
//! * U8R1: `U8R1`, u32 LE height, u32 LE width, then height·width bytes.
//! * Binary PPM (P6) and PGM (P5) with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{DataError, Result};

pub const F32R_MAGIC: &[u8; 4] = b"F32R";
pub const F32R_VERSION: u32 = 1;
pub const U8R1_MAGIC: &[u8; 4] = b"U8R1";
/// Upper bound on pixels per raster.
pub const MAX_PIXELS: u64 = 1 << 28;

/// A decoded single-channel raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| DataError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}

fn pixel_count(path: &Path, height: u64, width: u64) -> Result<usize> {
    match height.checked_mul(width) {
        Some(n) if n <= MAX_PIXELS && height > 0 && width > 0 => Ok(n as usize),
        Some(0) => Err(DataError::Header {
            path: path.into(),
            msg: format!("empty {height}×{width} raster"),
        }),
        _ => Err(DataError::DimensionOverflow {
            path: path.into(),
            height,
            width,
        }),
    }
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

fn check_magic(path: &Path, bytes: &[u8], magic: &'static [u8; 4], header: usize) -> Result<()> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(DataError::BadMagic {
            path: path.into(),
            expected: std::str::from_utf8(magic).expect("ascii magic"),
        });
    }
    if bytes.len() < header {
        return Err(DataError::Truncated {
            path: path.into(),
            expected: header,
            found: bytes.len(),
        });
    }
    Ok(())
}

fn check_payload(path: &Path, payload: &[u8], expected: usize) -> Result<()> {
    if payload.len() != expected {
        return Err(DataError::Truncated {
            path: path.into(),
            expected,
            found: payload.len(),
        });
    }
    Ok(())
}

pub fn encode_f32r(height: usize, width: usize, data: &[f32]) -> Vec<u8> {
    assert_eq!(data.len(), height * width, "raster size");
    let mut out = Vec::with_capacity(16 + 4 * data.len());
    out.extend_from_slice(F32R_MAGIC);
    out.extend_from_slice(&F32R_VERSION.to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_f32r(path: &Path, bytes: &[u8]) -> Result<Raster<f32>> {
    check_magic(path, bytes, F32R_MAGIC, 16)?;
    let version = u32_at(bytes, 4);
    if version != F32R_VERSION {
        return Err(DataError::Header {
            path: path.into(),
            msg: format!("unsupported version {version}"),
        });
    }
    let (height, width) = (u32_at(bytes, 8) as u64, u32_at(bytes, 12) as u64);
    let n = pixel_count(path, height, width)?;
    let payload = &bytes[16..];
    check_payload(path, payload, 4 * n)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
        .collect();
    Ok(Raster {
        height: height as usize,
        width: width as usize,
        data,
    })
}

pub fn write_f32r(path: &Path, height: usize, width: usize, data: &[f32]) -> Result<()> {
    write(path, &encode_f32r(height, width, data))
}

pub fn read_f32r(path: &Path) -> Result<Raster<f32>> {
    decode_f32r(path, &read(path)?)
}

pub fn encode_u8r1(height: usize, width: usize, data: &[u8]) -> Vec<u8> {
    assert_eq!(data.len(), height * width, "raster size");
    let mut out = Vec::with_capacity(12 + data.len());
    out.extend_from_slice(U8R1_MAGIC);
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(data);
    out
}

pub fn decode_u8r1(path: &Path, bytes: &[u8]) -> Result<Raster<u8>> {
    check_magic(path, bytes, U8R1_MAGIC, 12)?;
    let (height, width) = (u32_at(bytes, 4) as u64, u32_at(bytes, 8) as u64);
    let n = pixel_count(path, height, width)?;
    check_payload(path, &bytes[12..], n)?;
    Ok(Raster {
        height: height as usize,
        width: width as usize,
        data: bytes[12..].to_vec(),
    })
}

pub fn write_u8r1(path: &Path, height: usize, width: usize, data: &[u8]) -> Result<()> {
    write(path, &encode_u8r1(height, width, data))
}

pub fn read_u8r1(path: &Path) -> Result<Raster<u8>> {
    decode_u8r1(path, &read(path)?)
}

fn encode_pnm(magic: &str, height: usize, width: usize, channels: usize, data: &[u8]) -> Vec<u8> {
    assert_eq!(data.len(), height * width * channels, "raster size");
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

/// Parses a binary PNM header, returning (width, height, payload offset).
fn pnm_header(path: &Path, bytes: &[u8], magic: &'static str) -> Result<(u64, u64, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(DataError::BadMagic {
            path: path.into(),
            expected: magic,
        });
    }
    let header = |msg: &str| DataError::Header {
        path: path.into(),
        msg: msg.into(),
    };
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(header("header ends early")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text.parse().map_err(|_| header("expected a decimal number"))?;
    }
    if fields[2] != 255 {
        return Err(header("only maxval 255 is supported"));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => Ok((fields[0], fields[1], pos + 1)),
        _ => Err(header("missing separator before payload")),
    }
}

fn decode_pnm(path: &Path, bytes: &[u8], magic: &'static str, channels: usize) -> Result<Raster<u8>> {
    let (width, height, offset) = pnm_header(path, bytes, magic)?;
    let n = pixel_count(path, height, width)?;
    check_payload(path, &bytes[offset..], n * channels)?;
    Ok(Raster {
        height: height as usize,
        width: width as usize,
        data: bytes[offset..].to_vec(),
    })
}

/// Interleaved RGB bytes as binary PPM.
pub fn encode_ppm(height: usize, width: usize, rgb: &[u8]) -> Vec<u8> {
    encode_pnm("P6", height, width, 3, rgb)
}

pub fn decode_ppm(path: &Path, bytes: &[u8]) -> Result<Raster<u8>> {
    decode_pnm(path, bytes, "P6", 3)
}

pub fn write_ppm(path: &Path, height: usize, width: usize, rgb: &[u8]) -> Result<()> {
    write(path, &encode_ppm(height, width, rgb))
}

/// Returns interleaved RGB bytes.
pub fn read_ppm(path: &Path) -> Result<Raster<u8>> {
    decode_ppm(path, &read(path)?)
}

pub fn encode_pgm(height: usize, width: usize, gray: &[u8]) -> Vec<u8> {
    encode_pnm("P5", height, width, 1, gray)
}

pub fn decode_pgm(path: &Path, bytes: &[u8]) -> Result<Raster<u8>> {
    decode_pnm(path, bytes, "P5", 1)
}

pub fn write_pgm(path: &Path, height: usize, width: usize, gray: &[u8]) -> Result<()> {
    write(path, &encode_pgm(height, width, gray))
}

pub fn read_pgm(path: &Path) -> Result<Raster<u8>> {
    decode_pgm(path, &read(path)?)
}
