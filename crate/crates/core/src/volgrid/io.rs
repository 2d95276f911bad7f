use std::fs;
use std::path::Path;

use super::{Dims, LabelVolume, Volume3};
use crate::error::{Error, Result};

pub const VOL3_MAGIC: &[u8; 4] = b"V3F1";
pub const LAB3_MAGIC: &[u8; 4] = b"L3U1";

const HEADER: usize = 28;

fn format_err<T>(offset: usize, detail: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        offset,
        detail: detail.into(),
    })
}

fn put_header(out: &mut Vec<u8>, magic: &[u8; 4], dims: Dims, spacing: [f32; 3]) {
    out.extend_from_slice(magic);
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
}

fn parse_header(bytes: &[u8], magic: &[u8; 4]) -> Result<(Dims, [f32; 3])> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return format_err(0, format!("expected magic {:?}", String::from_utf8_lossy(magic)));
    }
    if bytes.len() < HEADER {
        return format_err(bytes.len(), "truncated header");
    }
    let word = |i: usize| <[u8; 4]>::try_from(&bytes[4 + 4 * i..8 + 4 * i]).expect("4 bytes");
    let dims = [0, 1, 2].map(|i| u32::from_le_bytes(word(i)) as usize);
    let spacing = [3, 4, 5].map(|i| f32::from_le_bytes(word(i)));
    if let Some(i) = dims.iter().position(|&d| d == 0) {
        return format_err(4 + 4 * i, "zero dimension");
    }
    if let Some(i) = spacing.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
        return format_err(16 + 4 * i, "spacing must be positive and finite");
    }
    Ok((dims, spacing))
}

fn check_payload(bytes: &[u8], start: usize, expected: usize) -> Result<()> {
    let end = start + expected;
    if bytes.len() < end {
        return format_err(bytes.len(), format!("truncated payload, expected {end} bytes"));
    }
    if bytes.len() > end {
        return format_err(end, "trailing bytes after payload");
    }
    Ok(())
}

pub fn vol3_to_bytes(vol: &Volume3) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 4 * vol.len());
    put_header(&mut out, VOL3_MAGIC, vol.dims(), vol.spacing());
    for v in vol.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn vol3_from_bytes(bytes: &[u8]) -> Result<Volume3> {
    let (dims, spacing) = parse_header(bytes, VOL3_MAGIC)?;
    let n: usize = dims.iter().product();
    check_payload(bytes, HEADER, 4 * n)?;
    let mut data = Vec::with_capacity(n);
    for (i, chunk) in bytes[HEADER..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return format_err(HEADER + 4 * i, "non-finite value");
        }
        data.push(v);
    }
    Volume3::new(dims, spacing, data)
}

pub fn lab3_to_bytes(labels: &LabelVolume) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 1 + labels.len());
    put_header(&mut out, LAB3_MAGIC, labels.dims(), labels.spacing());
    out.push(labels.classes());
    out.extend_from_slice(labels.labels());
    out
}

pub fn lab3_from_bytes(bytes: &[u8]) -> Result<LabelVolume> {
    let (dims, spacing) = parse_header(bytes, LAB3_MAGIC)?;
    let Some(&classes) = bytes.get(HEADER) else {
        return format_err(bytes.len(), "missing class count");
    };
    if classes == 0 {
        return format_err(HEADER, "class count must be positive");
    }
    let n: usize = dims.iter().product();
    check_payload(bytes, HEADER + 1, n)?;
    let payload = &bytes[HEADER + 1..];
    if let Some(i) = payload.iter().position(|&l| l >= classes) {
        return format_err(HEADER + 1 + i, format!("label {} >= class count {classes}", payload[i]));
    }
    LabelVolume::new(dims, spacing, classes, payload.to_vec())
}

pub fn write_vol3(vol: &Volume3, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, vol3_to_bytes(vol))?;
    Ok(())
}

pub fn read_vol3(path: impl AsRef<Path>) -> Result<Volume3> {
    vol3_from_bytes(&fs::read(path)?)
}

pub fn write_lab3(labels: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, lab3_to_bytes(labels))?;
    Ok(())
}

pub fn read_lab3(path: impl AsRef<Path>) -> Result<LabelVolume> {
    lab3_from_bytes(&fs::read(path)?)
}
