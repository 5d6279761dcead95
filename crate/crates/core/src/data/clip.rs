//! Clip binary format: `"POGV"`, version `u32`, dims `T, C, H, W` as `u16`,
//! then little-endian `f32` samples in row-major `[T, C, H, W]` order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLIP_MAGIC: &[u8; 4] = b"POGV";
pub const CLIP_VERSION: u32 = 1;
pub const CLIP_HEADER_LEN: usize = 16;

/// `[T, C, H, W]`.
pub type ClipShape = [usize; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub sample_id: String,
    /// `[T, C, H, W]`, values in `[0, 1]`.
    pub frames: Tensor,
    pub label: usize,
    /// Generator ground truth; diagnostics only.
    pub true_altitude_tier: Option<usize>,
}

impl ClipRecord {
    pub fn shape(&self) -> ClipShape {
        let s = self.frames.shape();
        [s[0], s[1], s[2], s[3]]
    }
}

pub fn encode_clip(frames: &Tensor) -> Result<Vec<u8>> {
    let shape = frames.shape();
    if shape.len() != 4 || shape.iter().any(|&d| d > u16::MAX as usize) {
        return Err(Error::ShapeMismatch(format!("clip must be 4-D with u16 dims, got {shape:?}")));
    }
    let mut out = Vec::with_capacity(CLIP_HEADER_LEN + 4 * frames.len());
    out.extend_from_slice(CLIP_MAGIC);
    out.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u16).to_le_bytes());
    }
    for &x in frames.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_clip(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |reason: &str| Error::MalformedFile { path: path.to_path_buf(), reason: reason.into() };
    if bytes.len() < CLIP_HEADER_LEN || &bytes[..4] != CLIP_MAGIC {
        return Err(bad("missing POGV header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CLIP_VERSION {
        return Err(bad(&format!("unsupported clip version {version}")));
    }
    let dims: Vec<usize> =
        (0..4).map(|i| u16::from_le_bytes([bytes[8 + 2 * i], bytes[9 + 2 * i]]) as usize).collect();
    let len: usize = dims.iter().product();
    if bytes.len() != CLIP_HEADER_LEN + 4 * len {
        return Err(bad("payload length does not match dims"));
    }
    let data = bytes[CLIP_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Tensor::from_vec(&dims, data))
}

pub fn write_clip(path: &Path, frames: &Tensor) -> Result<()> {
    std::fs::write(path, encode_clip(frames)?)?;
    Ok(())
}

pub fn read_clip(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    decode_clip(&std::fs::read(path)?, path)
}
