//! On-disk formats: raw latents, digests and RGB previews.
//!
//! A latent file is a 16-byte header (`CSTL`, then version, `P` and `d` as
//! little-endian `u32`) followed by `P·d` little-endian `f64` values.

use std::path::Path;

use image::{ImageBuffer, Rgb};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const LATENT_MAGIC: &[u8; 4] = b"CSTL";
pub const LATENT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;
const PREVIEW_SEED: u64 = 0x5eed_c01a;

pub fn encode_latent(z: &Tensor) -> Result<Vec<u8>> {
    if z.shape().len() != 2 {
        return Err(Error::Shape(format!("latent must be 2-D, got {:?}", z.shape())));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * z.len());
    out.extend_from_slice(LATENT_MAGIC);
    for v in [LATENT_VERSION, z.rows() as u32, z.cols() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in z.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_latent(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != LATENT_MAGIC {
        return Err(Error::Format("missing CSTL header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4-byte slice"));
    let version = word(4);
    if version != LATENT_VERSION {
        return Err(Error::Format(format!("unsupported latent version {version}")));
    }
    let (p, d) = (word(8) as usize, word(12) as usize);
    let body = &bytes[HEADER_LEN..];
    if body.len() != 8 * p * d {
        return Err(Error::Format(format!(
            "latent body is {} bytes, header says {p}×{d}",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::matrix(p, d, data)
}

pub fn write_latent(path: &Path, z: &Tensor) -> Result<()> {
    std::fs::write(path, encode_latent(z)?)?;
    Ok(())
}

pub fn read_latent(path: &Path) -> Result<Tensor> {
    decode_latent(&std::fs::read(path)?)
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// FNV-1a over the little-endian bytes of the latent values, as 16 hex digits.
pub fn latent_digest(z: &Tensor) -> String {
    let bytes: Vec<u8> = z.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    format!("{:016x}", fnv1a64(&bytes))
}

/// Fixed random `c × 3` projection from latent channels to RGB.
fn preview_projection(channels: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(PREVIEW_SEED);
    let scale = 1.0 / (channels as f64).sqrt();
    let data = (0..channels * 3)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * scale
        })
        .collect();
    Tensor::matrix(channels, 3, data).expect("shape is consistent by construction")
}

/// `side × side` RGB preview: latent through a fixed linear map, then a
/// logistic squash to bytes.
pub fn preview_rgb(z: &Tensor, side: usize) -> Result<ImageBuffer<Rgb<u8>, Vec<u8>>> {
    if z.rows() != side * side {
        return Err(Error::Shape(format!("latent of {} patches is not {side}×{side}", z.rows())));
    }
    let rgb = z.matmul(&preview_projection(z.cols()))?;
    let to_byte = |v: f64| (255.0 / (1.0 + (-2.0 * v).exp())).round() as u8;
    Ok(ImageBuffer::from_fn(side as u32, side as u32, |x, y| {
        let row = rgb.row(y as usize * side + x as usize);
        Rgb([to_byte(row[0]), to_byte(row[1]), to_byte(row[2])])
    }))
}

pub fn write_preview(path: &Path, z: &Tensor, side: usize) -> Result<()> {
    preview_rgb(z, side)?.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
