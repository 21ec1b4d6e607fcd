//! PNG codecs for rasters and masks, and content hashing.

use std::io::Cursor;

use bikelane_core::{Mask, Raster};
use image::{GrayImage, ImageFormat, RgbImage};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("decoding image: {0}")]
    Decode(#[from] image::ImageError),
    #[error("invalid raster: {0}")]
    Raster(#[from] bikelane_core::raster::RasterError),
}

/// Hex sha256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Codec-independent hash of raster pixels and dimensions.
pub fn raster_hash(r: &Raster) -> String {
    let mut h = Sha256::new();
    h.update(r.width().to_le_bytes());
    h.update(r.height().to_le_bytes());
    h.update(r.as_bytes());
    hex::encode(h.finalize())
}

pub fn mask_hash(m: &Mask) -> String {
    let mut h = Sha256::new();
    h.update(m.width().to_le_bytes());
    h.update(m.height().to_le_bytes());
    h.update(m.bits());
    hex::encode(h.finalize())
}

pub fn encode_png(r: &Raster) -> Vec<u8> {
    let img = RgbImage::from_raw(r.width(), r.height(), r.as_bytes().to_vec())
        .expect("raster buffer length is validated on construction");
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .expect("png encoding to memory cannot fail");
    out.into_inner()
}

/// Decodes any supported format (PNG, JPEG) to RGB8.
pub fn decode_image(bytes: &[u8]) -> Result<Raster, ImageError> {
    let img = image::load_from_memory(bytes)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Raster::from_rgb8(w, h, img.into_raw())?)
}

/// Masks are stored as 8-bit grayscale, 255 for kept pixels.
pub fn encode_mask_png(m: &Mask) -> Vec<u8> {
    let luma: Vec<u8> = m.bits().iter().map(|&b| b * 255).collect();
    let img = GrayImage::from_raw(m.width(), m.height(), luma).expect("mask buffer length");
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .expect("png encoding to memory cannot fail");
    out.into_inner()
}

/// Any luma value >= 128 counts as set.
pub fn decode_mask_png(bytes: &[u8]) -> Result<Mask, ImageError> {
    let img = image::load_from_memory(bytes)?.to_luma8();
    let (w, h) = img.dimensions();
    let bits = img.into_raw().into_iter().map(|v| u8::from(v >= 128)).collect();
    Ok(Mask::from_bits(w, h, bits)?)
}
